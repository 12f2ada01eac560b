#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rp2/dataset.hpp"
#include "rp2/errors.hpp"
#include "rp2/transforms.hpp"

using namespace rp2;

namespace {

Image stop() { return render_sign(default_signs()[kStopClass]); }

Image gray_disc(float value) {
  Image img(kCanvas, kCanvas, true);
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      const bool in = std::hypot(x + 0.5 - 16, y + 0.5 - 16) < 12;
      img.alpha[img.index(y, x)] = in ? 1.0f : 0.0f;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = in ? value : 0.5f;
    }
  return img;
}

// Mean |a - b| over pixels where both alphas are (almost) fully opaque.
double sign_mad(const Image& a, const Image& b) {
  double sum = 0;
  int n = 0;
  for (int i = 0; i < a.pixels(); ++i) {
    if (a.coverage()[i] < 0.999f || b.coverage()[i] < 0.999f) continue;
    sum += (a.rgb.row(i) - b.rgb.row(i)).cwiseAbs().sum() / 3.0;
    ++n;
  }
  REQUIRE(n > 100);
  return sum / n;
}

}  // namespace

TEST_CASE("identity keeps sign pixels and replaces the background") {
  const Image x = stop();
  const Image y = apply(x, TransformParams::identity());
  int background_changed = 0;
  for (int i = 0; i < x.pixels(); ++i) {
    if (x.alpha[i] == 1.0f) {
      CHECK((y.rgb.row(i) - x.rgb.row(i)).cwiseAbs().maxCoeff() <= 1e-6f);
    } else {
      background_changed += (y.rgb.row(i) - x.rgb.row(i)).cwiseAbs().maxCoeff() > 0.0f;
    }
  }
  CHECK(background_changed > 100);
  CHECK(y.alpha == x.alpha);
}

TEST_CASE("a full turn returns the sign") {
  TransformParams p;
  p.rotation_deg = 360.0;
  const Image x = stop();
  CHECK(sign_mad(apply(x, p), x) <= 0.02);
}

TEST_CASE("brightness shifts mid-grey sign pixels by exactly the delta") {
  TransformParams p;
  p.brightness_delta = 0.1;
  const Image x = gray_disc(0.5f);
  const Image y = apply(x, p);
  for (int i = 0; i < x.pixels(); ++i)
    if (x.alpha[i] == 1.0f)
      for (int c = 0; c < 3; ++c) CHECK(y.rgb(i, c) == doctest::Approx(0.6).epsilon(1e-6));
  // Clamped at the top.
  const Image z = apply(gray_disc(0.95f), p);
  for (int i = 0; i < x.pixels(); ++i)
    if (x.alpha[i] == 1.0f) CHECK(z.rgb(i, 0) == 1.0f);
}

TEST_CASE("contrast pivots at one half and saturation keeps grey") {
  TransformParams p;
  p.contrast_factor = 2.0;
  p.saturation_factor = 0.3;
  const Image y = apply(gray_disc(0.6f), p);
  const Image x = gray_disc(0.6f);
  for (int i = 0; i < x.pixels(); ++i)
    if (x.alpha[i] == 1.0f)
      for (int c = 0; c < 3; ++c) CHECK(y.rgb(i, c) == doctest::Approx(0.7).epsilon(1e-5));
}

namespace {

// Smooth colours on a disc: content well below the sampling limit, so the
// round trip measures geometry rather than lost detail.
Image smooth_disc() {
  Image img = gray_disc(0.5f);
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      img.at(0, y, x) = 0.5f + 0.3f * static_cast<float>(std::sin(x * 0.25));
      img.at(1, y, x) = 0.5f + 0.3f * static_cast<float>(std::cos(y * 0.2));
      img.at(2, y, x) = 0.4f + 0.01f * static_cast<float>(x + y);
    }
  return img;
}

}  // namespace

TEST_CASE("scaling by s then 1/s returns the sign") {
  const Image x = smooth_disc();
  for (double s : {0.5, 0.8, 1.2}) {
    TransformParams a, b;
    a.scale_factor = s;
    b.scale_factor = 1.0 / s;
    CHECK_MESSAGE(sign_mad(apply(apply(x, a), b), x) <= 0.03, "s = " << s);
  }
}

TEST_CASE("outputs stay in [0,1] and are deterministic") {
  TransformRanges r;
  r.rng_seed = 3;
  r.brightness = {-0.6, 0.6};
  r.contrast = {0.3, 2.5};
  TransformSampler sampler(r);
  const Image x = stop();
  for (int k = 0; k < 50; ++k) {
    const auto p = sampler.next();
    const Image y = apply(x, p);
    CHECK(y.rgb.minCoeff() >= 0.0f);
    CHECK(y.rgb.maxCoeff() <= 1.0f);
    CHECK(apply(x, p).rgb == y.rgb);
  }
}

TEST_CASE("degenerate ranges reproduce the fixed parameters") {
  TransformParams p;
  p.rotation_deg = 7.0;
  p.brightness_delta = -0.05;
  p.contrast_factor = 1.1;
  p.saturation_factor = 0.9;
  p.scale_factor = 0.75;
  for (auto& c : p.perspective_shift) c = Eigen::Vector2d::Constant(0.02);
  const auto r = TransformRanges::fixed(p);
  Rng rng(1);
  for (int k = 0; k < 5; ++k) {
    const auto q = sample(r, rng);
    CHECK(q.rotation_deg == p.rotation_deg);
    CHECK(q.brightness_delta == p.brightness_delta);
    CHECK(q.contrast_factor == p.contrast_factor);
    CHECK(q.saturation_factor == p.saturation_factor);
    CHECK(q.scale_factor == p.scale_factor);
    for (int i = 0; i < 4; ++i) CHECK(q.perspective_shift[static_cast<std::size_t>(i)] == p.perspective_shift[0]);
  }
}

TEST_CASE("same seed gives the same sequence") {
  TransformRanges r;
  r.rng_seed = 42;
  TransformSampler a(r), b(r);
  for (int k = 0; k < 20; ++k) {
    const auto p = a.next(), q = b.next();
    CHECK(p.rotation_deg == q.rotation_deg);
    CHECK(p.scale_factor == q.scale_factor);
    CHECK(p.background_noise_seed == q.background_noise_seed);
  }
}

TEST_CASE("rotation draws are centred") {
  TransformRanges r;
  r.rng_seed = 9;
  TransformSampler s(r);
  double sum = 0;
  for (int k = 0; k < 10000; ++k) sum += s.next().rotation_deg;
  CHECK(std::abs(sum / 10000) < 0.5);
}

TEST_CASE("invalid ranges and non-convex quads are rejected") {
  TransformRanges r;
  r.scale = {1.2, 0.5};
  CHECK_THROWS_AS(r.validate(), ParameterError);
  r = {};
  r.contrast = {0.0, 1.0};
  CHECK_THROWS_AS(r.validate(), ParameterError);
  TransformParams p;
  p.perspective_shift[0] = {0.9, 0.9};  // top-left pushed past the centre
  CHECK_THROWS_AS(apply(stop(), p), ParameterError);
  TransformParams q;
  q.scale_factor = 0.0;
  CHECK_THROWS_AS(apply(stop(), q), ParameterError);
}

TEST_CASE("warp backward matches finite differences") {
  TransformParams p;
  p.rotation_deg = 11.0;
  p.scale_factor = 0.9;
  p.perspective_shift[1] = {0.05, -0.03};
  p.contrast_factor = 0.9;
  p.saturation_factor = 1.1;
  p.brightness_delta = 0.02;
  Image x = stop();
  // Keep colours away from the clamp so the map is affine near x.
  x.rgb = (0.3f + 0.4f * x.rgb.array()).matrix();
  WarpOperator warp(x.alpha, x.height, x.width, p);
  warp.apply_recording(x.rgb);
  Rng rng(4);
  std::normal_distribution<float> n01;
  Eigen::MatrixXf g(x.pixels(), 3);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
  const Eigen::MatrixXf vjp = warp.backward(g);
  const auto objective = [&](const Eigen::MatrixXf& src) {
    return (warp.apply(src).rgb.cast<double>().array() * g.cast<double>().array()).sum();
  };
  std::uniform_int_distribution<int> pick(0, x.pixels() * 3 - 1);
  int checked = 0;
  for (int k = 0; k < 200 && checked < 60; ++k) {
    const int i = pick(rng);
    if (x.alpha[i % x.pixels()] == 0.0f) continue;
    Eigen::MatrixXf a = x.rgb, b = x.rgb;
    a.data()[i] += 1e-2f;
    b.data()[i] -= 1e-2f;
    const double fd = (objective(a) - objective(b)) / 2e-2;
    CHECK(vjp.data()[i] == doctest::Approx(fd).epsilon(1e-3).scale(1e-2));
    ++checked;
  }
  CHECK(checked == 60);
}

#include "rp2/transforms.hpp"

#include "rp2/errors.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rp2 {

TransformRanges TransformRanges::fixed(const TransformParams& p) {
  TransformRanges r;
  r.rotation_deg = {p.rotation_deg, p.rotation_deg};
  // A single interval covers all eight corner offsets, so only a uniform
  // shift can be pinned exactly.
  r.perspective = {p.perspective_shift[0].x(), p.perspective_shift[0].x()};
  r.brightness = {p.brightness_delta, p.brightness_delta};
  r.contrast = {p.contrast_factor, p.contrast_factor};
  r.saturation = {p.saturation_factor, p.saturation_factor};
  r.scale = {p.scale_factor, p.scale_factor};
  return r;
}

void TransformRanges::validate() const {
  const auto check = [](const Interval& i, const char* name) {
    if (!(i.min <= i.max)) throw ParameterError(std::string("transform range ") + name + ": min > max");
  };
  check(rotation_deg, "rotation_deg");
  check(perspective, "perspective");
  check(brightness, "brightness");
  check(contrast, "contrast");
  check(saturation, "saturation");
  check(scale, "scale");
  if (contrast.min <= 0 || saturation.min <= 0 || scale.min <= 0)
    throw ParameterError("transform ranges: contrast, saturation and scale must be > 0");
}

TransformParams sample(const TransformRanges& r, Rng& rng) {
  TransformParams p;
  p.rotation_deg = uniform(rng, r.rotation_deg.min, r.rotation_deg.max);
  for (auto& corner : p.perspective_shift) {
    corner.x() = uniform(rng, r.perspective.min, r.perspective.max);
    corner.y() = uniform(rng, r.perspective.min, r.perspective.max);
  }
  p.brightness_delta = uniform(rng, r.brightness.min, r.brightness.max);
  p.contrast_factor = uniform(rng, r.contrast.min, r.contrast.max);
  p.saturation_factor = uniform(rng, r.saturation.min, r.saturation.max);
  p.scale_factor = uniform(rng, r.scale.min, r.scale.max);
  p.background_noise_seed = rng();
  return p;
}

TransformSampler::TransformSampler(TransformRanges ranges, std::uint64_t stream)
    : ranges_(ranges), rng_(make_rng(ranges.rng_seed, stream)) {
  ranges_.validate();
}

namespace {

Eigen::Matrix3d about_centre(const Eigen::Matrix2d& linear, const Eigen::Vector2d& c) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m.topLeftCorner<2, 2>() = linear;
  m.topRightCorner<2, 1>() = c - linear * c;
  return m;
}

double cross(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return a.x() * b.y() - a.y() * b.x();
}

}  // namespace

Eigen::Matrix3d inverse_homography(const TransformParams& params, int height, int width) {
  if (!(params.scale_factor > 0)) throw ParameterError("scale_factor must be > 0");
  if (!(params.contrast_factor > 0) || !(params.saturation_factor > 0))
    throw ParameterError("contrast and saturation factors must be > 0");

  const double w1 = width - 1.0, h1 = height - 1.0;
  const std::array<Eigen::Vector2d, 4> src{Eigen::Vector2d(0, 0), Eigen::Vector2d(w1, 0),
                                           Eigen::Vector2d(w1, h1), Eigen::Vector2d(0, h1)};
  std::array<Eigen::Vector2d, 4> dst;
  for (int i = 0; i < 4; ++i) {
    dst[i] = src[i] + Eigen::Vector2d(params.perspective_shift[i].x() * width,
                                      params.perspective_shift[i].y() * height);
  }
  double sign = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Eigen::Vector2d e0 = dst[(i + 1) % 4] - dst[i];
    const Eigen::Vector2d e1 = dst[(i + 2) % 4] - dst[(i + 1) % 4];
    const double z = cross(e0, e1);
    if (std::abs(z) < 1e-9 || (sign != 0.0 && (z > 0) != (sign > 0)))
      throw ParameterError("perspective corner offsets give a degenerate or non-convex quad");
    sign = z;
  }

  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x(), y = src[i].y(), u = dst[i].x(), v = dst[i].y();
    a.row(2 * i) << x, y, 1, 0, 0, 0, -x * u, -y * u;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -x * v, -y * v;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
  Eigen::Matrix3d perspective;
  perspective << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;

  const Eigen::Vector2d centre(w1 / 2.0, h1 / 2.0);
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  Eigen::Matrix2d rot;
  rot << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  const Eigen::Matrix3d rotation = about_centre(rot, centre);
  const Eigen::Matrix3d scale =
      about_centre(Eigen::Matrix2d::Identity() * params.scale_factor, centre);

  const Eigen::Matrix3d forward_map = scale * rotation * perspective;
  const double det = forward_map.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12)
    throw ParameterError("transform is not invertible");
  return forward_map.inverse();
}

WarpOperator::WarpOperator(const Eigen::VectorXf& source_alpha, int height, int width,
                           const TransformParams& params)
    : height_(height), width_(width) {
  if (source_alpha.size() != static_cast<Eigen::Index>(height) * width)
    throw DimensionError("WarpOperator: alpha size does not match image");
  const Eigen::Matrix3d inv = inverse_homography(params, height, width);
  const int n = height * width;
  taps_.resize(static_cast<std::size_t>(n));
  out_alpha_.resize(n);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int o = y * width + x;
      Tap& tap = taps_[static_cast<std::size_t>(o)];
      const Eigen::Vector3d p = inv * Eigen::Vector3d(x, y, 1.0);
      if (!(p.z() > 0)) {
        tap.index.fill(0);
        tap.weight.fill(0.0f);
        out_alpha_(o) = 0.0f;
        continue;
      }
      const double xs = p.x() / p.z(), ys = p.y() / p.z();
      const double fx0 = std::floor(xs), fy0 = std::floor(ys);
      const double fx = xs - fx0, fy = ys - fy0;
      const auto clampi = [](double v, int hi) {
        return static_cast<int>(std::clamp(v, 0.0, static_cast<double>(hi)));
      };
      const int x0 = clampi(fx0, width - 1), x1 = clampi(fx0 + 1, width - 1);
      const int y0 = clampi(fy0, height - 1), y1 = clampi(fy0 + 1, height - 1);
      tap.index = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
      const std::array<double, 4> bw{(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      double a = 0.0;
      for (int k = 0; k < 4; ++k) {
        const double wk = bw[k] * source_alpha(tap.index[k]);
        tap.weight[k] = static_cast<float>(wk);
        a += wk;
      }
      out_alpha_(o) = static_cast<float>(std::clamp(a, 0.0, 1.0));
    }
  }

  background_.resize(n, 3);
  Rng rng = make_rng(params.background_noise_seed, streams::kBackground);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (int c = 0; c < 3; ++c)
    for (int o = 0; o < n; ++o) background_(o, c) = unit(rng);

  // Saturation mixes towards luminance, contrast pivots at 0.5, brightness
  // shifts; all act on sign colours only.
  const Eigen::RowVector3f luma(0.299f, 0.587f, 0.114f);
  const auto sat = static_cast<float>(params.saturation_factor);
  const auto con = static_cast<float>(params.contrast_factor);
  const Eigen::Matrix3f saturation =
      sat * Eigen::Matrix3f::Identity() + (1.0f - sat) * Eigen::Vector3f::Ones() * luma;
  jitter_ = con * saturation;
  jitter_offset_ = 0.5f * (1.0f - con) + static_cast<float>(params.brightness_delta);
}

Image WarpOperator::run(const Eigen::MatrixXf& src, std::vector<std::uint8_t>* active) const {
  if (src.rows() != static_cast<Eigen::Index>(height_) * width_ || src.cols() != 3)
    throw DimensionError("WarpOperator: source image shape mismatch");
  Image out(height_, width_);
  out.alpha = out_alpha_;
  const int n = height_ * width_;
  if (active) active->assign(static_cast<std::size_t>(3 * n), 0);
  for (int o = 0; o < n; ++o) {
    const float a = out_alpha_(o);
    if (a <= 0.0f) {
      out.rgb.row(o) = background_.row(o);
      continue;
    }
    const Tap& tap = taps_[static_cast<std::size_t>(o)];
    Eigen::Vector3f premul = Eigen::Vector3f::Zero();
    for (int k = 0; k < 4; ++k) premul += tap.weight[k] * src.row(tap.index[k]).transpose();
    // a * clamp(J(premul / a), 0, 1) == clamp(A premul + a b, 0, a)
    const Eigen::Vector3f jittered = jitter_ * premul + Eigen::Vector3f::Constant(a * jitter_offset_);
    for (int c = 0; c < 3; ++c) {
      const float v = jittered(c);
      const float clamped = std::clamp(v, 0.0f, a);
      if (active && v >= 0.0f && v <= a) (*active)[static_cast<std::size_t>(c * n + o)] = 1;
      out.rgb(o, c) = clamped + (1.0f - a) * background_(o, c);
    }
  }
  return out;
}

Image WarpOperator::apply(const Eigen::MatrixXf& source_rgb) const {
  return run(source_rgb, nullptr);
}

Image WarpOperator::apply_recording(const Eigen::MatrixXf& source_rgb) {
  return run(source_rgb, &active_);
}

Eigen::MatrixXf WarpOperator::backward(const Eigen::MatrixXf& grad_output) const {
  const int n = height_ * width_;
  if (grad_output.rows() != n || grad_output.cols() != 3)
    throw DimensionError("WarpOperator::backward: gradient shape mismatch");
  if (active_.size() != static_cast<std::size_t>(3 * n))
    throw InputError("WarpOperator::backward called before apply_recording");
  Eigen::MatrixXf grad_src = Eigen::MatrixXf::Zero(n, 3);
  for (int o = 0; o < n; ++o) {
    if (out_alpha_(o) <= 0.0f) continue;
    Eigen::Vector3f g;
    for (int c = 0; c < 3; ++c)
      g(c) = active_[static_cast<std::size_t>(c * n + o)] ? grad_output(o, c) : 0.0f;
    if (g.isZero()) continue;
    const Eigen::Vector3f g_premul = jitter_.transpose() * g;
    const Tap& tap = taps_[static_cast<std::size_t>(o)];
    for (int k = 0; k < 4; ++k)
      grad_src.row(tap.index[k]) += tap.weight[k] * g_premul.transpose();
  }
  return grad_src;
}

Image apply(const Image& image, const TransformParams& params) {
  return WarpOperator(image.coverage(), image.height, image.width, params).apply(image.rgb);
}

}  // namespace rp2

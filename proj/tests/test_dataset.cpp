#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "rp2/dataset.hpp"
#include "rp2/errors.hpp"
#include "rp2/rng.hpp"

using namespace rp2;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Convex polygon containment by edge cross products (counter-clockwise in
// y-down image coordinates means all crosses <= 0).
bool in_polygon(const std::vector<Eigen::Vector2d>& poly, const Eigen::Vector2d& p) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Eigen::Vector2d a = poly[i], b = poly[(i + 1) % poly.size()];
    const double cross = (b - a).x() * (p - a).y() - (b - a).y() * (p - a).x();
    if (cross < -1e-9) return false;
  }
  return true;
}

std::vector<Eigen::Vector2d> regular_polygon(int n, double circumradius, double phase, Eigen::Vector2d c) {
  std::vector<Eigen::Vector2d> v;
  for (int k = 0; k < n; ++k) {
    const double t = phase + 2 * std::numbers::pi * k / n;
    v.push_back(c + circumradius * Eigen::Vector2d(std::cos(t), std::sin(t)));
  }
  return v;
}

Image random_image(std::uint64_t seed, bool alpha) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(13, 9, alpha);
  for (Eigen::Index i = 0; i < img.rgb.size(); ++i) img.rgb.data()[i] = u(rng);
  if (alpha)
    for (Eigen::Index i = 0; i < img.alpha.size(); ++i) img.alpha[i] = std::round(u(rng) * 255) / 255;
  return img;
}

GenerateConfig small(int per_class, std::uint64_t seed) {
  GenerateConfig c;
  c.per_class = per_class;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("twelve classes with unique ids, an octagon and circle targets") {
  const auto specs = default_signs();
  REQUIRE(specs.size() == 12);
  std::set<int> ids;
  for (const auto& s : specs) {
    ids.insert(s.class_id);
    for (const auto* c : {&s.border_color, &s.fill_color, &s.glyph_color}) {
      CHECK(c->minCoeff() >= 0.0f);
      CHECK(c->maxCoeff() <= 1.0f);
    }
  }
  CHECK(ids.size() == 12);
  CHECK(specs[kStopClass].shape == SignShape::Octagon);
  CHECK(specs[kSpeed60Class].shape == SignShape::Circle);
  int octagons = 0;
  for (const auto& s : specs) octagons += s.shape == SignShape::Octagon;
  CHECK(octagons == 1);
}

TEST_CASE("octagon alpha equals an independent polygon test") {
  const auto spec = default_signs()[kStopClass];
  const Image img = render_sign(spec);
  const double c = (kCanvas - 1) / 2.0;
  const auto poly = regular_polygon(8, spec.canonical_size / 2.0, std::numbers::pi / 8, {c, c});
  int mismatches = 0;
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x)
      mismatches += (img.alpha[img.index(y, x)] == 1.0f) != in_polygon(poly, {x, y});
  CHECK(mismatches == 0);
}

TEST_CASE("circle alpha equals the disc and is binary") {
  const auto spec = default_signs()[kSpeed60Class];
  const Image img = render_sign(spec);
  const double c = (kCanvas - 1) / 2.0, r = spec.canonical_size / 2.0;
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      const float a = img.alpha[img.index(y, x)];
      CHECK((a == 0.0f || a == 1.0f));
      CHECK((a == 1.0f) == (std::hypot(x - c, y - c) <= r));
    }
}

TEST_CASE("rendered classes are pairwise distinct") {
  const auto specs = default_signs();
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j)
      CHECK((render_sign(specs[i]).rgb - render_sign(specs[j]).rgb).cwiseAbs().maxCoeff() > 0.2f);
}

TEST_CASE("zero jitter and one image per class gives the canonical renders") {
  GenerateConfig cfg = small(1, 3);
  TransformParams none;
  cfg.jitter = TransformRanges::fixed(none);
  cfg.test_fraction = 0.0;
  const auto specs = default_signs();
  const auto d = generate(specs, cfg);
  REQUIRE(d.size() == specs.size());
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const Image canonical = render_sign(specs[k]);
    CHECK(d.labels[k] == specs[k].class_id);
    CHECK(d.images[k].alpha == canonical.alpha);
    for (int i = 0; i < canonical.pixels(); ++i)
      if (canonical.alpha[i] == 1.0f)
        CHECK((d.images[k].rgb.row(i) - canonical.rgb.row(i)).cwiseAbs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("generation is class balanced, split and deterministic") {
  const auto a = generate(default_signs(), small(10, 5));
  CHECK(a.size() == 120);
  CHECK(a.num_classes == 12);
  std::vector<int> counts(12, 0), test(12, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++counts[static_cast<std::size_t>(a.labels[i])];
    test[static_cast<std::size_t>(a.labels[i])] += a.splits[i] == Split::Test;
  }
  for (int k = 0; k < 12; ++k) {
    CHECK(counts[static_cast<std::size_t>(k)] == 10);
    CHECK(test[static_cast<std::size_t>(k)] == 2);
  }
  CHECK(a.subset(Split::Test).size() == 24);
  const auto b = generate(default_signs(), small(10, 5));
  const auto c = generate(default_signs(), small(10, 6));
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i].rgb == b.images[i].rgb);
    CHECK(a.images[i].alpha == b.images[i].alpha);
    differs |= a.images[i].rgb != c.images[i].rgb;
  }
  CHECK(differs);
  CHECK_THROWS_AS(generate(default_signs(), small(0, 1)), InputError);
}

TEST_CASE("jittered alpha stays in [0,1] and keeps most of the sign area") {
  const auto d = generate(default_signs(), small(5, 8));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& img = d.images[i];
    const double canonical = render_sign(default_signs()[static_cast<std::size_t>(d.labels[i])]).alpha.sum();
    CHECK(img.alpha.minCoeff() >= 0.0f);
    CHECK(img.alpha.maxCoeff() <= 1.0f);
    CHECK(img.alpha.sum() > 0.2 * canonical);
    CHECK(img.rgb.minCoeff() >= 0.0f);
    CHECK(img.rgb.maxCoeff() <= 1.0f);
  }
}

TEST_CASE("png round trip is within one quantisation step and keeps alpha") {
  TempDir dir("rp2_png_test");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (bool alpha : {false, true}) {
      const Image img = random_image(seed, alpha);
      const auto path = dir.path / ("img_" + std::to_string(seed) + (alpha ? "a" : "") + ".png");
      save_png(img, path);
      const Image back = load_png(path);
      REQUIRE(same_shape(img, back));
      CHECK((back.rgb - img.rgb).cwiseAbs().maxCoeff() <= 1.0f / 255.0f);
      CHECK(back.has_alpha() == alpha);
      if (alpha) CHECK(back.alpha == img.alpha);
    }
  }
}

TEST_CASE("truncated or missing png files raise an io error naming the path") {
  TempDir dir("rp2_png_trunc");
  const auto path = dir.path / "x.png";
  save_png(render_sign(default_signs()[0]), path);
  fs::resize_file(path, fs::file_size(path) / 2);
  try {
    load_png(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("x.png") != std::string::npos);
  }
  CHECK_THROWS_AS(load_png(dir.path / "missing.png"), IoError);
}

TEST_CASE("dataset directory round trip") {
  TempDir dir("rp2_dataset_test");
  const auto d = generate(default_signs(), small(3, 2));
  save_dataset(d, dir.path);
  CHECK(fs::exists(dir.path / "class_0" / "img_0.png"));
  CHECK(fs::exists(dir.path / "class_11" / "img_2.png"));
  const auto back = load_dataset(dir.path);
  REQUIRE(back.size() == d.size());
  CHECK(back.num_classes == 12);
  CHECK(back.labels == d.labels);
  CHECK(back.splits == d.splits);
  for (std::size_t i = 0; i < d.size(); ++i)
    CHECK((back.images[i].rgb - d.images[i].rgb).cwiseAbs().maxCoeff() <= 1.0f / 255.0f);
}

TEST_CASE("inconsistent datasets are rejected") {
  LabeledDataset d;
  d.num_classes = 2;
  d.images.push_back(render_sign(default_signs()[0]));
  d.labels.push_back(2);
  d.splits.push_back(Split::Train);
  CHECK_THROWS_AS(d.validate(), InputError);
  d.labels = {0, 1};
  CHECK_THROWS_AS(d.validate(), InputError);
}

TEST_CASE("texture images are deterministic and unlike signs") {
  const auto a = generate_textures(20, 4), b = generate_textures(20, 4);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].rgb == b[i].rgb);
    CHECK_FALSE(a[i].has_alpha());
    CHECK(a[i].height == kCanvas);
  }
}

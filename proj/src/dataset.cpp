#include "rp2/dataset.hpp"

#include "rp2/errors.hpp"
#include "rp2/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace rp2 {

namespace {

const std::map<char, std::vector<std::string>>& font() {
  static const std::map<char, std::vector<std::string>> glyphs{
      {'0', {"###", "#.#", "#.#", "#.#", "###"}}, {'1', {".#.", "##.", ".#.", ".#.", "###"}},
      {'2', {"###", "..#", "###", "#..", "###"}}, {'3', {"###", "..#", "###", "..#", "###"}},
      {'4', {"#.#", "#.#", "###", "..#", "..#"}}, {'5', {"###", "#..", "###", "..#", "###"}},
      {'6', {"###", "#..", "###", "#.#", "###"}}, {'7', {"###", "..#", ".#.", ".#.", ".#."}},
      {'8', {"###", "#.#", "###", "#.#", "###"}}, {'9', {"###", "#.#", "###", "..#", "###"}},
      {'S', {"###", "#..", "###", "..#", "###"}}, {'T', {"###", ".#.", ".#.", ".#.", ".#."}},
      {'O', {"###", "#.#", "#.#", "#.#", "###"}}, {'P', {"###", "#.#", "###", "#..", "#.."}},
      {'!', {"#", "#", "#", ".", "#"}},
  };
  return glyphs;
}

// Glyph as rows of '#'/'.' in font cells.
std::vector<std::string> glyph_bitmap(const std::string& glyph) {
  if (glyph.empty()) return {};
  if (glyph == "bar") return {"########", "########"};
  if (glyph == "arrow")
    return {"..#..", ".###.", "#####", "..#..", "..#..", "..#..", "..#.."};
  std::vector<std::string> rows(5);
  for (std::size_t i = 0; i < glyph.size(); ++i) {
    const auto it = font().find(glyph[i]);
    if (it == font().end()) throw InputError("no font glyph for '" + std::string(1, glyph[i]) + "'");
    for (int r = 0; r < 5; ++r) rows[r] += (i ? "." : "") + it->second[r];
  }
  return rows;
}

// Outline test in units of the sign radius, centred at the origin.
bool inside(SignShape shape, double u, double v, double radius) {
  u /= radius;
  v /= radius;
  switch (shape) {
    case SignShape::Circle: return u * u + v * v <= 1.0;
    case SignShape::Octagon: {
      const double apothem = std::cos(std::numbers::pi / 8.0);
      return std::max({std::abs(u), std::abs(v), (std::abs(u) + std::abs(v)) / std::sqrt(2.0)}) <=
             apothem;
    }
    case SignShape::Diamond: return std::abs(u) + std::abs(v) <= 1.0;
    case SignShape::Triangle:
    case SignShape::InvertedTriangle: {
      // Equilateral, circumradius 1.1, shifted so it spans the canvas height.
      if (shape == SignShape::InvertedTriangle) v = -v;
      v -= 0.25;
      const double r = 1.1 * 0.5;  // apothem
      const double s3 = std::sqrt(3.0) / 2.0;
      return v <= r && (-s3 * u - 0.5 * v) <= r && (s3 * u - 0.5 * v) <= r;
    }
  }
  return false;
}

}  // namespace

std::vector<SignSpec> default_signs() {
  const Eigen::Vector3f red(0.80f, 0.08f, 0.10f), white(0.95f, 0.95f, 0.95f),
      black(0.05f, 0.05f, 0.05f), yellow(0.97f, 0.78f, 0.10f), blue(0.10f, 0.30f, 0.75f);
  std::vector<SignSpec> specs;
  specs.push_back({0, "stop", SignShape::Octagon, white, red, 1.0f, "STOP", white, 1});
  const char* limits[] = {"20", "30", "50", "60", "70", "80"};
  for (int i = 0; i < 6; ++i)
    specs.push_back({1 + i, std::string("speed_") + limits[i], SignShape::Circle, red, white, 3.0f,
                     limits[i], black, 2});
  specs.push_back({7, "yield", SignShape::InvertedTriangle, red, white, 3.0f, "", black, 1});
  specs.push_back({8, "warning", SignShape::Triangle, red, white, 3.0f, "!", black, 2});
  specs.push_back({9, "priority", SignShape::Diamond, white, yellow, 2.0f, "", black, 1});
  specs.push_back({10, "no_entry", SignShape::Circle, red, red, 0.0f, "bar", white, 2});
  specs.push_back({11, "ahead_only", SignShape::Circle, blue, blue, 0.0f, "arrow", white, 2});
  return specs;
}

Image render_sign(const SignSpec& spec, int canvas) {
  Image image(canvas, canvas, true);
  const double centre = (canvas - 1) / 2.0;
  const double radius = spec.canonical_size / 2.0;
  const double inner = radius - spec.border_width;
  const auto bitmap = glyph_bitmap(spec.glyph);
  const int gh = static_cast<int>(bitmap.size());
  const int gw = gh ? static_cast<int>(bitmap.front().size()) : 0;
  const double cell = spec.glyph_scale;
  // Glyph box centred on the sign centre; triangles drop it slightly.
  const double gy_shift = spec.shape == SignShape::Triangle ? 2.0 : 0.0;
  const double gx0 = centre + 0.5 - gw * cell / 2.0;
  const double gy0 = centre + 0.5 - gh * cell / 2.0 + gy_shift;

  constexpr int kSuper = 4;
  for (int y = 0; y < canvas; ++y) {
    for (int x = 0; x < canvas; ++x) {
      const int p = image.index(y, x);
      image.alpha(p) = inside(spec.shape, x - centre, y - centre, radius) ? 1.0f : 0.0f;
      Eigen::Vector3f acc = Eigen::Vector3f::Zero();
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x - 0.5 + (sx + 0.5) / kSuper;
          const double py = y - 0.5 + (sy + 0.5) / kSuper;
          const double u = px - centre, v = py - centre;
          if (!inside(spec.shape, u, v, radius)) continue;
          ++hits;
          Eigen::Vector3f colour = inner > 0 && inside(spec.shape, u, v, inner) ? spec.fill_color
                                                                              : spec.border_color;
          const int gx = static_cast<int>(std::floor((px + 0.5 - gx0) / cell));
          const int gy = static_cast<int>(std::floor((py + 0.5 - gy0) / cell));
          if (gx >= 0 && gx < gw && gy >= 0 && gy < gh && bitmap[gy][gx] == '#')
            colour = spec.glyph_color;
          acc += colour;
        }
      }
      image.rgb.row(p) = hits ? Eigen::RowVector3f(acc.transpose() / static_cast<float>(hits))
                              : Eigen::RowVector3f::Constant(0.5f);
    }
  }
  return image;
}

LabeledDataset LabeledDataset::subset(Split split) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (splits[i] != split) continue;
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
    out.splits.push_back(split);
  }
  return out;
}

void LabeledDataset::validate() const {
  if (labels.size() != images.size() || splits.size() != images.size())
    throw InputError("dataset: images, labels and splits differ in length");
  for (int l : labels)
    if (l < 0 || l >= num_classes)
      throw InputError("dataset: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(num_classes) + ")");
}

LabeledDataset generate(const std::vector<SignSpec>& specs, const GenerateConfig& config) {
  if (config.per_class < 1) throw InputError("generate: per_class must be >= 1");
  config.jitter.validate();
  LabeledDataset out;
  for (const auto& s : specs) out.num_classes = std::max(out.num_classes, s.class_id + 1);
  const int test_count =
      static_cast<int>(std::floor(config.per_class * std::clamp(config.test_fraction, 0.0, 1.0)));
  for (const auto& spec : specs) {
    const Image canonical = render_sign(spec);
    Rng rng = make_rng(config.seed, streams::kDataset * 1000 + static_cast<std::uint64_t>(spec.class_id));
    for (int n = 0; n < config.per_class; ++n) {
      out.images.push_back(apply(canonical, sample(config.jitter, rng)));
      out.labels.push_back(spec.class_id);
      out.splits.push_back(n >= config.per_class - test_count ? Split::Test : Split::Train);
    }
  }
  return out;
}

std::vector<Image> generate_textures(int count, std::uint64_t seed, int canvas) {
  std::vector<Image> out;
  Rng rng = make_rng(seed, streams::kDataset);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const auto colour = [&] { return Eigen::Vector3f(unit(rng), unit(rng), unit(rng)); };
  for (int i = 0; i < count; ++i) {
    Image img(canvas, canvas);
    // Background: linear gradient between two colours, optionally noisy.
    const Eigen::Vector3f c0 = colour(), c1 = colour();
    const float angle = unit(rng) * 2.0f * std::numbers::pi_v<float>;
    const float noise = unit(rng) < 0.5f ? unit(rng) * 0.5f : 0.0f;
    for (int y = 0; y < canvas; ++y) {
      for (int x = 0; x < canvas; ++x) {
        const float t = 0.5f + ((x - canvas / 2.0f) * std::cos(angle) +
                                (y - canvas / 2.0f) * std::sin(angle)) / canvas;
        Eigen::Vector3f c = (1 - t) * c0 + t * c1;
        for (int k = 0; k < 3; ++k) c(k) += noise * (unit(rng) - 0.5f);
        img.rgb.row(img.index(y, x)) = c.cwiseMax(0.0f).cwiseMin(1.0f).transpose();
      }
    }
    const int shapes = 1 + static_cast<int>(unit(rng) * 4);
    for (int s = 0; s < shapes; ++s) {
      const Eigen::Vector3f c = colour();
      const float cx = unit(rng) * canvas, cy = unit(rng) * canvas;
      const float rx = 3 + unit(rng) * canvas / 2.0f, ry = 3 + unit(rng) * canvas / 2.0f;
      const int kind = static_cast<int>(unit(rng) * 3);
      const float period = 2 + unit(rng) * 6;
      for (int y = 0; y < canvas; ++y) {
        for (int x = 0; x < canvas; ++x) {
          const float u = (x - cx) / rx, v = (y - cy) / ry;
          bool hit = false;
          if (kind == 0) hit = u * u + v * v <= 1.0f;                          // ellipse
          if (kind == 1) hit = std::abs(u) <= 1.0f && std::abs(v) <= 1.0f;     // rectangle
          if (kind == 2) hit = std::fmod(std::abs(x * std::cos(cx) + y * std::sin(cx)), period) <
                               period / 2;                                      // stripes
          if (hit) img.rgb.row(img.index(y, x)) = c.transpose();
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
  manifest << "#format=rp2-dataset/1,num_classes=" << dataset.num_classes << "\n";
  manifest << "path,label,split\n";
  std::map<int, int> counters;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int label = dataset.labels[i];
    const std::string rel =
        "class_" + std::to_string(label) + "/img_" + std::to_string(counters[label]++) + ".png";
    save_png(dataset.images[i], dir / rel);
    manifest << rel << "," << label << "," << (dataset.splits[i] == Split::Test ? "test" : "train")
             << "\n";
  }
}

LabeledDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot read " + (dir / "manifest.csv").string());
  LabeledDataset out;
  std::string line;
  std::getline(manifest, line);
  const auto tag = line.find("num_classes=");
  if (line.rfind("#format=rp2-dataset/1", 0) != 0 || tag == std::string::npos)
    throw IoError((dir / "manifest.csv").string() + ": missing rp2-dataset/1 format tag");
  const std::string count = line.substr(tag + 12);
  if (std::from_chars(count.data(), count.data() + count.size(), out.num_classes).ec != std::errc{})
    throw IoError((dir / "manifest.csv").string() + ": bad num_classes");
  std::getline(manifest, line);  // header
  int row = 2;
  while (std::getline(manifest, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, label, split;
    if (!std::getline(ss, path, ',') || !std::getline(ss, label, ',') || !std::getline(ss, split))
      throw IoError((dir / "manifest.csv").string() + ": malformed row " + std::to_string(row));
    int value = 0;
    if (std::from_chars(label.data(), label.data() + label.size(), value).ec != std::errc{})
      throw IoError((dir / "manifest.csv").string() + ": bad label in row " + std::to_string(row));
    out.images.push_back(load_png(dir / path));
    out.labels.push_back(value);
    out.splits.push_back(split == "test" ? Split::Test : Split::Train);
  }
  out.validate();
  return out;
}

}  // namespace rp2

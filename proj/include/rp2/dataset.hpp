#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rp2/image.hpp"
#include "rp2/transforms.hpp"

namespace rp2 {

enum class SignShape { Octagon, Circle, Triangle, InvertedTriangle, Diamond };

struct SignSpec {
  int class_id = 0;
  std::string name;
  SignShape shape = SignShape::Circle;
  Eigen::Vector3f border_color{1, 1, 1};
  Eigen::Vector3f fill_color{1, 1, 1};
  float border_width = 3.0f;  // pixels at canonical size
  std::string glyph;          // text, "bar", "arrow" or empty
  Eigen::Vector3f glyph_color{0, 0, 0};
  int glyph_scale = 1;
  int canonical_size = 28;    // sign diameter in pixels
};

// The twelve-class desk-scale sign domain. Class 0 is the octagonal stop
// sign, classes 1..6 the circular speed limits 20/30/50/60/70/80.
std::vector<SignSpec> default_signs();

inline constexpr int kStopClass = 0;
inline constexpr int kSpeed60Class = 4;

// Canonical 32x32 render; alpha is 1 on pixels whose centre lies inside the
// sign outline and 0 elsewhere. Off-sign colours are neutral grey.
Image render_sign(const SignSpec& spec, int canvas = kCanvas);

enum class Split { Train, Test };

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<Split> splits;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  LabeledDataset subset(Split split) const;
  ImageBatch batch() const { return to_batch(images); }
  // Throws InputError on inconsistent lengths or labels outside [0, num_classes).
  void validate() const;
};

struct GenerateConfig {
  int per_class = 1000;
  TransformRanges jitter = TransformRanges::defaults();
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

// Seeded renders of every sign under jittered pose/colour on noise
// backgrounds. With all-zero jitter the sign pixels are the canonical render.
LabeledDataset generate(const std::vector<SignSpec>& specs, const GenerateConfig& config);

// Procedural out-of-domain images (random shapes, stripes and blobs on
// smooth or noisy backgrounds). They share only the resolution with signs.
std::vector<Image> generate_textures(int count, std::uint64_t seed, int canvas = kCanvas);

// Layout: class_<id>/img_<n>.png plus manifest.csv (path,label,split).
void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir);
LabeledDataset load_dataset(const std::filesystem::path& dir);

}  // namespace rp2

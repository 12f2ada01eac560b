#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace rp2 {

inline constexpr int kCanvas = 32;
inline constexpr int kChannels = 3;
inline constexpr int kPixels = kCanvas * kCanvas;
inline constexpr int kImageSize = kPixels * kChannels;

// One column per image in planar layout: channel c occupies rows
// [c*H*W, (c+1)*H*W) with pixel index y*width + x. This is Image::rgb
// flattened in place.
using ImageBatch = Eigen::MatrixXf;

// H x W x 3 float image in [0,1]. `rgb` is (H*W) x 3, one column per colour
// plane, pixel index y*width + x. `alpha` is either empty or H*W coverage values in [0,1]; for
// rendered signs it is the binary sign-region mask.
struct Image {
  int height = 0;
  int width = 0;
  Eigen::MatrixXf rgb;
  Eigen::VectorXf alpha;

  Image() = default;
  Image(int h, int w, bool with_alpha = false);

  bool has_alpha() const { return alpha.size() > 0; }
  int pixels() const { return height * width; }
  int index(int y, int x) const { return y * width + x; }

  float& at(int c, int y, int x) { return rgb(index(y, x), c); }
  float at(int c, int y, int x) const { return rgb(index(y, x), c); }

  // rgb as a flat 3*H*W vector (same memory).
  Eigen::Map<Eigen::VectorXf> flat() { return {rgb.data(), rgb.size()}; }
  Eigen::Map<const Eigen::VectorXf> flat() const { return {rgb.data(), rgb.size()}; }

  // Alpha if present, otherwise all ones.
  Eigen::VectorXf coverage() const;
};

bool same_shape(const Image& a, const Image& b);

// Stacks images into a batch; all images must share their dimensions.
ImageBatch to_batch(const std::vector<Image>& images);
Image from_column(const Eigen::Ref<const Eigen::VectorXf>& column, int height, int width);

// PNG I/O. 8-bit RGB, plus an alpha channel when the image has one.
// Throws IoError naming the path on any failure; never returns partial data.
void save_png(const Image& image, const std::filesystem::path& path);
Image load_png(const std::filesystem::path& path);

// 8-bit quantisation as done by PNG storage and the oracle wire format.
Eigen::VectorXf quantize8(const Eigen::Ref<const Eigen::VectorXf>& values);

}  // namespace rp2

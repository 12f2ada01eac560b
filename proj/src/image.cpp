#include "rp2/image.hpp"

#include "rp2/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace rp2 {

Image::Image(int h, int w, bool with_alpha)
    : height(h), width(w), rgb(Eigen::MatrixXf::Zero(h * w, 3)) {
  if (with_alpha) alpha = Eigen::VectorXf::Ones(h * w);
}

Eigen::VectorXf Image::coverage() const {
  return has_alpha() ? alpha : Eigen::VectorXf::Ones(pixels());
}

bool same_shape(const Image& a, const Image& b) {
  return a.height == b.height && a.width == b.width;
}

ImageBatch to_batch(const std::vector<Image>& images) {
  if (images.empty()) return {};
  const auto rows = images.front().rgb.size();
  ImageBatch batch(rows, static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].rgb.size() != rows) throw DimensionError("to_batch: mixed image sizes");
    batch.col(static_cast<Eigen::Index>(i)) = images[i].flat();
  }
  return batch;
}

Image from_column(const Eigen::Ref<const Eigen::VectorXf>& column, int height, int width) {
  Image image(height, width);
  if (column.size() != image.rgb.size()) throw DimensionError("from_column: size mismatch");
  image.flat() = column;
  return image;
}

namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Eigen::VectorXf quantize8(const Eigen::Ref<const Eigen::VectorXf>& values) {
  return values.unaryExpr([](float v) { return static_cast<float>(to_byte(v)) / 255.0f; });
}

void save_png(const Image& image, const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.has_alpha() ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  const int channels = image.has_alpha() ? 4 : 3;
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(image.pixels() * channels));
  for (int p = 0; p < image.pixels(); ++p) {
    for (int c = 0; c < 3; ++c) buffer[p * channels + c] = to_byte(image.rgb(p, c));
    if (image.has_alpha()) buffer[p * channels + 3] = to_byte(image.alpha(p));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot write PNG " + path.string() + ": " + msg);
  }
}

Image load_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot read PNG " + path.string() + ": " + msg);
  }
  const bool with_alpha = (png.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  png.format = with_alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  const int channels = with_alpha ? 4 : 3;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  Image image(static_cast<int>(png.height), static_cast<int>(png.width), with_alpha);
  for (int p = 0; p < image.pixels(); ++p) {
    for (int c = 0; c < 3; ++c) image.rgb(p, c) = buffer[p * channels + c] / 255.0f;
    if (with_alpha) image.alpha(p) = buffer[p * channels + 3] / 255.0f;
  }
  return image;
}

}  // namespace rp2

#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

#include "rp2/image.hpp"
#include "rp2/rng.hpp"

namespace rp2 {

// One draw t ~ T. Corner offsets are (dx, dy) pairs for the TL, TR, BR, BL
// corners as fractions of width/height.
struct TransformParams {
  double rotation_deg = 0.0;
  std::array<Eigen::Vector2d, 4> perspective_shift{
      Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(),
      Eigen::Vector2d::Zero()};
  double brightness_delta = 0.0;
  double contrast_factor = 1.0;
  double saturation_factor = 1.0;
  double scale_factor = 1.0;
  std::uint64_t background_noise_seed = 0;

  static TransformParams identity() { return {}; }
};

struct Interval {
  double min = 0.0;
  double max = 0.0;
};

struct TransformRanges {
  Interval rotation_deg{-15.0, 15.0};
  Interval perspective{-0.10, 0.10};
  Interval brightness{-0.15, 0.15};
  Interval contrast{0.7, 1.3};
  Interval saturation{0.7, 1.3};
  Interval scale{0.5, 1.2};
  std::uint64_t rng_seed = 0;

  static TransformRanges defaults() { return {}; }
  // Every interval collapsed onto the given parameters.
  static TransformRanges fixed(const TransformParams& p);
  // Throws ParameterError if any min > max or a factor range is not positive.
  void validate() const;
};

TransformParams sample(const TransformRanges& ranges, Rng& rng);

// Stateful sampler over T seeded from ranges.rng_seed.
class TransformSampler {
 public:
  explicit TransformSampler(TransformRanges ranges, std::uint64_t stream = streams::kTransforms);
  TransformParams next() { return sample(ranges_, rng_); }
  const TransformRanges& ranges() const { return ranges_; }

 private:
  TransformRanges ranges_;
  Rng rng_;
};

// Inverse mapping output pixel -> source pixel for the geometric part
// (perspective, then rotation, then scale, all about the canvas centre).
// Throws ParameterError for a non-convex or degenerate corner quad.
Eigen::Matrix3d inverse_homography(const TransformParams& params, int height, int width);

// t(image) as a differentiable operator. Geometry, alpha and background are
// fixed at construction, so the output is an affine function of the source
// colours followed by a clamp:
//   out = a * clamp(J(sign colour)) + (1 - a) * noise
// where J is the colour jitter (saturation, contrast, brightness) and a the
// bilinearly warped alpha.
class WarpOperator {
 public:
  WarpOperator(const Eigen::VectorXf& source_alpha, int height, int width,
               const TransformParams& params);

  // Source colours (H*W x 3) -> transformed image with warped alpha.
  Image apply(const Eigen::MatrixXf& source_rgb) const;

  // Same as apply() but records the clamp pattern needed by backward().
  Image apply_recording(const Eigen::MatrixXf& source_rgb);

  // Vector-Jacobian product of the last apply_recording() call: maps
  // d(loss)/d(output rgb) to d(loss)/d(source rgb).
  Eigen::MatrixXf backward(const Eigen::MatrixXf& grad_output) const;

  const Eigen::VectorXf& output_alpha() const { return out_alpha_; }

 private:
  struct Tap {
    std::array<int, 4> index;
    std::array<float, 4> weight;  // bilinear weight times source alpha
  };

  Image run(const Eigen::MatrixXf& source_rgb, std::vector<std::uint8_t>* active) const;

  int height_;
  int width_;
  std::vector<Tap> taps_;
  Eigen::VectorXf out_alpha_;
  Eigen::MatrixXf background_;
  Eigen::Matrix3f jitter_;
  float jitter_offset_;
  std::vector<std::uint8_t> active_;  // per output value: jitter not clamped
};

// t(image): sign region warped with bilinear interpolation, colour jitter
// on sign pixels, background filled with seeded uniform noise. Images without
// alpha are treated as fully opaque.
Image apply(const Image& image, const TransformParams& params);

}  // namespace rp2

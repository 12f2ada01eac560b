#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "rp2/errors.hpp"
#include "rp2/image.hpp"
#include "rp2/nn.hpp"
#include "rp2/oracle.hpp"
#include "rp2/transforms.hpp"

namespace rp2 {

// Printable colours, one RGB triplet per row.
struct Palette {
  Eigen::Matrix<double, Eigen::Dynamic, 3> triplets;

  Eigen::Index size() const { return triplets.rows(); }
  // Throws InputError when empty or any component is outside [0,1].
  void validate() const;
};

// 8 hues x 2 saturations x 2 lightness levels (HSL), the shipped fixture.
Palette default_palette();
Palette load_palette(const std::filesystem::path& path);
void save_palette(const Palette& palette, const std::filesystem::path& path);

struct ObjectiveWeights {
  double lambda_tv = 0.0;
  double lambda_nps = 0.0;

  bool unlimited() const { return lambda_tv == 0.0 && lambda_nps == 0.0; }
  void validate() const;
};

// -log(max(p, 1e-12)).
double nll(const Eigen::Ref<const Eigen::VectorXf>& probs, int target);

// Anisotropic total variation of a planar tensor (H*W rows, one column per
// channel): sum of |a[r+1,c]-a[r,c]| + |a[r,c+1]-a[r,c]|, accumulated in double.
template <typename Derived>
double tv(const Eigen::MatrixBase<Derived>& planes, int height, int width) {
  if (planes.rows() != Eigen::Index(height) * width)
    throw DimensionError("tv: plane size does not match height*width");
  double total = 0.0;
  for (Eigen::Index c = 0; c < planes.cols(); ++c) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double v = planes(y * width + x, c);
        if (y + 1 < height) total += std::abs(double(planes((y + 1) * width + x, c)) - v);
        if (x + 1 < width) total += std::abs(double(planes(y * width + x + 1, c)) - v);
      }
    }
  }
  return total;
}

// Subgradient of tv(); sign(0) is taken as 0.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> tv_gradient(
    const Eigen::MatrixBase<Derived>& planes, int height, int width) {
  using Scalar = typename Derived::Scalar;
  if (planes.rows() != Eigen::Index(height) * width)
    throw DimensionError("tv_gradient: plane size does not match height*width");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> g =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(planes.rows(), planes.cols());
  auto sgn = [](Scalar d) { return Scalar((d > 0) - (d < 0)); };
  for (Eigen::Index c = 0; c < planes.cols(); ++c) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const int i = y * width + x;
        if (y + 1 < height) {
          const Scalar s = sgn(planes(i + width, c) - planes(i, c));
          g(i + width, c) += s;
          g(i, c) -= s;
        }
        if (x + 1 < width) {
          const Scalar s = sgn(planes(i + 1, c) - planes(i, c));
          g(i + 1, c) += s;
          g(i, c) -= s;
        }
      }
    }
  }
  return g;
}

// Non-printability score: sum over region pixels of prod_j ||p - palette_j||.
// `colors` is N x 3 (one pixel per row); `region` selects rows (nonzero = in),
// empty means all rows.
double nps(const Eigen::Ref<const Eigen::MatrixXf>& colors, const Palette& palette,
           const Eigen::Ref<const Eigen::VectorXf>& region = Eigen::VectorXf());

// d nps / d colors. Rows outside the region, and pixels sitting exactly on a
// palette colour, get zero.
Eigen::MatrixXf nps_gradient(const Eigen::Ref<const Eigen::MatrixXf>& colors,
                             const Palette& palette,
                             const Eigen::Ref<const Eigen::VectorXf>& region = Eigen::VectorXf());

struct SubstituteLossConfig {
  int h = 50;
  double beta = 0.3;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Uniform noise zeta_1..zeta_h in [-1,1]^dim, one column per sample.
Eigen::MatrixXf draw_substitute_noise(Eigen::Index dim, int h, Rng& rng);

// For each column image x_b: 1 - (1/h) sum_i [oracle(clamp(x_b + beta*zeta_i)) == label].
// Issues exactly cols(images) * h oracle queries, in chunks of at most
// `max_batch` images.
Eigen::VectorXd substitute_loss_batch(const ImageBatch& images, int label, LabelOracle& oracle,
                                      const Eigen::MatrixXf& zeta, double beta,
                                      Eigen::Index max_batch = 2048);

// Single image with zeta drawn from config.rng_seed.
double substitute_loss(const Image& image, int label, LabelOracle& oracle,
                       const SubstituteLossConfig& config);

// clamp(x + M*delta, 0, 1); alpha of x is kept.
Image compose(const Image& x, const Eigen::MatrixXf& delta, const Eigen::VectorXf& mask);

struct ObjectiveTerms {
  double adversarial = 0.0;
  double tv = 0.0;
  double nps = 0.0;
  double total = 0.0;
};

// L(f(t(clamp(x + M delta))), y*) + l_tv TV(M delta) + l_nps NPS(M (x + delta)).
// The NPS region is the mask and uses the clamped composite colours.
ObjectiveTerms rp2_objective(const Image& x, const Eigen::MatrixXf& delta,
                             const Eigen::VectorXf& mask, int target, ProbabilityOracle& oracle,
                             const ObjectiveWeights& weights, const TransformParams& transform,
                             const Palette& palette);

// Gradient of the two regulariser terms with respect to delta (masked).
Eigen::MatrixXf regularizer_gradient(const Image& x, const Eigen::MatrixXf& delta,
                                     const Eigen::VectorXf& mask, const ObjectiveWeights& weights,
                                     const Palette& palette, ObjectiveTerms* terms = nullptr);

}  // namespace rp2

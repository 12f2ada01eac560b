#include "rp2/losses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace rp2 {

void Palette::validate() const {
  if (triplets.rows() == 0) throw InputError("palette is empty");
  if ((triplets.array() < 0.0).any() || (triplets.array() > 1.0).any())
    throw InputError("palette component outside [0,1]");
}

namespace {

double hue_to_rgb(double p, double q, double t) {
  if (t < 0) t += 1;
  if (t > 1) t -= 1;
  if (t < 1.0 / 6) return p + (q - p) * 6 * t;
  if (t < 0.5) return q;
  if (t < 2.0 / 3) return p + (q - p) * (2.0 / 3 - t) * 6;
  return p;
}

}  // namespace

Palette default_palette() {
  Palette out;
  out.triplets.resize(32, 3);
  int row = 0;
  for (int hue = 0; hue < 8; ++hue) {
    for (double s : {0.45, 0.9}) {
      for (double l : {0.3, 0.65}) {
        const double h = hue / 8.0;
        const double q = l < 0.5 ? l * (1 + s) : l + s - l * s;
        const double p = 2 * l - q;
        out.triplets.row(row++) << hue_to_rgb(p, q, h + 1.0 / 3), hue_to_rgb(p, q, h),
            hue_to_rgb(p, q, h - 1.0 / 3);
      }
    }
  }
  return out;
}

Palette load_palette(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open palette file " + path.string());
  std::vector<Eigen::Vector3d> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Eigen::Vector3d v;
    std::string extra;
    if (!(ss >> v[0] >> v[1] >> v[2]) || (ss >> extra))
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 'r g b'");
    rows.push_back(v);
  }
  Palette out;
  out.triplets.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.triplets.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  try {
    out.validate();
  } catch (const InputError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return out;
}

void save_palette(const Palette& palette, const std::filesystem::path& path) {
  palette.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write palette file " + path.string());
  out << "# r g b, one printable colour per line\n" << std::fixed << std::setprecision(6);
  for (Eigen::Index i = 0; i < palette.size(); ++i)
    out << palette.triplets(i, 0) << ' ' << palette.triplets(i, 1) << ' '
        << palette.triplets(i, 2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void ObjectiveWeights::validate() const {
  if (!(lambda_tv >= 0.0) || !(lambda_nps >= 0.0))
    throw ParameterError("objective weights must be non-negative");
}

double nll(const Eigen::Ref<const Eigen::VectorXf>& probs, int target) {
  if (target < 0 || target >= probs.size())
    throw InputError("nll: target " + std::to_string(target) + " out of range");
  return -std::log(std::max(static_cast<double>(probs[target]), kProbabilityFloor));
}

namespace {

void check_region(Eigen::Index rows, const Eigen::Ref<const Eigen::VectorXf>& region) {
  if (region.size() != 0 && region.size() != rows)
    throw DimensionError("nps: region size does not match pixel count");
}

}  // namespace

double nps(const Eigen::Ref<const Eigen::MatrixXf>& colors, const Palette& palette,
           const Eigen::Ref<const Eigen::VectorXf>& region) {
  palette.validate();
  if (colors.cols() != 3) throw DimensionError("nps: colours must be N x 3");
  check_region(colors.rows(), region);
  double total = 0.0;
  for (Eigen::Index i = 0; i < colors.rows(); ++i) {
    if (region.size() && region[i] == 0.0f) continue;
    const Eigen::RowVector3d p = colors.row(i).cast<double>();
    total += (palette.triplets.rowwise() - p).rowwise().norm().prod();
  }
  return total;
}

Eigen::MatrixXf nps_gradient(const Eigen::Ref<const Eigen::MatrixXf>& colors,
                             const Palette& palette,
                             const Eigen::Ref<const Eigen::VectorXf>& region) {
  palette.validate();
  if (colors.cols() != 3) throw DimensionError("nps_gradient: colours must be N x 3");
  check_region(colors.rows(), region);
  Eigen::MatrixXf grad = Eigen::MatrixXf::Zero(colors.rows(), 3);
  for (Eigen::Index i = 0; i < colors.rows(); ++i) {
    if (region.size() && region[i] == 0.0f) continue;
    const Eigen::RowVector3d p = colors.row(i).cast<double>();
    const Eigen::Matrix<double, Eigen::Dynamic, 3> diff = (-palette.triplets).rowwise() + p;
    const Eigen::VectorXd d = diff.rowwise().norm();
    if ((d.array() == 0.0).any()) continue;
    // d/dp prod_j d_j = prod * sum_j (p - c_j) / d_j^2
    const double prod = d.prod();
    const Eigen::RowVector3d g = prod * (diff.array().colwise() / d.array().square()).colwise().sum();
    grad.row(i) = g.cast<float>();
  }
  return grad;
}

void SubstituteLossConfig::validate() const {
  if (h < 1) throw ParameterError("substitute loss: h must be >= 1");
  if (!(beta >= 0.0)) throw ParameterError("substitute loss: beta must be >= 0");
}

Eigen::MatrixXf draw_substitute_noise(Eigen::Index dim, int h, Rng& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Eigen::MatrixXf zeta(dim, h);
  for (Eigen::Index i = 0; i < zeta.size(); ++i) zeta.data()[i] = u(rng);
  return zeta;
}

Eigen::VectorXd substitute_loss_batch(const ImageBatch& images, int label, LabelOracle& oracle,
                                      const Eigen::MatrixXf& zeta, double beta,
                                      Eigen::Index max_batch) {
  if (zeta.rows() != images.rows())
    throw DimensionError("substitute loss: noise dimension does not match images");
  if (label < 0 || label >= oracle.num_classes())
    throw InputError("substitute loss: label out of range");
  const Eigen::Index h = zeta.cols();
  if (h < 1) throw ParameterError("substitute loss: h must be >= 1");
  const Eigen::Index n = images.cols();
  const Eigen::Index per_chunk = std::max<Eigen::Index>(1, max_batch / h);
  const auto b = static_cast<float>(beta);
  Eigen::VectorXd out(n);
  ImageBatch noisy;
  for (Eigen::Index start = 0; start < n; start += per_chunk) {
    const Eigen::Index count = std::min(per_chunk, n - start);
    noisy.resize(images.rows(), count * h);
    for (Eigen::Index k = 0; k < count; ++k)
      noisy.middleCols(k * h, h) =
          ((b * zeta).colwise() + images.col(start + k)).cwiseMax(0.0f).cwiseMin(1.0f);
    const auto labels = oracle.labels(noisy);
    if (static_cast<Eigen::Index>(labels.size()) != count * h)
      throw OracleError("oracle returned a wrong number of labels");
    for (Eigen::Index k = 0; k < count; ++k) {
      Eigen::Index hits = 0;
      for (Eigen::Index i = 0; i < h; ++i) hits += labels[static_cast<std::size_t>(k * h + i)] == label;
      out[start + k] = 1.0 - static_cast<double>(hits) / static_cast<double>(h);
    }
  }
  return out;
}

double substitute_loss(const Image& image, int label, LabelOracle& oracle,
                       const SubstituteLossConfig& config) {
  config.validate();
  Rng rng = make_rng(config.rng_seed, streams::kSubstitute);
  const Eigen::MatrixXf zeta = draw_substitute_noise(image.rgb.size(), config.h, rng);
  const ImageBatch column = image.flat();
  return substitute_loss_batch(column, label, oracle, zeta, config.beta)[0];
}

Image compose(const Image& x, const Eigen::MatrixXf& delta, const Eigen::VectorXf& mask) {
  if (delta.rows() != x.rgb.rows() || delta.cols() != 3 || mask.size() != x.rgb.rows())
    throw DimensionError("compose: delta/mask shape does not match the image");
  Image out = x;
  out.rgb = (x.rgb + (delta.array().colwise() * mask.array()).matrix()).cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

Eigen::MatrixXf regularizer_gradient(const Image& x, const Eigen::MatrixXf& delta,
                                     const Eigen::VectorXf& mask, const ObjectiveWeights& weights,
                                     const Palette& palette, ObjectiveTerms* terms) {
  weights.validate();
  const Eigen::MatrixXf masked = delta.array().colwise() * mask.array();
  Eigen::MatrixXf grad = Eigen::MatrixXf::Zero(delta.rows(), 3);
  const double tv_value = tv(masked, x.height, x.width);
  if (weights.lambda_tv > 0.0)
    grad += static_cast<float>(weights.lambda_tv) * tv_gradient(masked, x.height, x.width);
  const Eigen::MatrixXf raw = x.rgb + delta;
  const Eigen::MatrixXf colors = raw.cwiseMax(0.0f).cwiseMin(1.0f);
  const double nps_value = nps(colors, palette, mask);
  if (weights.lambda_nps > 0.0) {
    const Eigen::MatrixXf inside = (raw.array() >= 0.0f && raw.array() <= 1.0f).cast<float>();
    grad += static_cast<float>(weights.lambda_nps) *
            nps_gradient(colors, palette, mask).cwiseProduct(inside);
  }
  grad = grad.array().colwise() * mask.array();
  if (terms) {
    terms->tv = tv_value;
    terms->nps = nps_value;
  }
  return grad;
}

ObjectiveTerms rp2_objective(const Image& x, const Eigen::MatrixXf& delta,
                             const Eigen::VectorXf& mask, int target, ProbabilityOracle& oracle,
                             const ObjectiveWeights& weights, const TransformParams& transform,
                             const Palette& palette) {
  weights.validate();
  const Image shown = apply(compose(x, delta, mask), transform);
  const ImageBatch column = shown.flat();
  ObjectiveTerms terms;
  terms.adversarial = nll(oracle.probabilities(column).col(0), target);
  const Eigen::MatrixXf masked = delta.array().colwise() * mask.array();
  terms.tv = tv(masked, x.height, x.width);
  const Eigen::MatrixXf colors = (x.rgb + delta).cwiseMax(0.0f).cwiseMin(1.0f);
  terms.nps = nps(colors, palette, mask);
  terms.total = terms.adversarial + weights.lambda_tv * terms.tv + weights.lambda_nps * terms.nps;
  return terms;
}

}  // namespace rp2

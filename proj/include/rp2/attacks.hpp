#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rp2/image.hpp"
#include "rp2/losses.hpp"
#include "rp2/nn.hpp"
#include "rp2/oracle.hpp"
#include "rp2/transforms.hpp"

namespace rp2 {

// delta in [-1,1] (H*W x 3), zero wherever the binary mask (H*W) is zero.
struct Perturbation {
  int height = 0;
  int width = 0;
  Eigen::MatrixXf delta;
  Eigen::VectorXf mask;
  std::string base_image_id;

  static Perturbation zeros(const Image& x, const Eigen::VectorXf& mask, std::string id = {});
  // Clamps delta to [-1,1] and zeroes it outside the mask.
  void enforce();
  // Throws InputError if the invariants do not hold.
  void validate() const;
  // clamp(x + M delta) with the alpha of x.
  Image composite(const Image& x) const { return compose(x, delta, mask); }
};

// Binary sign-region mask: alpha >= 0.5, or everything without alpha.
Eigen::VectorXf sign_mask(const Image& x);

struct AttackConfig {
  int target_class = 4;
  int true_class = 0;
  int iterations = 500;
  double learning_rate = 0.05;
  ObjectiveWeights weights;
  TransformRanges transform_ranges = TransformRanges::defaults();
  std::uint64_t rng_seed = 0;
  AccessLevel access_level = AccessLevel::White;
  int eot_batch = 1;  // transforms averaged per iteration

  void validate() const;
};

struct SpsaConfig {
  int s = 2000;
  double alpha = 0.01;
  int probe_chunk = 64;  // probe pairs evaluated per oracle batch

  void validate() const;
};

// Substitute loss plus the noise-strength schedule used by the hard attack:
// beta is halved (down to beta_floor) whenever the mean probe loss drops
// below halve_below, and doubled (up to beta_max) while every probe returns
// loss 1, i.e. while the target class never appears.
struct HardLossConfig {
  SubstituteLossConfig sub;
  double beta_floor = 0.05;
  double beta_max = 0.3;
  double halve_below = 0.5;

  void validate() const;
};

struct TraceRow {
  int iteration = 0;
  double adversarial = 0.0;
  double tv = 0.0;
  double nps = 0.0;
  std::int64_t queries = 0;  // cumulative oracle queries
  double beta = 0.0;         // hard attack only
};

struct AttackResult {
  Perturbation perturbation;
  std::vector<TraceRow> trace;
  std::int64_t queries = 0;
  bool completed = true;
  std::string error;
};

using TraceCallback = std::function<void(const TraceRow&)>;

// Mask override (empty = sign_mask(x)) and progress reporting.
struct AttackHooks {
  Eigen::VectorXf mask;
  TraceCallback on_iteration;
};

// Batched black-box loss: one candidate per column, one loss per column.
using BatchLossFn = std::function<Eigen::VectorXd(const Eigen::MatrixXf&)>;

struct SpsaEstimate {
  Eigen::VectorXf gradient;
  double mean_loss = 0.0;  // mean over the 2s probe evaluations
  std::int64_t evaluations = 0;
};

// Two-sided SPSA with Rademacher directions:
//   g = 1/(2 s alpha) sum_i [L(x + alpha xi_i) - L(x - alpha xi_i)] xi_i
// Each xi_i is generated from its own slot seed, so the estimate does not
// depend on how probes are batched.
SpsaEstimate spsa_gradient_batched(const BatchLossFn& loss, const Eigen::VectorXf& x,
                                   const SpsaConfig& config, Rng& rng);

Eigen::VectorXf spsa_gradient(const std::function<double(const Eigen::VectorXf&)>& loss,
                              const Eigen::VectorXf& x, const SpsaConfig& config, Rng& rng);

// Rademacher direction for one SPSA slot.
Eigen::VectorXf rademacher(Eigen::Index dim, std::uint64_t slot_seed);

AttackResult whitebox_attack(const Model<float>& model, const Image& x, const AttackConfig& config,
                             const Palette& palette, const AttackHooks& hooks = {});

// Adversarial gradient by SPSA on NLL(oracle(t(.)), y*); 2s queries per iteration.
AttackResult soft_spsa_attack(ProbabilityOracle& oracle, const Image& x, const AttackConfig& config,
                              const SpsaConfig& spsa, const Palette& palette,
                              const AttackHooks& hooks = {});

// Adversarial gradient by SPSA on the substitute loss toward y*; 2sh queries
// per iteration.
AttackResult hard_spsa_attack(LabelOracle& oracle, const Image& x, const AttackConfig& config,
                              const SpsaConfig& spsa, const HardLossConfig& hard,
                              const Palette& palette, const AttackHooks& hooks = {});

// Pixels whose max-channel |delta| is >= threshold * global max, restricted
// to 8-connected components of at least min_area pixels.
Eigen::VectorXf derive_mask(const Perturbation& perturbation, double threshold, int min_area = 1);

// Perturbation restricted to a new mask.
Perturbation apply_mask(const Perturbation& perturbation, const Eigen::VectorXf& mask);

inline constexpr const char* kTraceFormat = "#format=rp2-trace/1";

// Writes trace.csv, perturbation.png ((delta+1)/2), composite.png and mask.png.
void write_attack_artifacts(const std::filesystem::path& dir, const Image& x,
                            const AttackResult& result);

// Loads perturbation.png and mask.png back (delta is 8-bit quantised).
Perturbation load_perturbation(const std::filesystem::path& dir);

}  // namespace rp2

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rp2/attacks.hpp"
#include "rp2/dataset.hpp"
#include "rp2/nn.hpp"
#include "rp2/oracle.hpp"
#include "rp2/train.hpp"

namespace rp2 {

enum class SeedSource { ID, OOD };

std::string to_string(SeedSource source);
SeedSource parse_seed_source(const std::string& name);

struct StealConfig {
  ArchVariant surrogate_arch = ArchVariant::Same;
  SeedSource seed_source = SeedSource::ID;
  int seed_size = 120;          // ID: 10 images per class
  int global_iterations = 5;
  double pgdm_epsilon = 0.1;
  int pgdm_steps = 10;
  TrainConfig train_config;
  bool extra_class = true;      // placeholder output the black-box never emits
  bool warm_start = true;
  int probe_size = 500;         // per probe set (clean and transformed)
  std::uint64_t rng_seed = 0;

  // num_classes: classes of the black-box.
  void validate(int num_classes) const;
};

// Unlabelled seed images: ID draws fresh signs, OOD draws textures.
std::vector<Image> make_seed_images(const StealConfig& config);

// Held-out agreement probe: fresh synthetic signs and canonical signs under
// the default transformation distribution. Labels are ground truth.
struct ProbeSet {
  ImageBatch clean;
  std::vector<int> clean_labels;
  ImageBatch transformed;
  std::vector<int> transformed_labels;
};

ProbeSet make_probe_set(int size, std::uint64_t seed);

struct StealIteration {
  int iteration = 0;              // 1-based
  std::int64_t dataset_size = 0;  // images labelled in this iteration
  double agreement_clean = 0.0;
  double agreement_transformed = 0.0;
  double accuracy_clean = 0.0;
  double accuracy_transformed = 0.0;
  std::int64_t queries = 0;       // cumulative labelling queries
};

struct StolenSurrogate {
  Model<float> model;
  StealConfig config;
  std::int64_t queries = 0;        // labelling queries of the stealing loop
  std::int64_t probe_queries = 0;  // black-box labels of the probe sets
  double agreement = 0.0;          // over both probe sets
  std::vector<StealIteration> history;
  bool completed = true;
  std::string error;

  const StealIteration& last() const { return history.back(); }
};

// K steps of x <- clamp(x - (eps/K) sign(grad_x NLL(surrogate(x), y*))).
Image pgdm_step(const Model<float>& surrogate, const Image& x, int y_star, double epsilon, int steps);

struct StealHooks {
  std::filesystem::path run_dir;  // empty: no artifacts
  std::function<void(const StealIteration&)> on_iteration;
};

// Label, train, augment by PGDM toward random other classes; the labelled
// set doubles after every iteration but the last. Iteration i labels
// seed_size * 2^(i-1) images.
StolenSurrogate steal(LabelOracle& blackbox, const std::vector<Image>& seed_images,
                      const StealConfig& config, const StealHooks& hooks = {});

// White-box attack against the surrogate. The caller evaluates the
// perturbation against the black-box.
AttackResult transfer_attack(const StolenSurrogate& surrogate, const Image& x, const AttackConfig& config,
                             const Palette& palette, const AttackHooks& hooks = {});

inline constexpr const char* kAgreementFormat = "#format=rp2-agreement/1";

}  // namespace rp2

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>

#include "rp2/adam.hpp"
#include "rp2/dataset.hpp"
#include "rp2/nn.hpp"

namespace rp2 {

struct TrainConfig {
  double learning_rate = 2e-3;
  int batch_size = 64;
  int epochs = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t rng_seed = 0;

  void validate() const;
  AdamHyper adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
};

// Called after every epoch with (epoch, mean training loss).
using EpochCallback = std::function<void(int, double)>;

// Mini-batch Adam on the mean NLL. Continues from the given parameters
// (warm start); batch order is drawn from config.rng_seed only.
Model<float> train(Model<float> model, const ImageBatch& images, std::span<const int> labels,
                   const TrainConfig& config, const EpochCallback& on_epoch = {});
Model<float> train(Model<float> model, const LabeledDataset& dataset, const TrainConfig& config,
                   const EpochCallback& on_epoch = {});

double accuracy(const Model<float>& model, const ImageBatch& images, std::span<const int> labels);

// Versioned binary checkpoint: "RP2MODEL" magic, format version, seed,
// architecture descriptor, then float32 tensors.
void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace rp2

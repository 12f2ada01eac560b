#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "rp2/image.hpp"
#include "rp2/nn.hpp"

namespace rp2 {

enum class AccessLevel { White, Soft, Hard };

std::string to_string(AccessLevel level);
AccessLevel parse_access_level(const std::string& name);

// Top-1 access: the hard black-box case. Inputs are columns in [0,1].
class LabelOracle {
 public:
  virtual ~LabelOracle() = default;
  virtual std::vector<int> labels(const ImageBatch& batch) = 0;
  virtual int num_classes() const = 0;
};

// Full probability vector: the soft black-box case.
class ProbabilityOracle : public LabelOracle {
 public:
  // num_classes x B, columns sum to 1.
  virtual Eigen::MatrixXf probabilities(const ImageBatch& batch) = 0;
  std::vector<int> labels(const ImageBatch& batch) override;
};

// In-process soft oracle around a model. Gradients are never exposed.
class ModelOracle final : public ProbabilityOracle {
 public:
  explicit ModelOracle(const Model<float>& model) : model_(model) {}
  Eigen::MatrixXf probabilities(const ImageBatch& batch) override;
  std::vector<int> labels(const ImageBatch& batch) override;
  int num_classes() const override { return model_.num_classes(); }

 private:
  const Model<float>& model_;
};

// In-process hard oracle: labels only.
class HardModelOracle final : public LabelOracle {
 public:
  explicit HardModelOracle(const Model<float>& model) : model_(model) {}
  std::vector<int> labels(const ImageBatch& batch) override;
  int num_classes() const override { return model_.num_classes(); }

 private:
  const Model<float>& model_;
};

// Counts every image submitted (one query per batch column).
class CountingLabelOracle final : public LabelOracle {
 public:
  explicit CountingLabelOracle(LabelOracle& inner) : inner_(inner) {}
  std::vector<int> labels(const ImageBatch& batch) override;
  int num_classes() const override { return inner_.num_classes(); }
  std::int64_t queries() const { return queries_; }

 private:
  LabelOracle& inner_;
  std::int64_t queries_ = 0;
};

class CountingProbabilityOracle final : public ProbabilityOracle {
 public:
  explicit CountingProbabilityOracle(ProbabilityOracle& inner) : inner_(inner) {}
  Eigen::MatrixXf probabilities(const ImageBatch& batch) override;
  std::vector<int> labels(const ImageBatch& batch) override;
  int num_classes() const override { return inner_.num_classes(); }
  std::int64_t queries() const { return queries_; }

 private:
  ProbabilityOracle& inner_;
  std::int64_t queries_ = 0;
};

std::vector<int> argmax_columns(const Eigen::MatrixXf& scores);

}  // namespace rp2

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rp2 {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class LayerKind { Conv3x3, Relu, MaxPool2, Dense };

std::string to_string(LayerKind kind);

// `units` is the output channel count for Conv3x3 and the output width for
// Dense; unused otherwise.
struct LayerSpec {
  LayerKind kind;
  int units = 0;
  bool operator==(const LayerSpec&) const = default;
};

struct Shape3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  int size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

// Sequential classifier descriptor. Convolutions are 3x3, stride 1, zero
// padding 1; pooling is 2x2 max with stride 2. The last layer must be Dense
// with num_classes outputs; softmax is implicit.
struct Architecture {
  Shape3 input{3, 32, 32};
  std::vector<LayerSpec> layers;

  int num_classes() const;
  // Output shape of every layer, validated. Throws DimensionError on an
  // inconsistent stack.
  std::vector<Shape3> shapes() const;
  bool operator==(const Architecture&) const = default;
};

enum class ArchVariant { Same, Smaller, Larger };

ArchVariant parse_arch_variant(const std::string& name);
std::string to_string(ArchVariant variant);

// Default classifier and the surrogate stand-ins: "same" has two conv
// blocks, "smaller" one, "larger" three. All end in a 128-unit hidden layer.
Architecture make_architecture(ArchVariant variant, int num_classes);

// Parameters per layer; param-free layers keep empty tensors.
// Conv weights are Cout x (9*Cin) with column c*9 + ky*3 + kx.
template <typename Scalar>
struct Params {
  std::vector<Mat<Scalar>> weights;
  std::vector<Vec<Scalar>> biases;

  static Params zeros_like(const Params& other);
  Params& operator+=(const Params& other);
  Params& operator*=(Scalar factor);
  std::size_t count() const;
};

template <typename Scalar>
struct Model {
  Architecture arch;
  Params<Scalar> params;
  std::uint64_t seed = 0;

  int num_classes() const { return arch.num_classes(); }

  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out{arch, {}, seed};
    for (const auto& w : params.weights) out.params.weights.push_back(w.template cast<Other>());
    for (const auto& b : params.biases) out.params.biases.push_back(b.template cast<Other>());
    return out;
  }
};

// He-uniform weights (limit sqrt(6/fan_in)), zero biases.
template <typename Scalar>
Model<Scalar> init_model(const Architecture& arch, std::uint64_t seed);

// Batch: one column per input in planar layout (see ImageBatch).
// Returns num_classes x B logits.
template <typename Scalar>
Mat<Scalar> logits(const Model<Scalar>& model, const Mat<Scalar>& batch);

// Softmax probabilities, num_classes x B; each column sums to 1.
template <typename Scalar>
Mat<Scalar> forward(const Model<Scalar>& model, const Mat<Scalar>& batch);

template <typename Scalar>
std::vector<int> predict(const Model<Scalar>& model, const Mat<Scalar>& batch);

// Column-wise softmax with 64-bit normalisation.
template <typename Scalar>
Mat<Scalar> softmax(const Mat<Scalar>& logits);

inline constexpr double kProbabilityFloor = 1e-12;

// Weighted NLL: sum_b scale * -log(max(p_b[target_b], 1e-12)).
struct LossSpec {
  std::vector<int> targets;
  double scale = 1.0;
};

template <typename Scalar>
struct BackwardResult {
  double loss = 0.0;
  Mat<Scalar> input_grad;   // same shape as the batch; empty unless requested
  Params<Scalar> param_grad;  // empty unless requested
};

// Exact backpropagation of the weighted NLL.
template <typename Scalar>
BackwardResult<Scalar> backward(const Model<Scalar>& model, const Mat<Scalar>& batch,
                                const LossSpec& loss, bool want_input_grad,
                                bool want_param_grad);

// d(loss)/d(image) for a single column image.
template <typename Scalar>
Vec<Scalar> input_gradient(const Model<Scalar>& model, const Vec<Scalar>& image,
                           const LossSpec& loss);

}  // namespace rp2

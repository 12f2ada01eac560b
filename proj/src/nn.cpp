#include "rp2/nn.hpp"

#include "rp2/errors.hpp"
#include "rp2/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rp2 {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Dense: return "dense";
  }
  return "unknown";
}

int Architecture::num_classes() const {
  if (layers.empty() || layers.back().kind != LayerKind::Dense) return 0;
  return layers.back().units;
}

std::vector<Shape3> Architecture::shapes() const {
  std::vector<Shape3> out;
  Shape3 s = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
        if (s.height == 1 && s.width == 1 && i > 0 && layers[i - 1].kind == LayerKind::Dense)
          throw DimensionError("conv after dense is not supported");
        if (l.units <= 0) throw DimensionError("conv layer needs positive channel count");
        s.channels = l.units;
        break;
      case LayerKind::Relu: break;
      case LayerKind::MaxPool2:
        if (s.height % 2 != 0 || s.width % 2 != 0)
          throw DimensionError("maxpool2 needs even spatial dims, got " +
                               std::to_string(s.height) + "x" + std::to_string(s.width));
        s.height /= 2;
        s.width /= 2;
        break;
      case LayerKind::Dense:
        if (l.units <= 0) throw DimensionError("dense layer needs positive width");
        s = {l.units, 1, 1};
        break;
    }
    out.push_back(s);
  }
  if (num_classes() <= 0) throw DimensionError("architecture must end in a dense layer");
  return out;
}

ArchVariant parse_arch_variant(const std::string& name) {
  if (name == "same") return ArchVariant::Same;
  if (name == "smaller") return ArchVariant::Smaller;
  if (name == "larger") return ArchVariant::Larger;
  throw InputError("unknown architecture variant '" + name + "' (same|smaller|larger)");
}

std::string to_string(ArchVariant variant) {
  switch (variant) {
    case ArchVariant::Same: return "same";
    case ArchVariant::Smaller: return "smaller";
    case ArchVariant::Larger: return "larger";
  }
  return "same";
}

Architecture make_architecture(ArchVariant variant, int num_classes) {
  std::vector<int> channels;
  switch (variant) {
    case ArchVariant::Same: channels = {6, 12}; break;
    case ArchVariant::Smaller: channels = {6}; break;
    case ArchVariant::Larger: channels = {6, 12, 24}; break;
  }
  Architecture arch;
  for (int c : channels) {
    arch.layers.push_back({LayerKind::Conv3x3, c});
    arch.layers.push_back({LayerKind::Relu});
    arch.layers.push_back({LayerKind::MaxPool2});
  }
  arch.layers.push_back({LayerKind::Dense, 128});
  arch.layers.push_back({LayerKind::Relu});
  arch.layers.push_back({LayerKind::Dense, num_classes});
  arch.shapes();
  return arch;
}

template <typename Scalar>
Params<Scalar> Params<Scalar>::zeros_like(const Params& other) {
  Params out;
  for (const auto& w : other.weights) out.weights.push_back(Mat<Scalar>::Zero(w.rows(), w.cols()));
  for (const auto& b : other.biases) out.biases.push_back(Vec<Scalar>::Zero(b.size()));
  return out;
}

template <typename Scalar>
Params<Scalar>& Params<Scalar>::operator+=(const Params& other) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] += other.weights[i];
    biases[i] += other.biases[i];
  }
  return *this;
}

template <typename Scalar>
Params<Scalar>& Params<Scalar>::operator*=(Scalar factor) {
  for (auto& w : weights) w *= factor;
  for (auto& b : biases) b *= factor;
  return *this;
}

template <typename Scalar>
std::size_t Params<Scalar>::count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
  for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
  return n;
}

template <typename Scalar>
Model<Scalar> init_model(const Architecture& arch, std::uint64_t seed) {
  const auto shapes = arch.shapes();
  Model<Scalar> model{arch, {}, seed};
  Rng rng = make_rng(seed, streams::kInit);
  Shape3 in = arch.input;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    int rows = 0;
    int fan_in = 0;
    if (l.kind == LayerKind::Conv3x3) {
      rows = l.units;
      fan_in = 9 * in.channels;
    } else if (l.kind == LayerKind::Dense) {
      rows = l.units;
      fan_in = in.size();
    }
    Mat<Scalar> w(rows, fan_in);
    const double limit = fan_in > 0 ? std::sqrt(6.0 / fan_in) : 0.0;
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<Scalar>(dist(rng));
    model.params.weights.push_back(std::move(w));
    model.params.biases.push_back(Vec<Scalar>::Zero(rows));
    in = shapes[i];
  }
  return model;
}

namespace {

// Direct 3x3 convolution on planar tensors. Inputs are copied into a zero
// bordered scratch plane of (H+2) x (W+2) so the inner loops run branch-free
// along x.
template <typename Scalar>
void pad_planes(const Scalar* in, const Shape3& s, std::vector<Scalar>& padded) {
  const int Hp = s.height + 2, Wp = s.width + 2;
  padded.assign(static_cast<std::size_t>(s.channels * Hp * Wp), Scalar(0));
  for (int c = 0; c < s.channels; ++c)
    for (int y = 0; y < s.height; ++y)
      std::copy_n(in + (c * s.height + y) * s.width, s.width,
                  padded.data() + (c * Hp + y + 1) * Wp + 1);
}

// kW > 0 fixes the row width at compile time so the x loop fully unrolls;
// kW == 0 is the generic path.
template <typename Scalar, int kW>
void conv_forward_rows(const std::vector<Scalar>& padded, const Shape3& s, const Mat<Scalar>& w,
                       const Vec<Scalar>& bias, Scalar* __restrict out) {
  const int H = s.height, W = kW > 0 ? kW : s.width, Hp = H + 2, Wp = W + 2;
  const int Cout = static_cast<int>(w.rows());
  for (int co = 0; co < Cout; ++co) {
    Scalar* __restrict plane = out + co * H * W;
    std::fill(plane, plane + H * W, bias(co));
    for (int ci = 0; ci < s.channels; ++ci) {
      for (int ky = 0; ky < 3; ++ky) {
        const Scalar w0 = w(co, ci * 9 + ky * 3);
        const Scalar w1 = w(co, ci * 9 + ky * 3 + 1);
        const Scalar w2 = w(co, ci * 9 + ky * 3 + 2);
        for (int y = 0; y < H; ++y) {
          const Scalar* __restrict r = padded.data() + (ci * Hp + y + ky) * Wp;
          Scalar* __restrict o = plane + y * W;
          for (int x = 0; x < W; ++x) o[x] += w0 * r[x] + w1 * r[x + 1] + w2 * r[x + 2];
        }
      }
    }
  }
}

template <typename Scalar>
void conv_forward(const std::vector<Scalar>& padded, const Shape3& s, const Mat<Scalar>& w,
                  const Vec<Scalar>& bias, Scalar* out) {
  switch (s.width) {
    case 32: return conv_forward_rows<Scalar, 32>(padded, s, w, bias, out);
    case 16: return conv_forward_rows<Scalar, 16>(padded, s, w, bias, out);
    case 8: return conv_forward_rows<Scalar, 8>(padded, s, w, bias, out);
    default: return conv_forward_rows<Scalar, 0>(padded, s, w, bias, out);
  }
}

// Accumulates the weight/bias gradient and (optionally) writes the input
// gradient for one sample.
template <typename Scalar>
void conv_backward(const std::vector<Scalar>& padded, const Shape3& s, const Mat<Scalar>& w,
                   const Scalar* __restrict g_out, Mat<Scalar>* g_w, Vec<Scalar>* g_b,
                   Scalar* __restrict g_in, std::vector<Scalar>& g_pad) {
  const int H = s.height, W = s.width, Hp = H + 2, Wp = W + 2;
  const int Cout = static_cast<int>(w.rows());
  if (g_in) g_pad.assign(static_cast<std::size_t>(s.channels * Hp * Wp), Scalar(0));
  for (int co = 0; co < Cout; ++co) {
    const Scalar* __restrict g = g_out + co * H * W;
    if (g_b) {
      Scalar acc = 0;
      for (int i = 0; i < H * W; ++i) acc += g[i];
      (*g_b)(co) += acc;
    }
    for (int ci = 0; ci < s.channels; ++ci) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int col = ci * 9 + ky * 3 + kx;
          if (g_w) {
            Scalar acc = 0;
            for (int y = 0; y < H; ++y) {
              const Scalar* __restrict r = padded.data() + (ci * Hp + y + ky) * Wp + kx;
              const Scalar* __restrict gr = g + y * W;
              for (int x = 0; x < W; ++x) acc += gr[x] * r[x];
            }
            (*g_w)(co, col) += acc;
          }
          if (g_in) {
            const Scalar wk = w(co, col);
            for (int y = 0; y < H; ++y) {
              Scalar* __restrict d = g_pad.data() + (ci * Hp + y + ky) * Wp + kx;
              const Scalar* __restrict gr = g + y * W;
              for (int x = 0; x < W; ++x) d[x] += wk * gr[x];
            }
          }
        }
      }
    }
  }
  if (g_in) {
    for (int c = 0; c < s.channels; ++c)
      for (int y = 0; y < H; ++y)
        std::copy_n(g_pad.data() + (c * Hp + y + 1) * Wp + 1, W, g_in + (c * H + y) * W);
  }
}

// Per-layer state kept for the backward pass.
template <typename Scalar>
struct Trace {
  std::vector<Mat<Scalar>> inputs;      // input of layer i
  std::vector<std::vector<int>> argmax; // maxpool winners (index into input column)
  Mat<Scalar> output;
};

template <typename Scalar>
void check_finite(const Mat<Scalar>& m, std::size_t layer, LayerKind kind) {
  // x*0 is 0 for finite x and NaN otherwise; the sum vectorises, allFinite does not.
  if (!((m.array() * Scalar(0)).sum() == Scalar(0))) {
    std::ostringstream os;
    os << "non-finite activation after layer " << layer << " (" << to_string(kind) << ")";
    throw NumericError(os.str());
  }
}

template <typename Scalar>
void check_batch(const Model<Scalar>& model, const Mat<Scalar>& batch) {
  const int expected = model.arch.input.size();
  if (batch.rows() != expected) {
    std::ostringstream os;
    os << "input rows mismatch: expected " << expected << " (" << model.arch.input.height << "x"
       << model.arch.input.width << "x" << model.arch.input.channels << "), got " << batch.rows();
    throw DimensionError(os.str());
  }
}

template <typename Scalar>
Mat<Scalar> run(const Model<Scalar>& model, const Mat<Scalar>& batch, Trace<Scalar>* trace) {
  check_batch(model, batch);
  const auto shapes = model.arch.shapes();
  Shape3 in_shape = model.arch.input;
  const Eigen::Index B = batch.cols();
  Mat<Scalar> act = batch;
  if (trace) {
    trace->inputs.assign(model.arch.layers.size(), {});
    trace->argmax.assign(model.arch.layers.size(), {});
  }
  for (std::size_t i = 0; i < model.arch.layers.size(); ++i) {
    const auto& layer = model.arch.layers[i];
    const Shape3 out_shape = shapes[i];
    Mat<Scalar> out;
    switch (layer.kind) {
      case LayerKind::Conv3x3: {
        out.resize(out_shape.size(), B);
        std::vector<Scalar> padded;
        for (Eigen::Index b = 0; b < B; ++b) {
          pad_planes(act.col(b).data(), in_shape, padded);
          conv_forward(padded, in_shape, model.params.weights[i], model.params.biases[i],
                       out.col(b).data());
        }
        break;
      }
      case LayerKind::Relu:
        if (trace) {
          out = act.cwiseMax(Scalar(0));
        } else {
          act = act.cwiseMax(Scalar(0));
          out = std::move(act);
        }
        break;
      case LayerKind::MaxPool2: {
        const int C = in_shape.channels, W = in_shape.width, HW = in_shape.height * W;
        const int Ho = out_shape.height, Wo = out_shape.width;
        out.resize(out_shape.size(), B);
        std::vector<int> winners;
        if (trace) winners.resize(static_cast<std::size_t>(out.size()));
        for (Eigen::Index b = 0; b < B; ++b) {
          const Scalar* src = act.col(b).data();
          Scalar* dst = out.col(b).data();
          for (int c = 0; c < C; ++c) {
            for (int oy = 0; oy < Ho; ++oy) {
              for (int ox = 0; ox < Wo; ++ox) {
                const int base = c * HW + 2 * oy * W + 2 * ox;
                const int candidates[4] = {base, base + 1, base + W, base + W + 1};
                int best = base;
                for (int k = 1; k < 4; ++k)
                  if (src[candidates[k]] > src[best]) best = candidates[k];
                const int o = (c * Ho + oy) * Wo + ox;
                dst[o] = src[best];
                if (trace) winners[static_cast<std::size_t>(b * out.rows() + o)] = best;
              }
            }
          }
        }
        if (trace) trace->argmax[i] = std::move(winners);
        break;
      }
      case LayerKind::Dense:
        // Column by column so a result never depends on its batch neighbours
        // (GEMM blocking would change the summation order).
        out.resize(model.params.weights[i].rows(), B);
        for (Eigen::Index b = 0; b < B; ++b)
          out.col(b).noalias() = model.params.weights[i] * act.col(b);
        out.colwise() += model.params.biases[i];
        break;
    }
    check_finite(out, i, layer.kind);
    if (trace) trace->inputs[i] = std::move(act);
    act = std::move(out);
    in_shape = out_shape;
  }
  return act;
}

constexpr Eigen::Index kChunk = 64;

}  // namespace

template <typename Scalar>
Mat<Scalar> softmax(const Mat<Scalar>& z) {
  Mat<Scalar> p(z.rows(), z.cols());
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    const double m = static_cast<double>(z.col(b).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index k = 0; k < z.rows(); ++k) sum += std::exp(static_cast<double>(z(k, b)) - m);
    for (Eigen::Index k = 0; k < z.rows(); ++k)
      p(k, b) = static_cast<Scalar>(std::exp(static_cast<double>(z(k, b)) - m) / sum);
  }
  return p;
}

template <typename Scalar>
Mat<Scalar> logits(const Model<Scalar>& model, const Mat<Scalar>& batch) {
  check_batch(model, batch);
  if (batch.cols() <= kChunk) return run<Scalar>(model, batch, nullptr);
  Mat<Scalar> out(model.num_classes(), batch.cols());
  for (Eigen::Index start = 0; start < batch.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, batch.cols() - start);
    out.middleCols(start, n) = run<Scalar>(model, Mat<Scalar>(batch.middleCols(start, n)), nullptr);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> forward(const Model<Scalar>& model, const Mat<Scalar>& batch) {
  return softmax<Scalar>(logits(model, batch));
}

template <typename Scalar>
std::vector<int> predict(const Model<Scalar>& model, const Mat<Scalar>& batch) {
  const Mat<Scalar> z = logits(model, batch);
  std::vector<int> labels(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    Eigen::Index k;
    z.col(b).maxCoeff(&k);
    labels[static_cast<std::size_t>(b)] = static_cast<int>(k);
  }
  return labels;
}

template <typename Scalar>
BackwardResult<Scalar> backward(const Model<Scalar>& model, const Mat<Scalar>& batch,
                                const LossSpec& loss, bool want_input_grad,
                                bool want_param_grad) {
  if (static_cast<Eigen::Index>(loss.targets.size()) != batch.cols())
    throw DimensionError("backward: one target per batch column required");
  const int K = model.num_classes();
  for (int t : loss.targets)
    if (t < 0 || t >= K) throw InputError("backward: target class out of range");

  Trace<Scalar> trace;
  const Mat<Scalar> z = run<Scalar>(model, batch, &trace);
  const Eigen::Index B = batch.cols();

  BackwardResult<Scalar> result;
  Mat<Scalar> grad(z.rows(), B);
  const double cap = -std::log(kProbabilityFloor);
  for (Eigen::Index b = 0; b < B; ++b) {
    const int t = loss.targets[static_cast<std::size_t>(b)];
    const double m = static_cast<double>(z.col(b).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) sum += std::exp(static_cast<double>(z(k, b)) - m);
    const double nll = std::log(sum) + m - static_cast<double>(z(t, b));
    if (nll >= cap) {
      // Probability below the floor: loss is constant there.
      result.loss += loss.scale * cap;
      grad.col(b).setZero();
      continue;
    }
    result.loss += loss.scale * nll;
    for (Eigen::Index k = 0; k < K; ++k) {
      const double p = std::exp(static_cast<double>(z(k, b)) - m) / sum;
      grad(k, b) = static_cast<Scalar>(loss.scale * (p - (k == t ? 1.0 : 0.0)));
    }
  }

  if (want_param_grad) result.param_grad = Params<Scalar>::zeros_like(model.params);
  const auto shapes = model.arch.shapes();
  for (std::size_t li = model.arch.layers.size(); li-- > 0;) {
    const auto& layer = model.arch.layers[li];
    const Shape3 in_shape = li == 0 ? model.arch.input : shapes[li - 1];
    const Mat<Scalar>& in = trace.inputs[li];
    const bool need_input = want_input_grad || li > 0;
    Mat<Scalar> g_in;
    switch (layer.kind) {
      case LayerKind::Dense:
        if (want_param_grad) {
          result.param_grad.weights[li].noalias() = grad * in.transpose();
          result.param_grad.biases[li] = grad.rowwise().sum();
        }
        if (need_input) g_in.noalias() = model.params.weights[li].transpose() * grad;
        break;
      case LayerKind::Relu:
        g_in = (in.array() > Scalar(0)).select(grad, Scalar(0));
        break;
      case LayerKind::MaxPool2: {
        g_in = Mat<Scalar>::Zero(in.rows(), B);
        const auto& winners = trace.argmax[li];
        for (Eigen::Index b = 0; b < B; ++b)
          for (Eigen::Index o = 0; o < grad.rows(); ++o)
            g_in(winners[static_cast<std::size_t>(b * grad.rows() + o)], b) += grad(o, b);
        break;
      }
      case LayerKind::Conv3x3: {
        if (need_input) g_in.resize(in.rows(), B);
        std::vector<Scalar> padded, g_pad;
        for (Eigen::Index b = 0; b < B; ++b) {
          pad_planes(in.col(b).data(), in_shape, padded);
          conv_backward(padded, in_shape, model.params.weights[li], grad.col(b).data(),
                        want_param_grad ? &result.param_grad.weights[li] : nullptr,
                        want_param_grad ? &result.param_grad.biases[li] : nullptr,
                        need_input ? g_in.col(b).data() : nullptr, g_pad);
        }
        break;
      }
    }
    if (need_input) grad = std::move(g_in);
  }
  if (want_input_grad) result.input_grad = std::move(grad);
  return result;
}

template <typename Scalar>
Vec<Scalar> input_gradient(const Model<Scalar>& model, const Vec<Scalar>& image,
                           const LossSpec& loss) {
  Mat<Scalar> batch = image;
  return backward(model, batch, loss, true, false).input_grad.col(0);
}

#define RP2_INSTANTIATE(S)                                                                  \
  template struct Params<S>;                                                                \
  template Model<S> init_model<S>(const Architecture&, std::uint64_t);                      \
  template Mat<S> logits<S>(const Model<S>&, const Mat<S>&);                                \
  template Mat<S> forward<S>(const Model<S>&, const Mat<S>&);                               \
  template std::vector<int> predict<S>(const Model<S>&, const Mat<S>&);                     \
  template Mat<S> softmax<S>(const Mat<S>&);                                                \
  template BackwardResult<S> backward<S>(const Model<S>&, const Mat<S>&, const LossSpec&,   \
                                         bool, bool);                                       \
  template Vec<S> input_gradient<S>(const Model<S>&, const Vec<S>&, const LossSpec&);

RP2_INSTANTIATE(float)
RP2_INSTANTIATE(double)

#undef RP2_INSTANTIATE

}  // namespace rp2

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>

#include "rp2/errors.hpp"

namespace rp2 {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment estimates for one parameter tensor.
template <typename Scalar>
struct AdamState {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> v;
  std::int64_t step = 0;
};

// Bias-corrected Adam update in place:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename Derived, typename GradDerived, typename Scalar>
void adam_step(Eigen::MatrixBase<Derived>& params, const Eigen::MatrixBase<GradDerived>& grads,
               AdamState<Scalar>& state, const AdamHyper& h) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols())
    throw DimensionError("adam_step: parameter/gradient shape mismatch");
  if (state.m.size() == 0) {
    state.m.setZero(params.rows(), params.cols());
    state.v.setZero(params.rows(), params.cols());
  } else if (state.m.rows() != params.rows() || state.m.cols() != params.cols()) {
    throw DimensionError("adam_step: optimizer state shape mismatch");
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(h.beta1);
  const auto b2 = static_cast<Scalar>(h.beta2);
  state.m = b1 * state.m + (Scalar(1) - b1) * grads.derived();
  state.v = b2 * state.v + (Scalar(1) - b2) * grads.derived().cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(h.beta1, t));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(h.beta2, t));
  const auto lr = static_cast<Scalar>(h.learning_rate);
  const auto eps = static_cast<Scalar>(h.epsilon);
  params.derived().array() -=
      lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + eps);
}

}  // namespace rp2

#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "anchor/types.hpp"

namespace anchor::kernels {

/// Row-wise normalization to zero mean and unit variance (no affine part).
template <typename Derived>
Matrix<typename Derived::Scalar> layer_norm(const Eigen::MatrixBase<Derived>& x,
                                            typename Derived::Scalar eps = 1e-5) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().mean();
    out.row(r) = centered / std::sqrt(var + eps);
  }
  return out;
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  return x.unaryExpr([c](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::tanh(c * (v + Scalar(0.044715) * v * v * v)));
  });
}

/// Numerically stable softmax of a vector expression.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar top = x.maxCoeff();
  Vector<Scalar> e = (x.array() - top).exp().matrix();
  return e / e.sum();
}

/// log(softmax(x)) computed via log-sum-exp.
template <typename Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar top = x.maxCoeff();
  const Scalar lse = top + std::log((x.array() - top).exp().sum());
  return (x.array() - lse).matrix();
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& x) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i) {
    if (x(i) > x(best)) best = i;
  }
  return best;
}

/// Single-head causal attention. Returns head output rows; when `final_row`
/// is non-null it receives the probability row of the last query.
template <typename DQ, typename DK, typename DV>
Matrix<typename DQ::Scalar> causal_attention(const Eigen::MatrixBase<DQ>& q,
                                             const Eigen::MatrixBase<DK>& k,
                                             const Eigen::MatrixBase<DV>& v,
                                             Vector<typename DQ::Scalar>* final_row = nullptr) {
  using Scalar = typename DQ::Scalar;
  const Eigen::Index n = q.rows();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  Matrix<Scalar> out(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector<Scalar> logits = (k.topRows(i + 1) * q.row(i).transpose()) * scale;
    const Vector<Scalar> probs = softmax(logits);
    out.row(i) = probs.transpose() * v.topRows(i + 1);
    if (final_row && i == n - 1) *final_row = probs;
  }
  return out;
}

}  // namespace anchor::kernels

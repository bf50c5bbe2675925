#pragma once

// Stateless primitives shared by the layers and losses.

#include <cmath>
#include <numbers>

#include "alan/core.hpp"

namespace alan::nn {

/// Row-wise softmax with max subtraction.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& x) {
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Backward of softmax_rows given its output y and upstream dy.
template <typename T>
Mat<T> softmax_rows_backward(const Mat<T>& y, const Mat<T>& dy) {
  Mat<T> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const T dot = y.row(r).dot(dy.row(r));
    dx.row(r) = y.row(r).array() * (dy.row(r).array() - dot);
  }
  return dx;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Mat<T> sigmoid(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return sigmoid(v); });
}

// exact (erf) GELU
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// cos(a, b); throws NumericError when either vector is zero.
template <typename T>
T cosine(const RowVec<T>& a, const RowVec<T>& b) {
  const T na = a.norm();
  const T nb = b.norm();
  if (na == T(0) || nb == T(0)) throw NumericError("cosine similarity of a zero vector is undefined");
  return a.dot(b) / (na * nb);
}

/// Accumulates d cos(a,b) / da * upstream into da (and likewise db).
template <typename T>
void cosine_backward(const RowVec<T>& a, const RowVec<T>& b, T upstream, RowVec<T>& da, RowVec<T>& db) {
  const T na = a.norm();
  const T nb = b.norm();
  const T c = a.dot(b) / (na * nb);
  da += upstream * (b / (na * nb) - c * a / (na * na));
  db += upstream * (a / (na * nb) - c * b / (nb * nb));
}

}  // namespace alan::nn

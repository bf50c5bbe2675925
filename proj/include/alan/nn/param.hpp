#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "alan/core.hpp"

namespace alan::nn {

/// A named trainable tensor and its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  [[nodiscard]] Eigen::Index size() const { return value.size(); }
};

/// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_uniform(Param<T>& p, Rng& rng, Eigen::Index fan_in, Eigen::Index fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
  }
}

template <typename T>
void normal_init(Param<T>& p, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(stddev * rng.normal());
}

/// Non-owning list of parameters, in registration order.
template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename Module>
auto collect_params(Module& m) {
  using Scalar = typename Module::Scalar;
  ParamList<Scalar> out;
  m.for_each_param([&](Param<Scalar>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
double global_grad_norm(const ParamList<T>& params) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

}  // namespace alan::nn

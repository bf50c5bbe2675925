#pragma once

// Weakly supervised clip-level anomaly scorer: three temporal convolutions
// (ReLU, ReLU, sigmoid) trained through top-k multiple-instance pooling and
// binary cross-entropy against the video-level label.

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "alan/core.hpp"
#include "alan/nn/layers.hpp"

namespace alan {

/// 1-D convolution over the time axis with symmetric zero padding, so the
/// output has as many rows as the input. Implemented as im2col + GEMM.
template <typename T>
class TemporalConv1d {
 public:
  using Scalar = T;
  struct Cache {
    Mat<T> columns;  // rows x (kernel * in)
  };

  TemporalConv1d() = default;
  TemporalConv1d(const std::string& name, Eigen::Index in, Eigen::Index out, Eigen::Index kernel)
      : weight(name + ".weight", kernel * in, out), bias(name + ".bias", 1, out), in_(in), kernel_(kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw ValidationError("temporal kernel size must be odd");
  }

  void init(Rng& rng) {
    nn::xavier_uniform(weight, rng, kernel_ * in_, weight.value.cols());
    bias.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x, Cache& c) const {
    require_cols(x, in_, weight.name.c_str());
    const Eigen::Index rows = x.rows();
    const Eigen::Index pad = kernel_ / 2;
    c.columns.setZero(rows, kernel_ * in_);
    for (Eigen::Index t = 0; t < rows; ++t) {
      for (Eigen::Index j = 0; j < kernel_; ++j) {
        const Eigen::Index src = t + j - pad;
        if (src >= 0 && src < rows) c.columns.block(t, j * in_, 1, in_) = x.row(src);
      }
    }
    Mat<T> y = c.columns * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& c) {
    weight.grad.noalias() += c.columns.transpose() * dy;
    bias.grad.row(0) += dy.colwise().sum();
    const Mat<T> dcols = dy * weight.value.transpose();
    const Eigen::Index rows = dy.rows();
    const Eigen::Index pad = kernel_ / 2;
    Mat<T> dx = Mat<T>::Zero(rows, in_);
    for (Eigen::Index t = 0; t < rows; ++t) {
      for (Eigen::Index j = 0; j < kernel_; ++j) {
        const Eigen::Index src = t + j - pad;
        if (src >= 0 && src < rows) dx.row(src) += dcols.block(t, j * in_, 1, in_);
      }
    }
    return dx;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }

  nn::Param<T> weight;
  nn::Param<T> bias;

 private:
  Eigen::Index in_ = 0;
  Eigen::Index kernel_ = 1;
};

struct DetectorConfig {
  std::vector<Eigen::Index> widths{128, 32, 1};
  Eigen::Index kernel = 7;
  double dropout = 0.6;  // after each hidden layer

  void validate() const {
    if (widths.empty() || widths.back() != 1) throw ValidationError("detector: last layer must have width 1");
    for (auto w : widths) {
      if (w < 1) throw ValidationError("detector: layer widths must be positive");
    }
  }
};

template <typename T>
class AnomalyDetector {
 public:
  using Scalar = T;
  struct Cache {
    std::vector<typename TemporalConv1d<T>::Cache> conv;
    std::vector<Mat<T>> pre;  // hidden pre-activations
    std::vector<typename nn::Dropout<T>::Cache> drop;
    Mat<T> scores;  // T x 1
  };

  AnomalyDetector() = default;
  AnomalyDetector(const std::string& name, Eigen::Index in, DetectorConfig cfg = {})
      : cfg_(std::move(cfg)), drop_(cfg_.dropout) {
    cfg_.validate();
    Eigen::Index prev = in;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      layers.emplace_back(name + ".conv" + std::to_string(i + 1), prev, cfg_.widths[i], cfg_.kernel);
      prev = cfg_.widths[i];
    }
  }

  void init(Rng& rng) {
    for (auto& l : layers) l.init(rng);
  }

  [[nodiscard]] const DetectorConfig& config() const { return cfg_; }

  /// Per-clip scores in (0,1), shape T x 1.
  Mat<T> forward(const Mat<T>& features, Cache& c, const nn::Context& ctx) const {
    if (features.rows() < 1) throw ShapeError("detector: empty sequence");
    const std::size_t L = layers.size();
    c.conv.resize(L);
    c.pre.resize(L - 1);
    c.drop.resize(L - 1);
    Mat<T> h = features;
    for (std::size_t i = 0; i + 1 < L; ++i) {
      c.pre[i] = layers[i].forward(h, c.conv[i]);
      h = drop_.forward(Mat<T>(c.pre[i].cwiseMax(T(0))), c.drop[i], ctx);
    }
    c.scores = nn::sigmoid(Mat<T>(layers[L - 1].forward(h, c.conv[L - 1])));
    return c.scores;
  }

  Mat<T> score(const Mat<T>& features) const {
    Cache c;
    return forward(features, c, nn::Context{});
  }

  /// d_scores: T x 1. Returns the gradient w.r.t. the input features.
  Mat<T> backward(const Mat<T>& d_scores, const Cache& c) {
    const std::size_t L = layers.size();
    Mat<T> d = d_scores.cwiseProduct(c.scores).cwiseProduct(
        (Mat<T>::Ones(c.scores.rows(), 1) - c.scores));
    d = layers[L - 1].backward(d, c.conv[L - 1]);
    for (std::size_t i = L - 1; i-- > 0;) {
      d = drop_.backward(d, c.drop[i]);
      d = d.cwiseProduct(Mat<T>((c.pre[i].array() > T(0)).template cast<T>()));
      d = layers[i].backward(d, c.conv[i]);
    }
    return d;
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& l : layers) l.for_each_param(f);
  }

  std::vector<TemporalConv1d<T>> layers;

 private:
  DetectorConfig cfg_;
  nn::Dropout<T> drop_{0.0};
};

/// k = max(1, floor(T / 16)).
inline std::size_t topk_count(std::size_t T) { return std::max<std::size_t>(1, T / 16); }

template <typename T>
struct TopK {
  T value{};
  std::vector<std::size_t> indices;  // positions of the k largest scores
};

/// Mean of the k largest scores. Ties resolve to the earlier position.
template <typename T>
TopK<T> topk_aggregate(std::span<const T> scores) {
  if (scores.empty()) throw ShapeError("topk_aggregate: empty score vector");
  const std::size_t k = topk_count(scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(k);
  T sum{};
  for (auto i : order) sum += scores[i];
  return {sum / static_cast<T>(k), std::move(order)};
}

template <typename T>
TopK<T> topk_aggregate(const Mat<T>& scores) {
  return topk_aggregate(std::span<const T>(scores.data(), static_cast<std::size_t>(scores.size())));
}

inline constexpr double kBceEpsilon = 1e-7;

/// -[y log p + (1-y) log(1-p)] with p clamped to [eps, 1-eps].
template <typename T>
T bce_loss(T prediction, int label) {
  const T eps = static_cast<T>(kBceEpsilon);
  const T p = std::clamp(prediction, eps, T(1) - eps);
  return label == 1 ? -std::log(p) : -std::log(T(1) - p);
}

/// d bce / d prediction; zero where the clamp is active.
template <typename T>
T bce_grad(T prediction, int label) {
  const T eps = static_cast<T>(kBceEpsilon);
  if (prediction < eps || prediction > T(1) - eps) return T(0);
  return label == 1 ? -T(1) / prediction : T(1) / (T(1) - prediction);
}

}  // namespace alan

#pragma once

// Dual cross-modal alignment: CLS-level and AVG-level weighted cosine
// similarities, their convex fusion, and the bi-directional max-margin
// ranking loss over a batch similarity matrix (rows = videos, cols = queries).

#include <vector>

#include "alan/core.hpp"
#include "alan/encoders.hpp"
#include "alan/nn/functional.hpp"
#include "alan/nn/layers.hpp"

namespace alan {

inline constexpr double kDefaultAlpha = 0.5;
inline constexpr double kDefaultMargin = 0.05;

/// Stream weights (w_object, w_motion) = softmax(a_o . x_o + b_o, a_m . x_m + b_m)
/// computed from the query's own object- and motion-matched vectors.
template <typename T>
class StreamWeightHead {
 public:
  using Scalar = T;
  struct Cache {
    typename nn::Linear<T>::Cache object, motion;
    T w_object{}, w_motion{};
  };

  StreamWeightHead() = default;
  StreamWeightHead(const std::string& name, Eigen::Index d)
      : object(name + ".object", d, 1), motion(name + ".motion", d, 1) {}

  void init(Rng& rng) {
    object.init(rng);
    motion.init(rng);
  }

  std::pair<T, T> forward(const RowVec<T>& x_object, const RowVec<T>& x_motion, Cache& c) const {
    const T a = object.forward(Mat<T>(x_object), c.object)(0, 0);
    const T b = motion.forward(Mat<T>(x_motion), c.motion)(0, 0);
    const T m = std::max(a, b);
    const T ea = std::exp(a - m), eb = std::exp(b - m);
    c.w_object = ea / (ea + eb);
    c.w_motion = eb / (ea + eb);
    return {c.w_object, c.w_motion};
  }

  /// Accumulates input gradients into dx_object / dx_motion.
  void backward(T dw_object, T dw_motion, const Cache& c, RowVec<T>& dx_object, RowVec<T>& dx_motion) {
    const T dot = c.w_object * dw_object + c.w_motion * dw_motion;
    const T da = c.w_object * (dw_object - dot);
    const T db = c.w_motion * (dw_motion - dot);
    dx_object += object.backward(Mat<T>::Constant(1, 1, da), c.object);
    dx_motion += motion.backward(Mat<T>::Constant(1, 1, db), c.motion);
  }

  template <typename F>
  void for_each_param(F&& f) {
    object.for_each_param(f);
    motion.for_each_param(f);
  }

  nn::Linear<T> object;
  nn::Linear<T> motion;
};

/// s^g = w_o cos(g^vo, g^qo) + w_m cos(g^vm, g^qm) with weights from the
/// query side. `weights` is (w_o, w_m).
template <typename T>
T weighted_cosine(const RowVec<T>& v_object, const RowVec<T>& q_object, const RowVec<T>& v_motion,
                  const RowVec<T>& q_motion, std::pair<T, T> weights) {
  return weights.first * nn::cosine(v_object, q_object) + weights.second * nn::cosine(v_motion, q_motion);
}

template <typename T>
T fused_similarity(T s_cls, T s_avg, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("fused_similarity: alpha must lie in [0,1]");
  return static_cast<T>(alpha) * s_cls + static_cast<T>(1.0 - alpha) * s_avg;
}

/// Weight heads for both alignment levels (independent per level).
template <typename T>
class Alignment {
 public:
  using Scalar = T;

  struct QueryWeights {
    std::pair<T, T> cls, avg;
  };

  struct Cache {
    std::vector<typename StreamWeightHead<T>::Cache> cls, avg;
    std::vector<QueryWeights> weights;
    const std::vector<DualRepresentation<T>>* videos = nullptr;
    const std::vector<DualRepresentation<T>>* queries = nullptr;
  };

  Alignment() = default;
  Alignment(const std::string& name, Eigen::Index d, double alpha = kDefaultAlpha)
      : cls_head(name + ".cls_weights", d), avg_head(name + ".avg_weights", d), alpha_(alpha) {
    set_alpha(alpha);
  }

  void init(Rng& rng) {
    cls_head.init(rng);
    avg_head.init(rng);
  }

  void set_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
    alpha_ = alpha;
  }
  [[nodiscard]] double alpha() const { return alpha_; }

  QueryWeights weights(const DualRepresentation<T>& q) const {
    typename StreamWeightHead<T>::Cache a, b;
    return {cls_head.forward(q.g_object, q.g_motion, a), avg_head.forward(q.h_object, q.h_motion, b)};
  }

  T cls_similarity(const DualRepresentation<T>& v, const DualRepresentation<T>& q) const {
    return weighted_cosine(v.g_object, q.g_object, v.g_motion, q.g_motion, weights(q).cls);
  }
  T avg_similarity(const DualRepresentation<T>& v, const DualRepresentation<T>& q) const {
    return weighted_cosine(v.h_object, q.h_object, v.h_motion, q.h_motion, weights(q).avg);
  }
  T similarity(const DualRepresentation<T>& v, const DualRepresentation<T>& q) const {
    return fused_similarity(cls_similarity(v, q), avg_similarity(v, q), alpha_);
  }

  /// S(i, j) = s(video_i, query_j). The cache keeps pointers to the inputs,
  /// which must outlive the backward call.
  Mat<T> similarity_matrix(const std::vector<DualRepresentation<T>>& videos,
                           const std::vector<DualRepresentation<T>>& queries, Cache& c) const {
    const auto V = static_cast<Eigen::Index>(videos.size());
    const auto Q = static_cast<Eigen::Index>(queries.size());
    c.videos = &videos;
    c.queries = &queries;
    c.cls.resize(queries.size());
    c.avg.resize(queries.size());
    c.weights.resize(queries.size());
    for (std::size_t j = 0; j < queries.size(); ++j) {
      const auto& q = queries[j];
      c.weights[j] = {cls_head.forward(q.g_object, q.g_motion, c.cls[j]), avg_head.forward(q.h_object, q.h_motion, c.avg[j])};
    }
    const T a = static_cast<T>(alpha_);
    Mat<T> S(V, Q);
    for (Eigen::Index i = 0; i < V; ++i) {
      const auto& v = videos[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < Q; ++j) {
        const auto& q = queries[static_cast<std::size_t>(j)];
        const auto& w = c.weights[static_cast<std::size_t>(j)];
        const T sg = weighted_cosine(v.g_object, q.g_object, v.g_motion, q.g_motion, w.cls);
        const T sh = weighted_cosine(v.h_object, q.h_object, v.h_motion, q.h_motion, w.avg);
        S(i, j) = a * sg + (T(1) - a) * sh;
      }
    }
    return S;
  }

  /// Backward of similarity_matrix. Returns per-video and per-query
  /// representation gradients; head gradients accumulate into params.
  std::pair<std::vector<DualRepresentation<T>>, std::vector<DualRepresentation<T>>> backward(const Mat<T>& dS,
                                                                                            const Cache& c) {
    const auto& videos = *c.videos;
    const auto& queries = *c.queries;
    const Eigen::Index d = videos.front().g_object.cols();
    std::vector<DualRepresentation<T>> dv(videos.size(), DualRepresentation<T>::zeros(d));
    std::vector<DualRepresentation<T>> dq(queries.size(), DualRepresentation<T>::zeros(d));
    const T a = static_cast<T>(alpha_);
    for (std::size_t j = 0; j < queries.size(); ++j) {
      const auto& q = queries[j];
      const auto& w = c.weights[j];
      T dw_cls_o{}, dw_cls_m{}, dw_avg_o{}, dw_avg_m{};
      for (std::size_t i = 0; i < videos.size(); ++i) {
        const T u = dS(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (u == T(0)) continue;
        const auto& v = videos[i];
        const T ucls = a * u, uavg = (T(1) - a) * u;
        if (ucls != T(0)) {
          dw_cls_o += ucls * nn::cosine(v.g_object, q.g_object);
          dw_cls_m += ucls * nn::cosine(v.g_motion, q.g_motion);
          nn::cosine_backward(v.g_object, q.g_object, ucls * w.cls.first, dv[i].g_object, dq[j].g_object);
          nn::cosine_backward(v.g_motion, q.g_motion, ucls * w.cls.second, dv[i].g_motion, dq[j].g_motion);
        }
        if (uavg != T(0)) {
          dw_avg_o += uavg * nn::cosine(v.h_object, q.h_object);
          dw_avg_m += uavg * nn::cosine(v.h_motion, q.h_motion);
          nn::cosine_backward(v.h_object, q.h_object, uavg * w.avg.first, dv[i].h_object, dq[j].h_object);
          nn::cosine_backward(v.h_motion, q.h_motion, uavg * w.avg.second, dv[i].h_motion, dq[j].h_motion);
        }
      }
      cls_head.backward(dw_cls_o, dw_cls_m, c.cls[j], dq[j].g_object, dq[j].g_motion);
      avg_head.backward(dw_avg_o, dw_avg_m, c.avg[j], dq[j].h_object, dq[j].h_motion);
    }
    return {std::move(dv), std::move(dq)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    cls_head.for_each_param(f);
    avg_head.for_each_param(f);
  }

  StreamWeightHead<T> cls_head;
  StreamWeightHead<T> avg_head;

 private:
  double alpha_ = kDefaultAlpha;
};

/// (1/B) sum_i sum_{j != i} ([S_ij - S_ii + margin]_+ + [S_ji - S_ii + margin]_+)
template <typename T>
T ranking_loss(const Mat<T>& S, double margin) {
  if (S.rows() != S.cols()) throw ShapeError("ranking_loss: similarity matrix must be square");
  if (S.rows() < 2) throw ValidationError("ranking_loss: batch needs at least 2 pairs");
  if (!(margin >= 0.0)) throw ValidationError("ranking_loss: margin must be >= 0");
  const Eigen::Index B = S.rows();
  const T m = static_cast<T>(margin);
  T total{};
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == i) continue;
      total += std::max(T(0), S(i, j) - S(i, i) + m) + std::max(T(0), S(j, i) - S(i, i) + m);
    }
  }
  return total / static_cast<T>(B);
}

/// Subgradient of ranking_loss; hinge terms with an argument of exactly zero
/// contribute nothing.
template <typename T>
Mat<T> ranking_loss_grad(const Mat<T>& S, double margin) {
  const Eigen::Index B = S.rows();
  const T m = static_cast<T>(margin);
  const T inv = T(1) / static_cast<T>(B);
  Mat<T> dS = Mat<T>::Zero(B, B);
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == i) continue;
      if (S(i, j) - S(i, i) + m > T(0)) {
        dS(i, j) += inv;
        dS(i, i) -= inv;
      }
      if (S(j, i) - S(i, i) + m > T(0)) {
        dS(j, i) += inv;
        dS(i, i) -= inv;
      }
    }
  }
  return dS;
}

}  // namespace alan

#pragma once

// Parameterized layers with hand-written backward passes.
//
// Every layer follows the same protocol:
//   Mat<T> forward(inputs..., Cache&, const Context&) const;
//   Mat<T> backward(const Mat<T>& d_out, const Cache&);   // accumulates into Param::grad
// Forward is const and, in eval mode, a pure function of parameters and
// inputs. Rows are tokens/clips, columns are features.

#include <string>
#include <utility>
#include <vector>

#include "alan/core.hpp"
#include "alan/nn/functional.hpp"
#include "alan/nn/param.hpp"

namespace alan::nn {

struct Context {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // required for train-mode dropout

  [[nodiscard]] bool training() const { return mode == Mode::train; }
};

enum class LayerKind { linear, multi_head_attention, encoder_layer, cross_attention_block, decoder_layer, gated_embedding_unit };

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  Eigen::Index d_model = 32;
  Eigen::Index n_heads = 1;
  double dropout_rate = 0.0;

  void validate() const {
    if (d_model < 1) throw ShapeError("d_model must be positive");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ShapeError("n_heads (" + std::to_string(n_heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout rate must lie in [0,1)");
  }
};

// ---------------------------------------------------------------------------

template <typename T>
class Linear {
 public:
  using Scalar = T;
  struct Cache {
    Mat<T> input;
  };

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {}

  void init(Rng& rng) {
    xavier_uniform(weight, rng, in_features(), out_features());
    bias.value.setZero();
  }

  [[nodiscard]] Eigen::Index in_features() const { return weight.value.rows(); }
  [[nodiscard]] Eigen::Index out_features() const { return weight.value.cols(); }

  Mat<T> forward(const Mat<T>& x, Cache& cache) const {
    require_cols(x, in_features(), weight.name.c_str());
    cache.input = x;
    Mat<T> y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) {
    weight.grad.noalias() += cache.input.transpose() * dy;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value.transpose();
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }

  Param<T> weight;
  Param<T> bias;
};

template <typename T>
class LayerNorm {
 public:
  using Scalar = T;
  struct Cache {
    Mat<T> normalized;
    std::vector<T> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index d, double eps = 1e-5)
      : gamma(name + ".gamma", 1, d), beta(name + ".beta", 1, d), eps_(static_cast<T>(eps)) {
    gamma.value.setOnes();
  }

  void init(Rng&) {
    gamma.value.setOnes();
    beta.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x, Cache& cache) const {
    require_cols(x, gamma.value.cols(), gamma.name.c_str());
    const auto d = static_cast<T>(x.cols());
    cache.normalized.resize(x.rows(), x.cols());
    cache.inv_std.resize(static_cast<std::size_t>(x.rows()));
    Mat<T> y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const T mean = x.row(r).sum() / d;
      const auto centered = (x.row(r).array() - mean).eval();
      const T var = centered.square().sum() / d;
      const T inv = T(1) / std::sqrt(var + eps_);
      cache.inv_std[static_cast<std::size_t>(r)] = inv;
      cache.normalized.row(r) = centered * inv;
      y.row(r) = cache.normalized.row(r).array() * gamma.value.row(0).array() + beta.value.row(0).array();
    }
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) {
    const auto& xhat = cache.normalized;
    gamma.grad.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const auto dxhat = (dy.row(r).array() * gamma.value.row(0).array()).eval();
      const T mean_dxhat = dxhat.mean();
      const T mean_dxhat_xhat = (dxhat * xhat.row(r).array()).mean();
      dx.row(r) = cache.inv_std[static_cast<std::size_t>(r)] *
                  (dxhat - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
    }
    return dx;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(gamma);
    f(beta);
  }

  Param<T> gamma;
  Param<T> beta;

 private:
  T eps_ = T(1e-5);
};

/// Inverted dropout: kept units are scaled by 1/(1-rate) at train time; eval
/// is the identity.
template <typename T>
class Dropout {
 public:
  using Scalar = T;
  struct Cache {
    Mat<T> mask;  // empty when inactive
  };

  explicit Dropout(double rate = 0.0) : rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must lie in [0,1)");
  }

  [[nodiscard]] double rate() const { return rate_; }

  Mat<T> forward(const Mat<T>& x, Cache& cache, const Context& ctx) const {
    if (!ctx.training() || rate_ == 0.0) {
      cache.mask.resize(0, 0);
      return x;
    }
    if (ctx.rng == nullptr) throw ValidationError("train-mode dropout needs an rng");
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    cache.mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      cache.mask.data()[i] = ctx.rng->uniform() < rate_ ? T(0) : keep_scale;
    }
    return x.cwiseProduct(cache.mask);
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) const {
    if (cache.mask.size() == 0) return dy;
    return dy.cwiseProduct(cache.mask);
  }

 private:
  double rate_;
};

/// Scaled dot-product attention over n_heads heads with separate query and
/// key/value inputs. Self-attention passes the same matrix twice.
template <typename T>
class MultiHeadAttention {
 public:
  using Scalar = T;
  struct Cache {
    typename Linear<T>::Cache q_in, k_in, v_in, out_in;
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs;  // one Lq x Lk matrix per head
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Eigen::Index d_model, Eigen::Index n_heads)
      : query(name + ".query", d_model, d_model),
        key(name + ".key", d_model, d_model),
        value(name + ".value", d_model, d_model),
        output(name + ".output", d_model, d_model),
        n_heads_(n_heads) {
    LayerSpec{LayerKind::multi_head_attention, d_model, n_heads, 0.0}.validate();
  }

  void init(Rng& rng) {
    query.init(rng);
    key.init(rng);
    value.init(rng);
    output.init(rng);
  }

  [[nodiscard]] Eigen::Index d_model() const { return query.in_features(); }
  [[nodiscard]] Eigen::Index n_heads() const { return n_heads_; }

  Mat<T> forward(const Mat<T>& xq, const Mat<T>& xkv, Cache& cache) const {
    const Eigen::Index dh = d_model() / n_heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    cache.q = query.forward(xq, cache.q_in);
    cache.k = key.forward(xkv, cache.k_in);
    cache.v = value.forward(xkv, cache.v_in);
    cache.probs.resize(static_cast<std::size_t>(n_heads_));
    Mat<T> concat(xq.rows(), d_model());
    for (Eigen::Index h = 0; h < n_heads_; ++h) {
      const auto qh = cache.q.middleCols(h * dh, dh);
      const auto kh = cache.k.middleCols(h * dh, dh);
      const auto vh = cache.v.middleCols(h * dh, dh);
      Mat<T> scores = (qh * kh.transpose()) * scale;
      auto& p = cache.probs[static_cast<std::size_t>(h)];
      p = softmax_rows(scores);
      concat.middleCols(h * dh, dh).noalias() = p * vh;
    }
    return output.forward(concat, cache.out_in);
  }

  /// Returns (d_xq, d_xkv).
  std::pair<Mat<T>, Mat<T>> backward(const Mat<T>& dy, const Cache& cache) {
    const Eigen::Index dh = d_model() / n_heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const Mat<T> dconcat = output.backward(dy, cache.out_in);
    Mat<T> dq(cache.q.rows(), cache.q.cols());
    Mat<T> dk(cache.k.rows(), cache.k.cols());
    Mat<T> dv(cache.v.rows(), cache.v.cols());
    for (Eigen::Index h = 0; h < n_heads_; ++h) {
      const auto& p = cache.probs[static_cast<std::size_t>(h)];
      const auto qh = cache.q.middleCols(h * dh, dh);
      const auto kh = cache.k.middleCols(h * dh, dh);
      const auto vh = cache.v.middleCols(h * dh, dh);
      const auto doh = dconcat.middleCols(h * dh, dh);
      const Mat<T> dp = doh * vh.transpose();
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
      const Mat<T> dscores = softmax_rows_backward(p, dp) * scale;
      dq.middleCols(h * dh, dh).noalias() = dscores * kh;
      dk.middleCols(h * dh, dh).noalias() = dscores.transpose() * qh;
    }
    Mat<T> dxq = query.backward(dq, cache.q_in);
    Mat<T> dxkv = key.backward(dk, cache.k_in);
    dxkv += value.backward(dv, cache.v_in);
    return {std::move(dxq), std::move(dxkv)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    query.for_each_param(f);
    key.for_each_param(f);
    value.for_each_param(f);
    output.for_each_param(f);
  }

  Linear<T> query, key, value, output;

 private:
  Eigen::Index n_heads_ = 1;
};

/// Position-wise Linear -> GELU -> Linear.
template <typename T>
class FeedForward {
 public:
  using Scalar = T;
  struct Cache {
    typename Linear<T>::Cache in1, in2;
    Mat<T> pre;
  };

  FeedForward() = default;
  FeedForward(const std::string& name, Eigen::Index d_model, Eigen::Index hidden)
      : fc1(name + ".fc1", d_model, hidden), fc2(name + ".fc2", hidden, d_model) {}

  void init(Rng& rng) {
    fc1.init(rng);
    fc2.init(rng);
  }

  Mat<T> forward(const Mat<T>& x, Cache& cache) const {
    cache.pre = fc1.forward(x, cache.in1);
    const Mat<T> act = cache.pre.unaryExpr([](T v) { return gelu(v); });
    return fc2.forward(act, cache.in2);
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) {
    Mat<T> dact = fc2.backward(dy, cache.in2);
    dact.array() *= cache.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    return fc1.backward(dact, cache.in1);
  }

  template <typename F>
  void for_each_param(F&& f) {
    fc1.for_each_param(f);
    fc2.for_each_param(f);
  }

  Linear<T> fc1, fc2;
};

/// Post-norm Transformer encoder layer:
///   x1 = LN(x + Drop(MHA(x, x)))
///   y  = LN(x1 + Drop(FFN(x1)))
template <typename T>
class EncoderLayer {
 public:
  using Scalar = T;
  struct Cache {
    typename MultiHeadAttention<T>::Cache attn;
    typename Dropout<T>::Cache drop1, drop2;
    typename LayerNorm<T>::Cache norm1, norm2;
    typename FeedForward<T>::Cache ffn;
  };

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, Eigen::Index d_model, Eigen::Index n_heads, Eigen::Index ff_hidden,
               double dropout)
      : attention(name + ".attn", d_model, n_heads),
        norm1(name + ".norm1", d_model),
        ffn(name + ".ffn", d_model, ff_hidden),
        norm2(name + ".norm2", d_model),
        drop_(dropout) {}

  void init(Rng& rng) {
    attention.init(rng);
    norm1.init(rng);
    ffn.init(rng);
    norm2.init(rng);
  }

  Mat<T> forward(const Mat<T>& x, Cache& c, const Context& ctx) const {
    const Mat<T> a = drop_.forward(attention.forward(x, x, c.attn), c.drop1, ctx);
    const Mat<T> x1 = norm1.forward(x + a, c.norm1);
    const Mat<T> f = drop_.forward(ffn.forward(x1, c.ffn), c.drop2, ctx);
    return norm2.forward(x1 + f, c.norm2);
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& c) {
    const Mat<T> ds2 = norm2.backward(dy, c.norm2);
    Mat<T> dx1 = ds2 + ffn.backward(drop_.backward(ds2, c.drop2), c.ffn);
    const Mat<T> ds1 = norm1.backward(dx1, c.norm1);
    auto [dq, dkv] = attention.backward(drop_.backward(ds1, c.drop1), c.attn);
    return ds1 + dq + dkv;
  }

  template <typename F>
  void for_each_param(F&& f) {
    attention.for_each_param(f);
    norm1.for_each_param(f);
    ffn.for_each_param(f);
    norm2.for_each_param(f);
  }

  MultiHeadAttention<T> attention;
  LayerNorm<T> norm1;
  FeedForward<T> ffn;
  LayerNorm<T> norm2;

 private:
  Dropout<T> drop_;
};

/// Cross-modal block: the self stream queries the other stream's contextual
/// tokens.  y = LN(q + Drop(Linear(MHA(q, kv)))).
template <typename T>
class CrossAttentionBlock {
 public:
  using Scalar = T;
  struct Cache {
    typename MultiHeadAttention<T>::Cache attn;
    typename Linear<T>::Cache proj;
    typename Dropout<T>::Cache drop;
    typename LayerNorm<T>::Cache norm;
  };

  CrossAttentionBlock() = default;
  CrossAttentionBlock(const std::string& name, Eigen::Index d_model, Eigen::Index n_heads, double dropout)
      : attention(name + ".attn", d_model, n_heads),
        projection(name + ".proj", d_model, d_model),
        norm(name + ".norm", d_model),
        drop_(dropout) {}

  void init(Rng& rng) {
    attention.init(rng);
    projection.init(rng);
    norm.init(rng);
  }

  Mat<T> forward(const Mat<T>& q, const Mat<T>& kv, Cache& c, const Context& ctx) const {
    const Mat<T> a = attention.forward(q, kv, c.attn);
    const Mat<T> p = drop_.forward(projection.forward(a, c.proj), c.drop, ctx);
    return norm.forward(q + p, c.norm);
  }

  /// Returns (d_q, d_kv).
  std::pair<Mat<T>, Mat<T>> backward(const Mat<T>& dy, const Cache& c) {
    const Mat<T> ds = norm.backward(dy, c.norm);
    const Mat<T> da = projection.backward(drop_.backward(ds, c.drop), c.proj);
    auto [dq, dkv] = attention.backward(da, c.attn);
    dq += ds;
    return {std::move(dq), std::move(dkv)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    attention.for_each_param(f);
    projection.for_each_param(f);
    norm.for_each_param(f);
  }

  MultiHeadAttention<T> attention;
  Linear<T> projection;
  LayerNorm<T> norm;

 private:
  Dropout<T> drop_;
};

/// Post-norm Transformer decoder layer without a causal mask:
///   x1 = LN(x + Drop(SelfMHA(x)))
///   x2 = LN(x1 + Drop(CrossMHA(x1, memory)))
///   y  = LN(x2 + Drop(FFN(x2)))
template <typename T>
class DecoderLayer {
 public:
  using Scalar = T;
  struct Cache {
    typename MultiHeadAttention<T>::Cache self_attn, cross_attn;
    typename Dropout<T>::Cache drop1, drop2, drop3;
    typename LayerNorm<T>::Cache norm1, norm2, norm3;
    typename FeedForward<T>::Cache ffn;
  };

  DecoderLayer() = default;
  DecoderLayer(const std::string& name, Eigen::Index d_model, Eigen::Index n_heads, Eigen::Index ff_hidden,
               double dropout)
      : self_attention(name + ".self_attn", d_model, n_heads),
        norm1(name + ".norm1", d_model),
        cross_attention(name + ".cross_attn", d_model, n_heads),
        norm2(name + ".norm2", d_model),
        ffn(name + ".ffn", d_model, ff_hidden),
        norm3(name + ".norm3", d_model),
        drop_(dropout) {}

  void init(Rng& rng) {
    self_attention.init(rng);
    norm1.init(rng);
    cross_attention.init(rng);
    norm2.init(rng);
    ffn.init(rng);
    norm3.init(rng);
  }

  Mat<T> forward(const Mat<T>& x, const Mat<T>& memory, Cache& c, const Context& ctx) const {
    require_cols(memory, x.cols(), "decoder memory");
    const Mat<T> a = drop_.forward(self_attention.forward(x, x, c.self_attn), c.drop1, ctx);
    const Mat<T> x1 = norm1.forward(x + a, c.norm1);
    const Mat<T> b = drop_.forward(cross_attention.forward(x1, memory, c.cross_attn), c.drop2, ctx);
    const Mat<T> x2 = norm2.forward(x1 + b, c.norm2);
    const Mat<T> f = drop_.forward(ffn.forward(x2, c.ffn), c.drop3, ctx);
    return norm3.forward(x2 + f, c.norm3);
  }

  /// Returns (d_x, d_memory).
  std::pair<Mat<T>, Mat<T>> backward(const Mat<T>& dy, const Cache& c) {
    const Mat<T> ds3 = norm3.backward(dy, c.norm3);
    const Mat<T> dx2 = ds3 + ffn.backward(drop_.backward(ds3, c.drop3), c.ffn);
    const Mat<T> ds2 = norm2.backward(dx2, c.norm2);
    auto [dq_cross, dmemory] = cross_attention.backward(drop_.backward(ds2, c.drop2), c.cross_attn);
    const Mat<T> dx1 = ds2 + dq_cross;
    const Mat<T> ds1 = norm1.backward(dx1, c.norm1);
    auto [dq_self, dkv_self] = self_attention.backward(drop_.backward(ds1, c.drop1), c.self_attn);
    Mat<T> dx = ds1 + dq_self + dkv_self;
    return {std::move(dx), std::move(dmemory)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    self_attention.for_each_param(f);
    norm1.for_each_param(f);
    cross_attention.for_each_param(f);
    norm2.for_each_param(f);
    ffn.for_each_param(f);
    norm3.for_each_param(f);
  }

  MultiHeadAttention<T> self_attention;
  LayerNorm<T> norm1;
  MultiHeadAttention<T> cross_attention;
  LayerNorm<T> norm2;
  FeedForward<T> ffn;
  LayerNorm<T> norm3;

 private:
  Dropout<T> drop_;
};

/// Gated embedding unit: z = W1 x + b1; y = z * sigmoid(W2 z + b2); out = y / |y|.
/// Operates row-wise; each row is normalized independently.
template <typename T>
class GatedEmbeddingUnit {
 public:
  using Scalar = T;
  enum class ZeroPolicy { error, zero_vector };

  struct Cache {
    typename Linear<T>::Cache in1, in2;
    Mat<T> z, gate, out;
    std::vector<T> norms;
  };

  GatedEmbeddingUnit() = default;
  GatedEmbeddingUnit(const std::string& name, Eigen::Index in, Eigen::Index out,
                     ZeroPolicy policy = ZeroPolicy::error)
      : fc(name + ".fc", in, out), gate_fc(name + ".gate", out, out), policy_(policy) {}

  void init(Rng& rng) {
    fc.init(rng);
    gate_fc.init(rng);
  }

  Mat<T> forward(const Mat<T>& x, Cache& c) const {
    c.z = fc.forward(x, c.in1);
    c.gate = sigmoid(Mat<T>(gate_fc.forward(c.z, c.in2)));
    const Mat<T> y = c.z.cwiseProduct(c.gate);
    c.out.resize(y.rows(), y.cols());
    c.norms.resize(static_cast<std::size_t>(y.rows()));
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T n = y.row(r).norm();
      c.norms[static_cast<std::size_t>(r)] = n;
      if (n == T(0)) {
        if (policy_ == ZeroPolicy::error) throw NumericError(fc.weight.name + ": gated vector is exactly zero");
        c.out.row(r).setZero();
      } else {
        c.out.row(r) = y.row(r) / n;
      }
    }
    return c.out;
  }

  Mat<T> backward(const Mat<T>& dout, const Cache& c) {
    Mat<T> dy(dout.rows(), dout.cols());
    for (Eigen::Index r = 0; r < dout.rows(); ++r) {
      const T n = c.norms[static_cast<std::size_t>(r)];
      if (n == T(0)) {
        dy.row(r).setZero();
        continue;
      }
      dy.row(r) = (dout.row(r) - c.out.row(r) * c.out.row(r).dot(dout.row(r))) / n;
    }
    Mat<T> dz = dy.cwiseProduct(c.gate);
    const Mat<T> dgate_pre =
        dy.cwiseProduct(c.z).cwiseProduct(c.gate).cwiseProduct((Mat<T>::Ones(c.gate.rows(), c.gate.cols()) - c.gate));
    dz += gate_fc.backward(dgate_pre, c.in2);
    return fc.backward(dz, c.in1);
  }

  template <typename F>
  void for_each_param(F&& f) {
    fc.for_each_param(f);
    gate_fc.for_each_param(f);
  }

  Linear<T> fc;
  Linear<T> gate_fc;

 private:
  ZeroPolicy policy_ = ZeroPolicy::error;
};

/// Lookup table; rows are gathered by id and gradients scattered back.
template <typename T>
class Embedding {
 public:
  using Scalar = T;
  struct Cache {
    std::vector<Eigen::Index> ids;
  };

  Embedding() = default;
  Embedding(const std::string& name, Eigen::Index count, Eigen::Index d) : table(name + ".table", count, d) {}

  void init(Rng& rng, double stddev = 0.02) { normal_init(table, rng, stddev); }

  [[nodiscard]] Eigen::Index count() const { return table.value.rows(); }

  Mat<T> forward(const std::vector<Eigen::Index>& ids, Cache& c) const {
    Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= count()) {
        throw ValidationError(table.name + ": id " + std::to_string(ids[i]) + " out of range");
      }
      out.row(static_cast<Eigen::Index>(i)) = table.value.row(ids[i]);
    }
    c.ids = ids;
    return out;
  }

  void backward(const Mat<T>& dy, const Cache& c) {
    for (std::size_t i = 0; i < c.ids.size(); ++i) table.grad.row(c.ids[i]) += dy.row(static_cast<Eigen::Index>(i));
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(table);
  }

  Param<T> table;
};

}  // namespace alan::nn

#pragma once

// Video, text and audio encoders producing dual (CLS-level g, AVG-level h)
// representations for each of the two matched streams (object, motion).
//
// Clip token layout for one stream, N = sample length:
//   row 0          U_CLS  (mean of the N U-block features)
//   rows 1..N      U_1 .. U_N
//   row N+1        R_CLS  (mean of the N R-block features)
//   rows N+2..2N+1 R_1 .. R_N
// Positional ids are the original 1-based clip positions (CLS tokens use 0);
// sequence ids are 0 for the U block and 1 for the R block.

#include <string>
#include <vector>

#include "alan/core.hpp"
#include "alan/detector.hpp"
#include "alan/nn/layers.hpp"
#include "alan/sampler.hpp"

namespace alan {

struct EncoderConfig {
  Eigen::Index d_model = 32;
  Eigen::Index n_heads = 4;
  Eigen::Index ff_hidden = 64;
  std::size_t self_layers = 1;
  std::size_t text_layers = 1;
  Eigen::Index max_positions = 512;
  double dropout = 0.1;

  void validate() const {
    nn::LayerSpec{nn::LayerKind::encoder_layer, d_model, n_heads, dropout}.validate();
    if (ff_hidden < 1) throw ValidationError("ff_hidden must be positive");
    if (max_positions < 2) throw ValidationError("max_positions must be >= 2");
    if (self_layers < 1 || text_layers < 1) throw ValidationError("encoder stacks need at least one layer");
  }
};

/// g/h pairs for the object- and motion-matched streams.
template <typename T>
struct DualRepresentation {
  RowVec<T> g_object, g_motion, h_object, h_motion;

  static DualRepresentation zeros(Eigen::Index d) {
    return {RowVec<T>::Zero(d), RowVec<T>::Zero(d), RowVec<T>::Zero(d), RowVec<T>::Zero(d)};
  }
  DualRepresentation& operator+=(const DualRepresentation& o) {
    g_object += o.g_object;
    g_motion += o.g_motion;
    h_object += o.h_object;
    h_motion += o.h_motion;
    return *this;
  }
  [[nodiscard]] bool finite() const {
    return g_object.allFinite() && g_motion.allFinite() && h_object.allFinite() && h_motion.allFinite();
  }
};

template <typename T>
struct TokenizedClipSequence {
  Mat<T> tokens;  // (2N+2) x d, before embeddings are added
  std::vector<Eigen::Index> positions;
  std::vector<Eigen::Index> sequence_ids;
  std::size_t n = 0;
};

/// Gathers the U and R blocks from projected clip features and prepends their
/// mean-aggregated CLS tokens.
template <typename T>
TokenizedClipSequence<T> assemble_clip_tokens(const Mat<T>& projected, const SampledClipSet& u, const SampledClipSet& r,
                                              Eigen::Index max_positions) {
  if (u.size() != r.size() || u.size() < 1) throw ShapeError("U and R blocks must have the same positive length");
  const auto T_len = static_cast<std::size_t>(projected.rows());
  const std::size_t n = u.size();
  TokenizedClipSequence<T> seq;
  seq.n = n;
  seq.tokens.resize(static_cast<Eigen::Index>(2 * n + 2), projected.cols());
  seq.positions.resize(2 * n + 2);
  seq.sequence_ids.resize(2 * n + 2);
  auto fill_block = [&](const SampledClipSet& s, std::size_t offset, Eigen::Index seq_id) {
    RowVec<T> sum = RowVec<T>::Zero(projected.cols());
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = s.indices[j];
      if (idx < 1 || idx > T_len) throw ShapeError("sampled clip index out of range");
      seq.tokens.row(static_cast<Eigen::Index>(offset + 1 + j)) = projected.row(static_cast<Eigen::Index>(idx - 1));
      sum += projected.row(static_cast<Eigen::Index>(idx - 1));
      seq.positions[offset + 1 + j] = std::min<Eigen::Index>(static_cast<Eigen::Index>(idx), max_positions - 1);
      seq.sequence_ids[offset + 1 + j] = seq_id;
    }
    seq.tokens.row(static_cast<Eigen::Index>(offset)) = sum / static_cast<T>(n);
    seq.positions[offset] = 0;
    seq.sequence_ids[offset] = seq_id;
  };
  fill_block(u, 0, 0);
  fill_block(r, n + 1, 1);
  return seq;
}

/// Scatters a gradient w.r.t. assembled tokens back onto projected features.
template <typename T>
void assemble_clip_tokens_backward(const Mat<T>& d_tokens, const SampledClipSet& u, const SampledClipSet& r,
                                   Mat<T>& d_projected) {
  const std::size_t n = u.size();
  auto block = [&](const SampledClipSet& s, std::size_t offset) {
    const RowVec<T> d_cls = d_tokens.row(static_cast<Eigen::Index>(offset)) / static_cast<T>(n);
    for (std::size_t j = 0; j < n; ++j) {
      auto row = d_projected.row(static_cast<Eigen::Index>(s.indices[j] - 1));
      row += d_tokens.row(static_cast<Eigen::Index>(offset + 1 + j));
      row += d_cls;
    }
  };
  block(u, 0);
  block(r, n + 1);
}

/// g = (out[U_CLS] + out[R_CLS]) / 2; h = (mean(out[U]) + mean(out[R])) / 2.
template <typename T>
std::pair<RowVec<T>, RowVec<T>> pool_clip_tokens(const Mat<T>& out, std::size_t n) {
  const auto N = static_cast<Eigen::Index>(n);
  RowVec<T> g = (out.row(0) + out.row(N + 1)) / T(2);
  RowVec<T> h = (out.middleRows(1, N).colwise().mean() + out.middleRows(N + 2, N).colwise().mean()) / T(2);
  return {std::move(g), std::move(h)};
}

template <typename T>
Mat<T> pool_clip_tokens_backward(const RowVec<T>& dg, const RowVec<T>& dh, std::size_t n) {
  const auto N = static_cast<Eigen::Index>(n);
  Mat<T> d = Mat<T>::Zero(2 * N + 2, dg.cols());
  d.row(0) += dg / T(2);
  d.row(N + 1) += dg / T(2);
  const RowVec<T> per = dh / (T(2) * static_cast<T>(n));
  for (Eigen::Index i = 1; i <= N; ++i) d.row(i) += per;
  for (Eigen::Index i = N + 2; i <= 2 * N + 1; ++i) d.row(i) += per;
  return d;
}

/// One clip stream: projection to d, clip-token assembly with positional and
/// sequence embeddings, then the Self Encoder stack.
template <typename T>
class ClipStream {
 public:
  using Scalar = T;
  struct Cache {
    typename nn::Linear<T>::Cache proj;
    Mat<T> projected;  // T x d
    SampledClipSet u, r;
    TokenizedClipSequence<T> tokens;
    typename nn::Embedding<T>::Cache pos, seq;
    std::vector<typename nn::EncoderLayer<T>::Cache> layers;
    Mat<T> output;  // (2N+2) x d
  };

  ClipStream() = default;
  ClipStream(const std::string& name, Eigen::Index d_in, const EncoderConfig& cfg)
      : projection(name + ".proj", d_in, cfg.d_model),
        positions(name + ".pos_emb", cfg.max_positions, cfg.d_model),
        sequences(name + ".seq_emb", 2, cfg.d_model),
        max_positions_(cfg.max_positions) {
    for (std::size_t i = 0; i < cfg.self_layers; ++i) {
      layers.emplace_back(name + ".self" + std::to_string(i), cfg.d_model, cfg.n_heads, cfg.ff_hidden, cfg.dropout);
    }
  }

  void init(Rng& rng) {
    projection.init(rng);
    positions.init(rng);
    sequences.init(rng);
    for (auto& l : layers) l.init(rng);
  }

  [[nodiscard]] Eigen::Index d_in() const { return projection.in_features(); }

  const Mat<T>& project(const Mat<T>& features, Cache& c) const {
    c.projected = projection.forward(features, c.proj);
    return c.projected;
  }

  /// Requires project() to have filled the cache.
  const Mat<T>& encode(const SampledClipSet& u, const SampledClipSet& r, Cache& c, const nn::Context& ctx) const {
    c.u = u;
    c.r = r;
    c.tokens = assemble_clip_tokens(c.projected, u, r, max_positions_);
    Mat<T> x = c.tokens.tokens + positions.forward(c.tokens.positions, c.pos) +
               sequences.forward(c.tokens.sequence_ids, c.seq);
    c.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) x = layers[i].forward(x, c.layers[i], ctx);
    c.output = std::move(x);
    return c.output;
  }

  /// Gradient w.r.t. the stream output -> gradient w.r.t. projected features.
  Mat<T> backward_encode(const Mat<T>& d_output, const Cache& c) {
    Mat<T> d = d_output;
    for (std::size_t i = layers.size(); i-- > 0;) d = layers[i].backward(d, c.layers[i]);
    positions.backward(d, c.pos);
    sequences.backward(d, c.seq);
    Mat<T> d_projected = Mat<T>::Zero(c.projected.rows(), c.projected.cols());
    assemble_clip_tokens_backward(d, c.u, c.r, d_projected);
    return d_projected;
  }

  void backward_project(const Mat<T>& d_projected, const Cache& c) { projection.backward(d_projected, c.proj); }

  template <typename F>
  void for_each_param(F&& f) {
    projection.for_each_param(f);
    positions.for_each_param(f);
    sequences.for_each_param(f);
    for (auto& l : layers) l.for_each_param(f);
  }

  nn::Linear<T> projection;
  nn::Embedding<T> positions;
  nn::Embedding<T> sequences;
  std::vector<nn::EncoderLayer<T>> layers;

 private:
  Eigen::Index max_positions_ = 512;
};

/// Frame-level outputs of the video encoder, used as prompts by the masked
/// phrase decoder: the mean of the two streams' final token matrices.
template <typename T>
struct VideoEncoding {
  DualRepresentation<T> rep;
  Mat<T> frames;  // (2N+2) x d
};

/// Symmetric two-stream video encoder with a per-stream Cross Encoder, plus
/// the clip anomaly detector that reads the projected object stream.
template <typename T>
class VideoEncoder {
 public:
  using Scalar = T;
  struct Cache {
    typename ClipStream<T>::Cache object, motion;
    typename nn::CrossAttentionBlock<T>::Cache cross_object, cross_motion;
    Mat<T> out_object, out_motion;
    std::size_t n = 0;
  };

  VideoEncoder() = default;
  VideoEncoder(const std::string& name, Eigen::Index d_object, Eigen::Index d_motion, const EncoderConfig& cfg,
               const DetectorConfig& det)
      : object(name + ".object", d_object, cfg),
        motion(name + ".motion", d_motion, cfg),
        cross_object(name + ".cross_object", cfg.d_model, cfg.n_heads, cfg.dropout),
        cross_motion(name + ".cross_motion", cfg.d_model, cfg.n_heads, cfg.dropout),
        detector(name + ".detector", cfg.d_model, det) {}

  void init(Rng& rng) {
    object.init(rng);
    motion.init(rng);
    cross_object.init(rng);
    cross_motion.init(rng);
    detector.init(rng);
  }

  /// Projects both streams into the cache; returns the projected object
  /// stream, which is the detector's input.
  const Mat<T>& project(const Mat<T>& object_features, const Mat<T>& motion_features, Cache& c) const {
    if (object_features.rows() != motion_features.rows()) {
      throw ShapeError("video: object and motion streams differ in length");
    }
    object.project(object_features, c.object);
    motion.project(motion_features, c.motion);
    return c.object.projected;
  }

  VideoEncoding<T> encode_projected(const SampledClipSet& u, const SampledClipSet& r, Cache& c,
                                    const nn::Context& ctx) const {
    const Mat<T>& so = object.encode(u, r, c.object, ctx);
    const Mat<T>& sm = motion.encode(u, r, c.motion, ctx);
    c.out_object = cross_object.forward(so, sm, c.cross_object, ctx);
    c.out_motion = cross_motion.forward(sm, so, c.cross_motion, ctx);
    c.n = u.size();
    VideoEncoding<T> out;
    std::tie(out.rep.g_object, out.rep.h_object) = pool_clip_tokens(c.out_object, c.n);
    std::tie(out.rep.g_motion, out.rep.h_motion) = pool_clip_tokens(c.out_motion, c.n);
    out.frames = (c.out_object + c.out_motion) / T(2);
    return out;
  }

  VideoEncoding<T> encode(const Mat<T>& object_features, const Mat<T>& motion_features, const SampledClipSet& u,
                          const SampledClipSet& r, Cache& c, const nn::Context& ctx) const {
    project(object_features, motion_features, c);
    return encode_projected(u, r, c, ctx);
  }

  /// Backward through the encoder up to (not including) the projections.
  /// Returns d(projected object), d(projected motion).
  std::pair<Mat<T>, Mat<T>> backward_encode(const DualRepresentation<T>& d_rep, const Mat<T>* d_frames,
                                            const Cache& c) {
    Mat<T> d_out_object = pool_clip_tokens_backward(d_rep.g_object, d_rep.h_object, c.n);
    Mat<T> d_out_motion = pool_clip_tokens_backward(d_rep.g_motion, d_rep.h_motion, c.n);
    if (d_frames != nullptr) {
      d_out_object += *d_frames / T(2);
      d_out_motion += *d_frames / T(2);
    }
    auto [dso_q, dsm_kv] = cross_object.backward(d_out_object, c.cross_object);
    auto [dsm_q, dso_kv] = cross_motion.backward(d_out_motion, c.cross_motion);
    const Mat<T> d_so = dso_q + dso_kv;
    const Mat<T> d_sm = dsm_q + dsm_kv;
    return {object.backward_encode(d_so, c.object), motion.backward_encode(d_sm, c.motion)};
  }

  void backward_project(const Mat<T>& d_object, const Mat<T>& d_motion, const Cache& c) {
    object.backward_project(d_object, c.object);
    motion.backward_project(d_motion, c.motion);
  }

  template <typename F>
  void for_each_param(F&& f) {
    object.for_each_param(f);
    motion.for_each_param(f);
    cross_object.for_each_param(f);
    cross_motion.for_each_param(f);
    detector.for_each_param(f);
  }

  ClipStream<T> object;
  ClipStream<T> motion;
  nn::CrossAttentionBlock<T> cross_object;
  nn::CrossAttentionBlock<T> cross_motion;
  AnomalyDetector<T> detector;
};

/// Four gated embedding units mapping a query's pooled (g, h) pair into the
/// object- and motion-matched spaces.
template <typename T>
class StreamMatcher {
 public:
  using Scalar = T;
  struct Cache {
    typename nn::GatedEmbeddingUnit<T>::Cache go, gm, ho, hm;
  };

  StreamMatcher() = default;
  StreamMatcher(const std::string& name, Eigen::Index d)
      : g_object(name + ".g_object", d, d),
        g_motion(name + ".g_motion", d, d),
        h_object(name + ".h_object", d, d),
        h_motion(name + ".h_motion", d, d) {}

  void init(Rng& rng) {
    g_object.init(rng);
    g_motion.init(rng);
    h_object.init(rng);
    h_motion.init(rng);
  }

  DualRepresentation<T> forward(const RowVec<T>& g, const RowVec<T>& h, Cache& c) const {
    const Mat<T> gm(g), hm(h);
    return {g_object.forward(gm, c.go), g_motion.forward(gm, c.gm), h_object.forward(hm, c.ho),
            h_motion.forward(hm, c.hm)};
  }

  /// Returns (d g, d h).
  std::pair<RowVec<T>, RowVec<T>> backward(const DualRepresentation<T>& d, const Cache& c) {
    RowVec<T> dg = g_object.backward(Mat<T>(d.g_object), c.go);
    dg += g_motion.backward(Mat<T>(d.g_motion), c.gm);
    RowVec<T> dh = h_object.backward(Mat<T>(d.h_object), c.ho);
    dh += h_motion.backward(Mat<T>(d.h_motion), c.hm);
    return {std::move(dg), std::move(dh)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    g_object.for_each_param(f);
    g_motion.for_each_param(f);
    h_object.for_each_param(f);
    h_motion.for_each_param(f);
  }

  nn::GatedEmbeddingUnit<T> g_object, g_motion, h_object, h_motion;
};

template <typename T>
struct TextEncoding {
  DualRepresentation<T> rep;  // gated
  RowVec<T> g, h;             // before gating
  Mat<T> words;               // L x d contextual word outputs (X^t)
};

/// Trainable token embedding + learned positions + encoder stack with a
/// prepended CLS token. Position 0 is the CLS slot; words use 1..L.
template <typename T>
class TextEncoder {
 public:
  using Scalar = T;
  struct Cache {
    typename nn::Embedding<T>::Cache tok, pos;
    std::vector<typename nn::EncoderLayer<T>::Cache> layers;
    Mat<T> output;  // (L+1) x d
    typename StreamMatcher<T>::Cache matcher;
  };

  TextEncoder() = default;
  TextEncoder(const std::string& name, Eigen::Index vocab_size, const EncoderConfig& cfg)
      : tokens(name + ".tok_emb", vocab_size, cfg.d_model),
        positions(name + ".pos_emb", cfg.max_positions, cfg.d_model),
        cls(name + ".cls", 1, cfg.d_model),
        matcher(name + ".gated", cfg.d_model),
        max_positions_(cfg.max_positions) {
    for (std::size_t i = 0; i < cfg.text_layers; ++i) {
      layers.emplace_back(name + ".layer" + std::to_string(i), cfg.d_model, cfg.n_heads, cfg.ff_hidden, cfg.dropout);
    }
  }

  void init(Rng& rng) {
    tokens.init(rng, 1.0);
    positions.init(rng);
    nn::normal_init(cls, rng, 0.02);
    for (auto& l : layers) l.init(rng);
    matcher.init(rng);
  }

  [[nodiscard]] Eigen::Index vocab_size() const { return tokens.count(); }

  TextEncoding<T> encode(const std::vector<int>& token_ids, Cache& c, const nn::Context& ctx) const {
    if (token_ids.empty()) throw ShapeError("text: empty caption");
    std::vector<Eigen::Index> ids, pos;
    pos.push_back(0);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
      if (token_ids[i] < 0 || token_ids[i] >= vocab_size()) {
        throw ValidationError("text: unknown token id " + std::to_string(token_ids[i]));
      }
      ids.push_back(token_ids[i]);
      pos.push_back(std::min<Eigen::Index>(static_cast<Eigen::Index>(i + 1), max_positions_ - 1));
    }
    const auto L = static_cast<Eigen::Index>(ids.size());
    Mat<T> x(L + 1, cls.value.cols());
    x.row(0) = cls.value.row(0);
    x.bottomRows(L) = tokens.forward(ids, c.tok);
    x += positions.forward(pos, c.pos);
    c.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) x = layers[i].forward(x, c.layers[i], ctx);
    c.output = std::move(x);
    TextEncoding<T> out;
    out.g = c.output.row(0);
    out.words = c.output.bottomRows(L);
    out.h = out.words.colwise().mean();
    out.rep = matcher.forward(out.g, out.h, c.matcher);
    return out;
  }

  /// d_words may be null (no masked-phrase gradient).
  void backward(const DualRepresentation<T>& d_rep, const Mat<T>* d_words, const Cache& c) {
    const Eigen::Index L = c.output.rows() - 1;
    auto [dg, dh] = matcher.backward(d_rep, c.matcher);
    Mat<T> d = Mat<T>::Zero(L + 1, c.output.cols());
    d.row(0) += dg;
    d.bottomRows(L).rowwise() += dh / static_cast<T>(L);
    if (d_words != nullptr) d.bottomRows(L) += *d_words;
    for (std::size_t i = layers.size(); i-- > 0;) d = layers[i].backward(d, c.layers[i]);
    positions.backward(d, c.pos);
    cls.grad.row(0) += d.row(0);
    tokens.backward(d.bottomRows(L), c.tok);
  }

  template <typename F>
  void for_each_param(F&& f) {
    tokens.for_each_param(f);
    positions.for_each_param(f);
    f(cls);
    for (auto& l : layers) l.for_each_param(f);
    matcher.for_each_param(f);
  }

  nn::Embedding<T> tokens;
  nn::Embedding<T> positions;
  nn::Param<T> cls;
  std::vector<nn::EncoderLayer<T>> layers;
  StreamMatcher<T> matcher;

 private:
  Eigen::Index max_positions_ = 512;
};

/// Single-stream audio encoder: same token assembly and Self Encoder as one
/// video stream, no Cross Encoder; gated units after pooling.
template <typename T>
class AudioEncoder {
 public:
  using Scalar = T;
  struct Cache {
    typename ClipStream<T>::Cache stream;
    typename StreamMatcher<T>::Cache matcher;
    std::size_t n = 0;
  };

  AudioEncoder() = default;
  AudioEncoder(const std::string& name, Eigen::Index d_in, const EncoderConfig& cfg, const DetectorConfig& det)
      : stream(name + ".stream", d_in, cfg),
        matcher(name + ".gated", cfg.d_model),
        detector(name + ".detector", cfg.d_model, det) {}

  void init(Rng& rng) {
    stream.init(rng);
    matcher.init(rng);
    detector.init(rng);
  }

  const Mat<T>& project(const Mat<T>& features, Cache& c) const { return stream.project(features, c.stream); }

  DualRepresentation<T> encode_projected(const SampledClipSet& u, const SampledClipSet& r, Cache& c,
                                         const nn::Context& ctx) const {
    const Mat<T>& out = stream.encode(u, r, c.stream, ctx);
    c.n = u.size();
    auto [g, h] = pool_clip_tokens(out, c.n);
    return matcher.forward(g, h, c.matcher);
  }

  DualRepresentation<T> encode(const Mat<T>& features, const SampledClipSet& u, const SampledClipSet& r, Cache& c,
                               const nn::Context& ctx) const {
    project(features, c);
    return encode_projected(u, r, c, ctx);
  }

  /// Returns d(projected audio).
  Mat<T> backward_encode(const DualRepresentation<T>& d_rep, const Cache& c) {
    auto [dg, dh] = matcher.backward(d_rep, c.matcher);
    return stream.backward_encode(pool_clip_tokens_backward(dg, dh, c.n), c.stream);
  }

  void backward_project(const Mat<T>& d_projected, const Cache& c) { stream.backward_project(d_projected, c.stream); }

  template <typename F>
  void for_each_param(F&& f) {
    stream.for_each_param(f);
    matcher.for_each_param(f);
    detector.for_each_param(f);
  }

  ClipStream<T> stream;
  StreamMatcher<T> matcher;
  AnomalyDetector<T> detector;
};

}  // namespace alan

#pragma once

// Registered loss paths for finite-difference checking. Each path builds a
// small random 64-bit instance from a seed and checks every parameter it
// touches (large tensors are sub-sampled when `max_entries` is set).

#include <functional>
#include <string>
#include <vector>

#include "alan/alignment.hpp"
#include "alan/datapack.hpp"
#include "alan/detector.hpp"
#include "alan/model.hpp"
#include "alan/nn/gradcheck.hpp"
#include "alan/nn/layers.hpp"
#include "alan/vpmpm.hpp"

namespace alan::gradsuite {

struct Options {
  double tolerance = 1e-4;
  std::size_t max_entries = 0;        // per tensor in layer-level paths; 0 = all
  std::size_t model_max_entries = 12;  // per tensor in whole-model paths
};

struct CaseResult {
  std::string path;
  std::uint64_t seed = 0;
  nn::GradCheckReport report;
};

namespace detail {

inline MatD random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline nn::GradCheckOptions check_opts(const Options& o, std::uint64_t seed, std::size_t entries) {
  nn::GradCheckOptions g;
  g.tolerance = o.tolerance;
  g.max_entries_per_tensor = entries;
  g.seed = seed;
  return g;
}

/// loss = sum(out .* probe) for a module exposing forward/backward on one input.
template <typename Module, typename Fwd, typename Bwd>
nn::GradCheckReport probe_check(Module& m, Fwd fwd, Bwd bwd, const MatD& probe, const nn::GradCheckOptions& opts) {
  auto params = nn::collect_params(m);
  return nn::grad_check(
      params,
      [&](bool backward) {
        const MatD out = fwd();
        if (backward) bwd(probe);
        return out.cwiseProduct(probe).sum();
      },
      opts);
}

}  // namespace detail

inline nn::GradCheckReport check_linear(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::Linear<double> l("linear", 5, 4);
  l.init(rng);
  l.bias.value = detail::random_mat(rng, 1, 4, 0.1);
  const MatD x = detail::random_mat(rng, 3, 5);
  typename nn::Linear<double>::Cache c;
  return detail::probe_check(
      l, [&] { return l.forward(x, c); }, [&](const MatD& d) { l.backward(d, c); }, detail::random_mat(rng, 3, 4),
      detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_layer_norm(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::LayerNorm<double> l("norm", 6);
  l.gamma.value = MatD::Ones(1, 6) + detail::random_mat(rng, 1, 6, 0.2);
  l.beta.value = detail::random_mat(rng, 1, 6, 0.2);
  const MatD x = detail::random_mat(rng, 4, 6);
  typename nn::LayerNorm<double>::Cache c;
  return detail::probe_check(
      l, [&] { return l.forward(x, c); }, [&](const MatD& d) { l.backward(d, c); }, detail::random_mat(rng, 4, 6),
      detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_attention(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::MultiHeadAttention<double> a("attn", 8, 2);
  a.init(rng);
  const MatD xq = detail::random_mat(rng, 3, 8), xkv = detail::random_mat(rng, 5, 8);
  typename nn::MultiHeadAttention<double>::Cache c;
  return detail::probe_check(
      a, [&] { return a.forward(xq, xkv, c); }, [&](const MatD& d) { a.backward(d, c); },
      detail::random_mat(rng, 3, 8), detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_encoder_layer(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::EncoderLayer<double> l("enc", 8, 2, 12, 0.2);
  l.init(rng);
  const MatD x = detail::random_mat(rng, 4, 8);
  typename nn::EncoderLayer<double>::Cache c;
  const Rng drop(mix_seed(seed, 7));
  return detail::probe_check(
      l,
      [&] {
        Rng r = drop;  // same dropout mask on every evaluation
        return l.forward(x, c, nn::Context{Mode::train, &r});
      },
      [&](const MatD& d) { l.backward(d, c); }, detail::random_mat(rng, 4, 8),
      detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_cross_attention(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::CrossAttentionBlock<double> l("cross", 8, 2, 0.0);
  l.init(rng);
  const MatD q = detail::random_mat(rng, 4, 8), kv = detail::random_mat(rng, 6, 8);
  typename nn::CrossAttentionBlock<double>::Cache c;
  return detail::probe_check(
      l, [&] { return l.forward(q, kv, c, nn::Context{}); }, [&](const MatD& d) { l.backward(d, c); },
      detail::random_mat(rng, 4, 8), detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_decoder_layer(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::DecoderLayer<double> l("dec", 8, 2, 12, 0.0);
  l.init(rng);
  const MatD x = detail::random_mat(rng, 4, 8), mem = detail::random_mat(rng, 6, 8);
  typename nn::DecoderLayer<double>::Cache c;
  return detail::probe_check(
      l, [&] { return l.forward(x, mem, c, nn::Context{}); }, [&](const MatD& d) { l.backward(d, c); },
      detail::random_mat(rng, 4, 8), detail::check_opts(o, seed, o.max_entries));
}

inline nn::GradCheckReport check_gated_embedding(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  nn::GatedEmbeddingUnit<double> g("geu", 6, 5);
  g.init(rng);
  g.fc.bias.value = detail::random_mat(rng, 1, 5, 0.1);
  g.gate_fc.bias.value = detail::random_mat(rng, 1, 5, 0.1);
  const MatD x = detail::random_mat(rng, 3, 6);
  typename nn::GatedEmbeddingUnit<double>::Cache c;
  return detail::probe_check(
      g, [&] { return g.forward(x, c); }, [&](const MatD& d) { g.backward(d, c); }, detail::random_mat(rng, 3, 5),
      detail::check_opts(o, seed, o.max_entries));
}

/// BCE(topk(detector(x)), y) on T <= 32 clips.
inline nn::GradCheckReport check_detector_topk(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  DetectorConfig cfg;
  cfg.widths = {8, 4, 1};
  cfg.kernel = 7;
  cfg.dropout = 0.6;
  AnomalyDetector<double> det("det", 5, cfg);
  det.init(rng);
  const auto T = static_cast<Eigen::Index>(16 + rng.index(17));
  const MatD x = detail::random_mat(rng, T, 5);
  const int label = static_cast<int>(rng.index(2));
  const Rng drop(mix_seed(seed, 11));
  auto params = nn::collect_params(det);
  return nn::grad_check(
      params,
      [&](bool backward) {
        Rng r = drop;
        typename AnomalyDetector<double>::Cache c;
        const MatD s = det.forward(x, c, nn::Context{Mode::train, &r});
        const auto top = topk_aggregate(s);
        const double loss = bce_loss(top.value, label);
        if (backward) {
          MatD d = MatD::Zero(T, 1);
          const double g = bce_grad(top.value, label) / static_cast<double>(top.indices.size());
          for (auto i : top.indices) d(static_cast<Eigen::Index>(i), 0) += g;
          det.backward(d, c);
        }
        return loss;
      },
      detail::check_opts(o, seed, o.max_entries));
}

/// Prompting decoder + vocabulary head + masked cross-entropy, both passes.
inline nn::GradCheckReport check_vpmpm(std::uint64_t seed, const Options& o) {
  Rng rng(seed);
  MaskedPhraseModel<double> m("mpm", 8, 2, 12, 10, 0.0);
  m.init(rng);
  Caption cap;
  cap.tokens = {0, 3, 4, 7, 1, 2, 9};
  cap.phrases = {{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}, {5, 7, PhraseKind::noun_phrase}};
  const MatD words = detail::random_mat(rng, 7, 8), frames = detail::random_mat(rng, 6, 8);
  const Rng mask_rng(mix_seed(seed, 13));
  auto params = nn::collect_params(m);
  return nn::grad_check(
      params,
      [&](bool backward) {
        Rng r = mask_rng;
        typename MaskedPhraseModel<double>::Cache c;
        const double loss = m.forward(words, frames, cap, MaskMode::phrases, r, c, nn::Context{});
        if (backward) m.backward(1.0, c);
        return loss;
      },
      detail::check_opts(o, seed, o.max_entries));
}

/// A tiny corpus and model for whole-model paths.
struct ModelInstance {
  CorpusManifest corpus;
  AlanModel<double> model;
  std::vector<ItemSamples> samples;
  std::vector<const PairedItem*> batch;
};

inline ModelInstance make_instance(std::uint64_t seed, QueryModality modality) {
  SyntheticConfig sc;
  sc.n_pairs = 3;
  sc.T = 10;
  sc.d_in = 4;
  sc.vocab_size = synthetic_min_vocab(sc.n_pairs);
  sc.seed = seed;
  sc.modality = modality;
  CorpusManifest corpus = generate_synthetic(sc);
  ModelConfig mc;
  mc.encoder.d_model = 8;
  mc.encoder.n_heads = 2;
  mc.encoder.ff_hidden = 12;
  mc.encoder.dropout = 0.1;
  mc.encoder.max_positions = 16;
  mc.detector.widths = {6, 4, 1};
  mc.adapt_to(corpus);
  ModelInstance inst{std::move(corpus), AlanModel<double>(mc, 0.5), {}, {}};
  inst.model.init(mix_seed(seed, 17));
  SamplingConfig s;
  s.n = 3;
  Rng rng(mix_seed(seed, 19));
  for (const auto& item : inst.corpus.items) {
    inst.samples.push_back(inst.model.plan_samples(item, s, rng));
    inst.batch.push_back(&item);
  }
  return inst;
}

inline nn::GradCheckReport check_model(std::uint64_t seed, const Options& o, QueryModality modality,
                                       const LossConfig& lc, Mode mode) {
  ModelInstance inst = make_instance(seed, modality);
  auto params = inst.model.params();
  const Rng drop(mix_seed(seed, 23)), mask(mix_seed(seed, 29));
  return nn::grad_check(
      params,
      [&](bool backward) {
        return static_cast<double>(
            inst.model.batch_loss(inst.batch, inst.samples, lc, mode, drop, mask, backward).total);
      },
      detail::check_opts(o, seed, o.model_max_entries));
}

/// Ranking loss over the encoders' fused similarity (topk and mpm weights 0).
inline nn::GradCheckReport check_alignment(std::uint64_t seed, const Options& o) {
  LossConfig lc;
  lc.lambda_topk = 0.0;
  lc.lambda_mpm = 0.0;
  lc.margin = 0.3;  // keeps most hinges active on an untrained model
  return check_model(seed, o, QueryModality::text, lc, Mode::eval);
}

inline nn::GradCheckReport check_total_text(std::uint64_t seed, const Options& o) {
  LossConfig lc;
  lc.lambda_topk = 0.5;
  lc.lambda_mpm = 0.2;
  lc.margin = 0.3;
  return check_model(seed, o, QueryModality::text, lc, Mode::train);
}

inline nn::GradCheckReport check_total_audio(std::uint64_t seed, const Options& o) {
  LossConfig lc;
  lc.lambda_topk = 0.5;
  lc.margin = 0.3;
  return check_model(seed, o, QueryModality::audio, lc, Mode::train);
}

struct Path {
  std::string name;
  std::function<nn::GradCheckReport(std::uint64_t, const Options&)> run;
};

inline std::vector<Path> registered_paths() {
  return {{"linear", check_linear},
          {"layer_norm", check_layer_norm},
          {"multi_head_attention", check_attention},
          {"encoder_layer", check_encoder_layer},
          {"cross_attention_block", check_cross_attention},
          {"decoder_layer", check_decoder_layer},
          {"gated_embedding_unit", check_gated_embedding},
          {"detector_topk_bce", check_detector_topk},
          {"vpmpm_decoder_mpm", check_vpmpm},
          {"encoders_alignment_ranking", check_alignment},
          {"total_loss_text", check_total_text},
          {"total_loss_audio", check_total_audio}};
}

}  // namespace alan::gradsuite

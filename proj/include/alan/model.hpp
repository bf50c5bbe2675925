#pragma once

// The full retrieval model: video encoder (with its anomaly detector), a text
// or audio query encoder, the masked-phrase pretext head (text only) and the
// alignment weight heads, plus the joint objective
//   L_total = L_align + lambda1 * L_topk + lambda2 * L_mpm.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alan/alignment.hpp"
#include "alan/core.hpp"
#include "alan/datapack.hpp"
#include "alan/detector.hpp"
#include "alan/encoders.hpp"
#include "alan/nn/checkpoint.hpp"
#include "alan/sampler.hpp"
#include "alan/vpmpm.hpp"

namespace alan {

struct ModelConfig {
  QueryModality modality = QueryModality::text;
  Eigen::Index d_object = 8;
  Eigen::Index d_motion = 8;
  Eigen::Index d_audio = 8;
  Eigen::Index vocab_size = 64;
  EncoderConfig encoder;
  DetectorConfig detector;

  void validate() const {
    encoder.validate();
    detector.validate();
    if (d_object < 1 || d_motion < 1 || d_audio < 1) throw ValidationError("feature widths must be positive");
    if (modality == QueryModality::text && vocab_size < 1) throw ValidationError("vocabulary must be non-empty");
  }

  /// Widths and vocabulary taken from a corpus; everything else unchanged.
  void adapt_to(const CorpusManifest& m) {
    modality = m.modality;
    if (m.items.empty()) return;
    d_object = static_cast<Eigen::Index>(m.items.front().object.dim());
    d_motion = static_cast<Eigen::Index>(m.items.front().motion.dim());
    if (m.items.front().audio) d_audio = static_cast<Eigen::Index>(m.items.front().audio->dim());
    vocab_size = static_cast<Eigen::Index>(std::max<std::size_t>(1, m.vocabulary.size()));
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"modality", to_string(c.modality)},
       {"d_object", c.d_object},
       {"d_motion", c.d_motion},
       {"d_audio", c.d_audio},
       {"vocab_size", c.vocab_size},
       {"d_model", c.encoder.d_model},
       {"n_heads", c.encoder.n_heads},
       {"ff_hidden", c.encoder.ff_hidden},
       {"self_layers", c.encoder.self_layers},
       {"text_layers", c.encoder.text_layers},
       {"max_positions", c.encoder.max_positions},
       {"dropout", c.encoder.dropout},
       {"detector_widths", c.detector.widths},
       {"detector_kernel", c.detector.kernel},
       {"detector_dropout", c.detector.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.modality = parse_modality(j.value("modality", std::string(to_string(d.modality))));
  c.d_object = j.value("d_object", d.d_object);
  c.d_motion = j.value("d_motion", d.d_motion);
  c.d_audio = j.value("d_audio", d.d_audio);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.encoder.d_model = j.value("d_model", d.encoder.d_model);
  c.encoder.n_heads = j.value("n_heads", d.encoder.n_heads);
  c.encoder.ff_hidden = j.value("ff_hidden", d.encoder.ff_hidden);
  c.encoder.self_layers = j.value("self_layers", d.encoder.self_layers);
  c.encoder.text_layers = j.value("text_layers", d.encoder.text_layers);
  c.encoder.max_positions = j.value("max_positions", d.encoder.max_positions);
  c.encoder.dropout = j.value("dropout", d.encoder.dropout);
  c.detector.widths = j.value("detector_widths", d.detector.widths);
  c.detector.kernel = j.value("detector_kernel", d.detector.kernel);
  c.detector.dropout = j.value("detector_dropout", d.detector.dropout);
}

struct SamplingConfig {
  bool use_fixed = true;      // FS
  bool use_anomaly = true;    // AS
  FixedMode fixed_mode = FixedMode::uniform;
  double tau = kDefaultTemperature;
  std::size_t n = kDefaultSampleLength;

  void validate() const {
    if (!use_fixed && !use_anomaly) throw ValidationError("sampling: enable fixed-frame and/or anomaly-led sampling");
    if (!(tau > 0.0)) throw ValidationError("sampling: tau must be > 0");
    if (n < 1) throw ValidationError("sampling: N must be >= 1");
  }
};

/// The U and R blocks for one sequence.
/// FS+AS: U fixed-frame, R anomaly-led. FS only: U fixed-frame, R random
/// fixed-frame. AS only: two independent anomaly-led draws.
inline std::pair<SampledClipSet, SampledClipSet> sample_blocks(std::span<const double> scores,
                                                               const SamplingConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t T = scores.size();
  if (cfg.use_fixed && cfg.use_anomaly) {
    auto u = fixed_sample(T, cfg.n, cfg.fixed_mode, rng);
    auto r = roulette_select(selection_probabilities(scores, cfg.tau), cfg.n, rng);
    return {std::move(u), std::move(r)};
  }
  if (cfg.use_fixed) {
    auto u = fixed_sample(T, cfg.n, cfg.fixed_mode, rng);
    Rng independent = rng.derive("fixed-r");
    auto r = fixed_sample(T, cfg.n, FixedMode::random, independent);
    return {std::move(u), std::move(r)};
  }
  const auto dist = selection_probabilities(scores, cfg.tau);
  auto u = roulette_select(dist, cfg.n, rng);
  auto r = roulette_select(dist, cfg.n, rng);
  return {std::move(u), std::move(r)};
}

struct ItemSamples {
  SampledClipSet video_u, video_r;
  SampledClipSet audio_u, audio_r;  // audio corpora only
};

struct LossConfig {
  double lambda_topk = 0.1;
  double lambda_mpm = 0.01;
  double margin = kDefaultMargin;
  bool use_vpmpm = true;
  MaskMode mask_mode = MaskMode::phrases;
};

template <typename T>
struct LossBreakdown {
  T align{};
  T topk{};
  T mpm{};
  T total{};
};

/// align + lambda_topk * topk + lambda_mpm * mpm
template <typename T>
T combine_losses(T align, T topk, T mpm, const LossConfig& lc) {
  return align + static_cast<T>(lc.lambda_topk) * topk + static_cast<T>(lc.lambda_mpm) * mpm;
}

template <typename T>
class AlanModel {
 public:
  using Scalar = T;

  explicit AlanModel(ModelConfig cfg, double alpha = kDefaultAlpha) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& e = cfg_.encoder;
    video = VideoEncoder<T>("video", cfg_.d_object, cfg_.d_motion, e, cfg_.detector);
    if (cfg_.modality == QueryModality::text) {
      text = std::make_unique<TextEncoder<T>>("text", cfg_.vocab_size, e);
      mpm = std::make_unique<MaskedPhraseModel<T>>("mpm", e.d_model, e.n_heads, e.ff_hidden, cfg_.vocab_size,
                                                   e.dropout);
    } else {
      audio = std::make_unique<AudioEncoder<T>>("audio", cfg_.d_audio, e, cfg_.detector);
    }
    align = Alignment<T>("align", e.d_model, alpha);
  }

  AlanModel(const AlanModel& o) : video(o.video), align(o.align), cfg_(o.cfg_) {
    if (o.text) text = std::make_unique<TextEncoder<T>>(*o.text);
    if (o.mpm) mpm = std::make_unique<MaskedPhraseModel<T>>(*o.mpm);
    if (o.audio) audio = std::make_unique<AudioEncoder<T>>(*o.audio);
  }
  AlanModel& operator=(const AlanModel& o) {
    if (this != &o) *this = AlanModel(o);
    return *this;
  }
  AlanModel(AlanModel&&) noexcept = default;
  AlanModel& operator=(AlanModel&&) noexcept = default;

  void init(std::uint64_t seed) {
    Rng rng(seed);
    video.init(rng);
    if (text) text->init(rng);
    if (mpm) mpm->init(rng);
    if (audio) audio->init(rng);
    align.init(rng);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }

  template <typename F>
  void for_each_param(F&& f) {
    video.for_each_param(f);
    if (text) text->for_each_param(f);
    if (mpm) mpm->for_each_param(f);
    if (audio) audio->for_each_param(f);
    align.for_each_param(f);
  }

  nn::ParamList<T> params() { return nn::collect_params(*this); }

  std::string config_json() const {
    nlohmann::json j;
    j["model"] = cfg_;
    j["alpha"] = align.alpha();
    return j.dump();
  }

  void save(const std::filesystem::path& path) { nn::write_checkpoint(path, params(), config_json()); }

  static AlanModel load(const std::filesystem::path& path) {
    const auto contents = nn::read_checkpoint(path);
    const auto j = nlohmann::json::parse(contents.config_json);
    AlanModel m(j.at("model").get<ModelConfig>(), j.value("alpha", kDefaultAlpha));
    nn::load_params(m.params(), contents);
    return m;
  }

  // -------------------------------------------------------------------------
  // Inference (eval mode, one encoding per item)

  /// Eval-mode detector confidences for the video's clips.
  std::vector<double> video_scores(const PairedItem& item) const {
    typename ClipStream<T>::Cache c;
    const Mat<T> s = video.detector.score(video.object.project(item.object.data.cast<T>(), c));
    return to_doubles(s);
  }

  std::vector<double> audio_scores(const PairedItem& item) const {
    typename ClipStream<T>::Cache c;
    const Mat<T> s = audio->detector.score(audio->stream.project(item.audio->data.cast<T>(), c));
    return to_doubles(s);
  }

  /// Chooses U/R blocks for the item's video (and audio) from eval-mode
  /// detector scores.
  ItemSamples plan_samples(const PairedItem& item, const SamplingConfig& cfg, Rng& rng) const {
    ItemSamples s;
    std::tie(s.video_u, s.video_r) = sample_blocks(video_scores(item), cfg, rng);
    if (audio) std::tie(s.audio_u, s.audio_r) = sample_blocks(audio_scores(item), cfg, rng);
    return s;
  }

  DualRepresentation<T> encode_video(const PairedItem& item, const ItemSamples& s) const {
    typename VideoEncoder<T>::Cache c;
    return video.encode(item.object.data.cast<T>(), item.motion.data.cast<T>(), s.video_u, s.video_r, c, {}).rep;
  }

  DualRepresentation<T> encode_query(const PairedItem& item, const ItemSamples& s) const {
    if (text) {
      if (!item.caption) throw ValidationError("item '" + item.id + "' has no caption");
      typename TextEncoder<T>::Cache c;
      return text->encode(item.caption->tokens, c, {}).rep;
    }
    if (!item.audio) throw ValidationError("item '" + item.id + "' has no audio");
    typename AudioEncoder<T>::Cache c;
    return audio->encode(item.audio->data.cast<T>(), s.audio_u, s.audio_r, c, {});
  }

  // -------------------------------------------------------------------------
  // Training objective

  /// Forward (and optionally backward) of the joint loss over a batch with
  /// fixed sample plans. Gradients accumulate into Param::grad. The rngs are
  /// taken by value so repeated calls with equal arguments are identical.
  LossBreakdown<T> batch_loss(const std::vector<const PairedItem*>& batch, const std::vector<ItemSamples>& samples,
                              const LossConfig& lc, Mode mode, Rng dropout_rng, Rng mask_rng, bool backward) {
    const std::size_t B = batch.size();
    if (B < 2) throw ValidationError("batch_loss: need at least 2 pairs");
    if (samples.size() != B) throw ShapeError("batch_loss: one sample plan per item");
    const nn::Context ctx{mode, &dropout_rng};
    const bool with_mpm = mpm && lc.use_vpmpm && lc.lambda_mpm != 0.0;

    std::vector<ItemState> st(B);
    std::vector<DualRepresentation<T>> vreps(B), qreps(B);
    LossBreakdown<T> out;
    for (std::size_t i = 0; i < B; ++i) {
      const PairedItem& item = *batch[i];
      auto& s = st[i];
      const Mat<T>& po = video.project(item.object.data.cast<T>(), item.motion.data.cast<T>(), s.video);
      s.video_scores = video.detector.forward(po, s.video_det, ctx);
      s.video_topk = topk_aggregate(s.video_scores);
      T topk = bce_loss(s.video_topk.value, item.label);
      const auto venc = video.encode_projected(samples[i].video_u, samples[i].video_r, s.video, ctx);
      vreps[i] = venc.rep;
      if (text) {
        const auto tenc = text->encode(item.caption->tokens, s.text, ctx);
        qreps[i] = tenc.rep;
        if (with_mpm) out.mpm += mpm->forward(tenc.words, venc.frames, *item.caption, lc.mask_mode, mask_rng, s.mpm, ctx);
      } else {
        const Mat<T>& pa = audio->project(item.audio->data.cast<T>(), s.audio);
        s.audio_scores = audio->detector.forward(pa, s.audio_det, ctx);
        s.audio_topk = topk_aggregate(s.audio_scores);
        topk = (topk + bce_loss(s.audio_topk.value, item.label)) / T(2);
        qreps[i] = audio->encode_projected(samples[i].audio_u, samples[i].audio_r, s.audio, ctx);
      }
      out.topk += topk;
    }
    const T inv_b = T(1) / static_cast<T>(B);
    out.topk *= inv_b;
    out.mpm *= inv_b;
    typename Alignment<T>::Cache ac;
    const Mat<T> S = align.similarity_matrix(vreps, qreps, ac);
    out.align = ranking_loss(S, lc.margin);
    out.total = combine_losses(out.align, out.topk, out.mpm, lc);
    if (!std::isfinite(static_cast<double>(out.total))) {
      throw NumericError("non-finite loss (align " + std::to_string(static_cast<double>(out.align)) + ", topk " +
                         std::to_string(static_cast<double>(out.topk)) + ", mpm " +
                         std::to_string(static_cast<double>(out.mpm)) + ")");
    }
    if (!backward) return out;

    auto [dv, dq] = align.backward(ranking_loss_grad(S, lc.margin), ac);
    const T topk_scale = static_cast<T>(lc.lambda_topk) * inv_b * (audio ? T(0.5) : T(1));
    for (std::size_t i = 0; i < B; ++i) {
      const PairedItem& item = *batch[i];
      auto& s = st[i];
      std::optional<Mat<T>> d_frames;
      if (text) {
        std::optional<Mat<T>> d_words;
        if (with_mpm && !s.mpm.passes.empty()) {
          auto [dw, df] = mpm->backward(static_cast<T>(lc.lambda_mpm) * inv_b, s.mpm);
          d_words = std::move(dw);
          d_frames = std::move(df);
        }
        text->backward(dq[i], d_words ? &*d_words : nullptr, s.text);
      } else {
        Mat<T> dpa = audio->backward_encode(dq[i], s.audio);
        dpa += audio->detector.backward(topk_grad(s.audio_scores, s.audio_topk, item.label, topk_scale), s.audio_det);
        audio->backward_project(dpa, s.audio);
      }
      auto [dpo, dpm] = video.backward_encode(dv[i], d_frames ? &*d_frames : nullptr, s.video);
      dpo += video.detector.backward(topk_grad(s.video_scores, s.video_topk, item.label, topk_scale), s.video_det);
      video.backward_project(dpo, dpm, s.video);
    }
    return out;
  }

  VideoEncoder<T> video;
  std::unique_ptr<TextEncoder<T>> text;
  std::unique_ptr<MaskedPhraseModel<T>> mpm;
  std::unique_ptr<AudioEncoder<T>> audio;
  Alignment<T> align;

 private:
  struct ItemState {
    typename VideoEncoder<T>::Cache video;
    typename AnomalyDetector<T>::Cache video_det, audio_det;
    Mat<T> video_scores, audio_scores;
    TopK<T> video_topk, audio_topk;
    typename TextEncoder<T>::Cache text;
    typename MaskedPhraseModel<T>::Cache mpm;
    typename AudioEncoder<T>::Cache audio;
  };

  static std::vector<double> to_doubles(const Mat<T>& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(m.data()[i]);
    return v;
  }

  /// d(scale * bce(topk(scores), label)) / d scores.
  static Mat<T> topk_grad(const Mat<T>& scores, const TopK<T>& topk, int label, T scale) {
    Mat<T> d = Mat<T>::Zero(scores.rows(), 1);
    const T g = scale * bce_grad(topk.value, label) / static_cast<T>(topk.indices.size());
    for (auto idx : topk.indices) d(static_cast<Eigen::Index>(idx), 0) += g;
    return d;
  }

  ModelConfig cfg_;
};

}  // namespace alan

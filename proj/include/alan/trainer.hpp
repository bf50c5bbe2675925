#pragma once

// Joint training with Adam, per-epoch multiplicative learning-rate decay,
// global-norm gradient clipping and best-checkpoint selection by validation
// SumR; plus the dual-encoder retrieval evaluation used for validation.

#include <chrono>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alan/core.hpp"
#include "alan/datapack.hpp"
#include "alan/metrics.hpp"
#include "alan/model.hpp"

namespace alan {

enum class AlignmentMode { cls, avg, both };
enum class Precision { f32, f64 };

inline AlignmentMode parse_alignment_mode(const std::string& s) {
  if (s == "cls") return AlignmentMode::cls;
  if (s == "avg") return AlignmentMode::avg;
  if (s == "both") return AlignmentMode::both;
  throw ValidationError("unknown alignment mode '" + s + "'");
}
inline const char* to_string(AlignmentMode m) {
  return m == AlignmentMode::cls ? "cls" : m == AlignmentMode::avg ? "avg" : "both";
}

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 5e-5;
  double lr_decay = 0.95;
  double lambda_topk = 0.1;
  double lambda_mpm = 0.01;
  std::size_t epochs = 30;
  std::size_t patience = 5;  // epochs without a validation SumR gain
  std::uint64_t seed = 0;
  bool use_as = true;
  bool use_fs = true;
  bool use_vpmpm = true;
  MaskMode mask_mode = MaskMode::phrases;
  AlignmentMode alignment_mode = AlignmentMode::both;
  double alpha = kDefaultAlpha;
  double tau = kDefaultTemperature;
  std::size_t n = kDefaultSampleLength;
  FixedMode fixed_mode = FixedMode::uniform;
  double margin = kDefaultMargin;
  double grad_clip = 1.0;
  double stop_at_sum_r = 0;  // stop once validation SumR reaches this; 0 = off
  Precision precision = Precision::f32;
  ModelConfig model;

  [[nodiscard]] double effective_alpha() const {
    switch (alignment_mode) {
      case AlignmentMode::cls: return 1.0;
      case AlignmentMode::avg: return 0.0;
      case AlignmentMode::both: return alpha;
    }
    return alpha;
  }

  [[nodiscard]] SamplingConfig sampling() const { return {use_fs, use_as, fixed_mode, tau, n}; }

  [[nodiscard]] LossConfig loss() const { return {lambda_topk, lambda_mpm, margin, use_vpmpm, mask_mode}; }

  /// lr_0 * decay^epoch, epoch counted from 0.
  [[nodiscard]] double learning_rate_at(std::size_t epoch) const {
    return learning_rate * std::pow(lr_decay, static_cast<double>(epoch));
  }

  void validate() const {
    if (batch_size < 2) throw ValidationError("batch size must be >= 2 (the ranking loss needs negatives)");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("lr decay must lie in (0,1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
    if (!(margin >= 0.0)) throw ValidationError("margin must be >= 0");
    if (lambda_topk < 0.0 || lambda_mpm < 0.0) throw ValidationError("loss weights must be >= 0");
    sampling().validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"lr_decay", c.lr_decay},
       {"lambda_topk", c.lambda_topk},
       {"lambda_mpm", c.lambda_mpm},
       {"epochs", c.epochs},
       {"patience", c.patience},
       {"seed", c.seed},
       {"use_as", c.use_as},
       {"use_fs", c.use_fs},
       {"use_vpmpm", c.use_vpmpm},
       {"mask_mode", to_string(c.mask_mode)},
       {"alignment_mode", to_string(c.alignment_mode)},
       {"alpha", c.alpha},
       {"tau", c.tau},
       {"n", c.n},
       {"fixed_mode", c.fixed_mode == FixedMode::uniform ? "uniform" : "random"},
       {"margin", c.margin},
       {"grad_clip", c.grad_clip},
       {"stop_at_sum_r", c.stop_at_sum_r},
       {"precision", c.precision == Precision::f32 ? "f32" : "f64"},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"batch_size", "learning_rate", "lr_decay", "lambda_topk", "lambda_mpm",
                                           "epochs", "patience", "seed", "use_as", "use_fs", "use_vpmpm",
                                           "mask_mode", "alignment_mode", "alpha", "tau", "n", "fixed_mode",
                                           "margin", "grad_clip", "stop_at_sum_r", "precision", "model"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ValidationError("train config: unknown key '" + k + "'");
  }
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.lambda_topk = j.value("lambda_topk", d.lambda_topk);
  c.lambda_mpm = j.value("lambda_mpm", d.lambda_mpm);
  c.epochs = j.value("epochs", d.epochs);
  c.patience = j.value("patience", d.patience);
  c.seed = j.value("seed", d.seed);
  c.use_as = j.value("use_as", d.use_as);
  c.use_fs = j.value("use_fs", d.use_fs);
  c.use_vpmpm = j.value("use_vpmpm", d.use_vpmpm);
  c.mask_mode = parse_mask_mode(j.value("mask_mode", std::string("phrases")));
  c.alignment_mode = parse_alignment_mode(j.value("alignment_mode", std::string("both")));
  c.alpha = j.value("alpha", d.alpha);
  c.tau = j.value("tau", d.tau);
  c.n = j.value("n", d.n);
  const auto fm = j.value("fixed_mode", std::string("uniform"));
  if (fm != "uniform" && fm != "random") throw ValidationError("fixed_mode must be uniform|random");
  c.fixed_mode = fm == "uniform" ? FixedMode::uniform : FixedMode::random;
  c.margin = j.value("margin", d.margin);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.stop_at_sum_r = j.value("stop_at_sum_r", d.stop_at_sum_r);
  const auto prec = j.value("precision", std::string("f32"));
  if (prec != "f32" && prec != "f64") throw ValidationError("precision must be f32|f64");
  c.precision = prec == "f32" ? Precision::f32 : Precision::f64;
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
}

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(const nn::ParamList<T>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
      m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& g = params_[i]->grad;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      params_[i]->value.array() -=
          step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  [[nodiscard]] std::size_t steps() const { return t_; }

 private:
  nn::ParamList<T> params_;
  std::vector<Mat<T>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Encodes every item once (gallery and query sides independently) and
/// scores all pairs. Sampling randomness is keyed by (seed, item id).
template <typename T>
RetrievalReport evaluate(const AlanModel<T>& model, const CorpusManifest& corpus, const SamplingConfig& sampling,
                         std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const Rng root(mix_seed(seed, 0xe7a1));
  std::vector<DualRepresentation<double>> gallery, queries;
  std::vector<StreamWeights> weights;
  gallery.reserve(corpus.items.size());
  queries.reserve(corpus.items.size());
  auto to_double = [](const DualRepresentation<T>& r) {
    return DualRepresentation<double>{r.g_object.template cast<double>(), r.g_motion.template cast<double>(),
                                      r.h_object.template cast<double>(), r.h_motion.template cast<double>()};
  };
  for (const auto& item : corpus.items) {
    Rng rng = root.derive(item.id);
    const ItemSamples s = model.plan_samples(item, sampling, rng);
    gallery.push_back(to_double(model.encode_video(item, s)));
    const auto q = model.encode_query(item, s);
    weights.push_back(query_weights(model.align, q));
    queries.push_back(to_double(q));
  }
  const MatD S = build_similarity_matrix(gallery, queries, weights, model.align.alpha());
  std::vector<std::size_t> pairing(corpus.items.size());
  for (std::size_t i = 0; i < pairing.size(); ++i) pairing[i] = i;
  RetrievalReport report = rank_metrics(S, pairing);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double pairs = static_cast<double>(std::max<std::size_t>(1, corpus.items.size() * corpus.items.size()));
  report.seconds_per_pair = seconds / pairs;
  return report;
}

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0;
  double align = 0, topk = 0, mpm = 0, total = 0;  // means over the epoch's steps
  double validation_sum_r = 0;
};

template <typename T>
struct TrainResult {
  AlanModel<T> model;  // best by validation SumR
  std::vector<EpochLog> curve;
  std::size_t best_epoch = 0;
  double best_sum_r = -1;
  bool diverged = false;
  std::string diagnostics;
};

inline std::string format_curve(const std::vector<EpochLog>& curve) {
  std::ostringstream os;
  os << "# epoch        lr        align         topk          mpm        total   val_SumR\n";
  for (const auto& e : curve) {
    os << std::setw(7) << e.epoch << std::scientific << std::setprecision(3) << std::setw(11) << e.learning_rate
       << std::fixed << std::setprecision(6) << std::setw(13) << e.align << std::setw(13) << e.topk << std::setw(13)
       << e.mpm << std::setw(13) << e.total << std::setprecision(1) << std::setw(11) << e.validation_sum_r << "\n";
  }
  return os.str();
}

/// Splits a permutation into batches of `size`; a trailing singleton is
/// merged into the previous batch.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
  }
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

template <typename T>
TrainResult<T> train(const CorpusManifest& corpus, const TrainConfig& cfg_in,
                     const CorpusManifest* validation = nullptr, std::ostream* log = nullptr) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  validate(corpus);
  if (corpus.items.size() < 2) throw ValidationError("training needs at least 2 pairs");
  cfg.model.adapt_to(corpus);

  AlanModel<T> model(cfg.model, cfg.effective_alpha());
  model.init(mix_seed(cfg.seed, 0x1a17));
  const auto params = model.params();
  Adam<T> adam(params);
  RngStreams streams(cfg.seed);
  const SamplingConfig sampling = cfg.sampling();
  const LossConfig loss_cfg = cfg.loss();
  const CorpusManifest& val = validation ? *validation : corpus;

  TrainResult<T> result{model, {}, 0, -1.0, false, {}};
  std::size_t since_best = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(corpus.items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng = streams.data_order.derive(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);

    EpochLog log_entry;
    log_entry.epoch = epoch;
    log_entry.learning_rate = cfg.learning_rate_at(epoch);
    const auto batches = make_batches(order, cfg.batch_size);
    for (const auto& idx : batches) {
      std::vector<const PairedItem*> batch;
      std::vector<ItemSamples> samples;
      Rng sample_rng = streams.sampling.derive(step);
      for (auto i : idx) {
        batch.push_back(&corpus.items[i]);
        Rng item_rng = sample_rng.derive(corpus.items[i].id);
        samples.push_back(model.plan_samples(corpus.items[i], sampling, item_rng));
      }
      nn::zero_grads(params);
      LossBreakdown<T> lb;
      try {
        lb = model.batch_loss(batch, samples, loss_cfg, Mode::train, streams.dropout.derive(step),
                              streams.masking.derive(step), true);
      } catch (const NumericError& e) {
        result.diverged = true;
        result.diagnostics = "epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what();
        if (log) *log << "diverged: " << result.diagnostics << "\n";
        if (result.best_sum_r < 0) result.model = model;
        return result;
      }
      const double norm = nn::global_grad_norm(params);
      if (!std::isfinite(norm)) {
        result.diverged = true;
        result.diagnostics = "non-finite gradient at step " + std::to_string(step);
        if (result.best_sum_r < 0) result.model = model;
        return result;
      }
      if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
        const T scale = static_cast<T>(cfg.grad_clip / norm);
        for (auto* p : params) p->grad *= scale;
      }
      adam.step(log_entry.learning_rate);
      ++step;
      log_entry.align += static_cast<double>(lb.align);
      log_entry.topk += static_cast<double>(lb.topk);
      log_entry.mpm += static_cast<double>(lb.mpm);
      log_entry.total += static_cast<double>(lb.total);
    }
    const double nb = static_cast<double>(batches.size());
    log_entry.align /= nb;
    log_entry.topk /= nb;
    log_entry.mpm /= nb;
    log_entry.total /= nb;
    log_entry.validation_sum_r = evaluate(model, val, sampling, cfg.seed).sum_r;
    result.curve.push_back(log_entry);
    if (log) *log << format_curve({log_entry}).substr(format_curve({}).size()) << std::flush;

    if (log_entry.validation_sum_r > result.best_sum_r) {
      result.best_sum_r = log_entry.validation_sum_r;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
      if (cfg.stop_at_sum_r > 0.0 && result.best_sum_r >= cfg.stop_at_sum_r) break;
    } else if (++since_best > cfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace alan

#pragma once

// Masked phrase modeling with video prompts: one noun phrase (or verb phrase)
// of the contextual text is replaced by a shared learned mask vector, and a
// Transformer decoder layer that attends from text to the video's frame-level
// tokens predicts the masked tokens over the vocabulary.

#include <optional>
#include <vector>

#include "alan/core.hpp"
#include "alan/datapack.hpp"
#include "alan/nn/functional.hpp"
#include "alan/nn/layers.hpp"

namespace alan {

enum class MaskMode {
  phrases,  // one noun-phrase pass and one verb-phrase pass
  words,    // one token from inside a noun phrase, one from inside a verb phrase
  random,   // one uniformly random token
};

inline const char* to_string(MaskMode m) {
  switch (m) {
    case MaskMode::phrases: return "phrases";
    case MaskMode::words: return "words";
    case MaskMode::random: return "random";
  }
  return "?";
}

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "phrases") return MaskMode::phrases;
  if (s == "words") return MaskMode::words;
  if (s == "random") return MaskMode::random;
  throw ValidationError("unknown mask mode '" + s + "'");
}

template <typename T>
struct MaskedText {
  Mat<T> text;       // L x d with the masked rows replaced
  PhraseSpan span;   // masked range
  std::vector<int> targets;  // token ids at the masked positions
};

/// Replaces one uniformly chosen span of `kind` with the mask vector.
/// Returns nullopt when the caption has no span of that kind.
template <typename T>
std::optional<MaskedText<T>> mask_phrase(const Mat<T>& words, const Caption& caption, PhraseKind kind, Rng& rng,
                                         const RowVec<T>& mask_embedding) {
  std::vector<const PhraseSpan*> candidates;
  for (const auto& s : caption.phrases) {
    if (s.kind == kind) candidates.push_back(&s);
  }
  if (candidates.empty()) return std::nullopt;
  const PhraseSpan span = *candidates[candidates.size() == 1 ? 0 : rng.index(candidates.size())];
  MaskedText<T> out{words, span, {}};
  for (std::size_t i = span.start; i < span.end; ++i) {
    out.text.row(static_cast<Eigen::Index>(i)) = mask_embedding;
    out.targets.push_back(caption.tokens[i]);
  }
  return out;
}

/// Masks a single token position.
template <typename T>
MaskedText<T> mask_token(const Mat<T>& words, const Caption& caption, std::size_t position, PhraseKind kind,
                         const RowVec<T>& mask_embedding) {
  MaskedText<T> out{words, {position, position + 1, kind}, {caption.tokens[position]}};
  out.text.row(static_cast<Eigen::Index>(position)) = mask_embedding;
  return out;
}

/// Mean cross-entropy between row-softmaxed logits and one-hot targets.
template <typename T>
T mpm_loss(const Mat<T>& logits, const std::vector<int>& targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw ShapeError("mpm_loss: one target per row");
  if (targets.empty()) return T(0);
  T total{};
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw ValidationError("mpm_loss: target outside vocabulary");
    const T mx = logits.row(r).maxCoeff();
    const T lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, t);
  }
  return total / static_cast<T>(logits.rows());
}

template <typename T>
Mat<T> mpm_loss_grad(const Mat<T>& logits, const std::vector<int>& targets) {
  Mat<T> d = nn::softmax_rows(logits);
  for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, targets[static_cast<std::size_t>(r)]) -= T(1);
  return d / static_cast<T>(std::max<std::size_t>(1, targets.size()));
}

/// Prompting decoder (one decoder layer) + vocabulary head + mask vector.
template <typename T>
class MaskedPhraseModel {
 public:
  using Scalar = T;

  struct Pass {
    MaskedText<T> masked;
    typename nn::DecoderLayer<T>::Cache decoder;
    typename nn::Linear<T>::Cache head;
    Mat<T> logits;
    T loss{};
  };

  struct Cache {
    std::vector<Pass> passes;
    Eigen::Index text_rows = 0;
    Eigen::Index frame_rows = 0;
  };

  MaskedPhraseModel() = default;
  MaskedPhraseModel(const std::string& name, Eigen::Index d, Eigen::Index n_heads, Eigen::Index ff_hidden,
                    Eigen::Index vocab_size, double dropout)
      : mask(name + ".mask", 1, d),
        decoder(name + ".decoder", d, n_heads, ff_hidden, dropout),
        head(name + ".head", d, vocab_size) {}

  void init(Rng& rng) {
    nn::normal_init(mask, rng, 0.02);
    decoder.init(rng);
    head.init(rng);
  }

  /// Decodes one masked text against the video prompts and returns the
  /// logits at the masked positions.
  Mat<T> decode(const MaskedText<T>& masked, const Mat<T>& frames, Pass& pass, const nn::Context& ctx) const {
    const Mat<T> out = decoder.forward(masked.text, frames, pass.decoder, ctx);
    const auto len = static_cast<Eigen::Index>(masked.span.end - masked.span.start);
    return head.forward(out.middleRows(static_cast<Eigen::Index>(masked.span.start), len), pass.head);
  }

  /// Runs every pass required by `mode` and returns their mean loss (0 when
  /// no pass applies).
  T forward(const Mat<T>& words, const Mat<T>& frames, const Caption& caption, MaskMode mode, Rng& mask_rng,
            Cache& c, const nn::Context& ctx) const {
    c.passes.clear();
    c.text_rows = words.rows();
    c.frame_rows = frames.rows();
    const RowVec<T> m = mask.value.row(0);
    std::vector<MaskedText<T>> plans;
    switch (mode) {
      case MaskMode::phrases:
        for (PhraseKind k : {PhraseKind::noun_phrase, PhraseKind::verb_phrase}) {
          if (auto mt = mask_phrase(words, caption, k, mask_rng, m)) plans.push_back(std::move(*mt));
        }
        break;
      case MaskMode::words:
        for (PhraseKind k : {PhraseKind::noun_phrase, PhraseKind::verb_phrase}) {
          std::vector<std::size_t> positions;
          for (const auto& s : caption.phrases) {
            if (s.kind != k) continue;
            for (std::size_t i = s.start; i < s.end; ++i) positions.push_back(i);
          }
          if (positions.empty()) continue;
          plans.push_back(mask_token(words, caption, positions[mask_rng.index(positions.size())], k, m));
        }
        break;
      case MaskMode::random:
        plans.push_back(mask_token(words, caption, mask_rng.index(caption.tokens.size()), PhraseKind::noun_phrase, m));
        break;
    }
    if (plans.empty()) return T(0);
    T total{};
    for (auto& plan : plans) {
      Pass pass;
      pass.masked = std::move(plan);
      pass.logits = decode(pass.masked, frames, pass, ctx);
      pass.loss = mpm_loss(pass.logits, pass.masked.targets);
      total += pass.loss;
      c.passes.push_back(std::move(pass));
    }
    return total / static_cast<T>(c.passes.size());
  }

  /// Returns (d words, d frames) for an upstream gradient on the mean loss.
  std::pair<Mat<T>, Mat<T>> backward(T upstream, const Cache& c) {
    Mat<T> d_words = Mat<T>::Zero(c.text_rows, mask.value.cols());
    Mat<T> d_frames = Mat<T>::Zero(c.frame_rows, mask.value.cols());
    if (c.passes.empty()) return {d_words, d_frames};
    const T scale = upstream / static_cast<T>(c.passes.size());
    for (const auto& pass : c.passes) {
      const Mat<T> dlogits = mpm_loss_grad(pass.logits, pass.masked.targets) * scale;
      const auto start = static_cast<Eigen::Index>(pass.masked.span.start);
      const auto len = static_cast<Eigen::Index>(pass.masked.span.end - pass.masked.span.start);
      Mat<T> d_out = Mat<T>::Zero(c.text_rows, mask.value.cols());
      d_out.middleRows(start, len) = head.backward(dlogits, pass.head);
      auto [d_text, d_mem] = decoder.backward(d_out, pass.decoder);
      d_frames += d_mem;
      for (Eigen::Index r = 0; r < c.text_rows; ++r) {
        if (r >= start && r < start + len) {
          mask.grad.row(0) += d_text.row(r);
        } else {
          d_words.row(r) += d_text.row(r);
        }
      }
    }
    return {std::move(d_words), std::move(d_frames)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(mask);
    decoder.for_each_param(f);
    head.for_each_param(f);
  }

  nn::Param<T> mask;
  nn::DecoderLayer<T> decoder;
  nn::Linear<T> head;
};

}  // namespace alan

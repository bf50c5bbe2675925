#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "alan/trainer.hpp"
#include "alan/vpmpm.hpp"

using namespace alan;

namespace {

MatD randn(Rng& rng, Eigen::Index r, Eigen::Index c) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Caption caption_with(std::vector<PhraseSpan> spans, std::size_t len = 8) {
  Caption c;
  for (std::size_t i = 0; i < len; ++i) c.tokens.push_back(static_cast<int>(i));
  c.phrases = std::move(spans);
  return c;
}

void ablate_prompts(MaskedPhraseModel<double>& m) {
  m.decoder.cross_attention.value.weight.value.setZero();
  m.decoder.cross_attention.value.bias.value.setZero();
}

}  // namespace

TEST(MaskPhrase, SingleSpanChosenDeterministically) {
  Rng rng(1);
  const auto cap = caption_with({{2, 4, PhraseKind::noun_phrase}, {5, 6, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 4);
  const RowVec<double> mask = randn(rng, 1, 4);
  for (int i = 0; i < 20; ++i) {
    const auto m = mask_phrase(words, cap, PhraseKind::noun_phrase, rng, mask);
    ASSERT_TRUE(m);
    EXPECT_EQ(m->span, (PhraseSpan{2, 4, PhraseKind::noun_phrase}));
    EXPECT_EQ(m->targets, (std::vector<int>{2, 3}));
  }
}

TEST(MaskPhrase, MaskedRowsEqualMaskAndOthersUntouched) {
  Rng rng(2);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}, {3, 5, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 4);
  const RowVec<double> mask = randn(rng, 1, 4);
  const auto m = mask_phrase(words, cap, PhraseKind::verb_phrase, rng, mask);
  ASSERT_TRUE(m);
  for (Eigen::Index r = 0; r < 8; ++r) {
    if (r >= 3 && r < 5) {
      EXPECT_EQ(RowVec<double>(m->text.row(r)), mask);
    } else {
      EXPECT_EQ(m->text.row(r), words.row(r));
    }
  }
}

TEST(MaskPhrase, MissingKindGivesNothing) {
  Rng rng(3);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}});
  EXPECT_FALSE(mask_phrase(randn(rng, 8, 4), cap, PhraseKind::verb_phrase, rng, RowVec<double>(RowVec<double>::Zero(4))));
}

TEST(MaskPhrase, UniformOverFourSpans) {
  Rng rng(4);
  const auto cap = caption_with({{0, 1, PhraseKind::noun_phrase},
                                 {2, 3, PhraseKind::noun_phrase},
                                 {4, 6, PhraseKind::noun_phrase},
                                 {6, 8, PhraseKind::noun_phrase}});
  const MatD words = MatD::Zero(8, 2);
  const RowVec<double> mask = RowVec<double>::Ones(2);
  std::map<std::size_t, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[mask_phrase(words, cap, PhraseKind::noun_phrase, rng, mask)->span.start];
  const double sd = std::sqrt(n * 0.25 * 0.75);
  ASSERT_EQ(counts.size(), 4u);
  for (const auto& [start, c] : counts) EXPECT_LT(std::abs(c - 2500.0), 3 * sd) << "span at " << start;
}

TEST(MpmLoss, WorkedValues) {
  const MatD uniform = MatD::Zero(3, 16);
  EXPECT_NEAR(mpm_loss(uniform, {0, 5, 15}), std::log(16.0), 1e-15);
  EXPECT_NEAR(std::log(16.0), 2.7725887222397811, 1e-15);
  MatD confident = MatD::Constant(2, 16, -50.0);
  confident(0, 3) = 50.0;
  confident(1, 9) = 50.0;
  EXPECT_LT(mpm_loss(confident, {3, 9}), 1e-40);
  EXPECT_GE(mpm_loss(confident, {3, 9}), 0.0);
  EXPECT_THROW(mpm_loss(uniform, {0, 1}), ShapeError);
  EXPECT_THROW(mpm_loss(uniform, {0, 1, 16}), ValidationError);
}

TEST(PromptingDecoder, MissingVerbSpanGivesNounPassAlone) {
  Rng rng(5);
  MaskedPhraseModel<double> m("m", 8, 2, 16, 10, 0.0);
  m.init(rng);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}});
  const MatD words = randn(rng, 8, 8), frames = randn(rng, 5, 8);
  Rng r1(1), r2(1);
  typename MaskedPhraseModel<double>::Cache c;
  const double total = m.forward(words, frames, cap, MaskMode::phrases, r1, c, {});
  ASSERT_EQ(c.passes.size(), 1u);
  const auto masked = mask_phrase(words, cap, PhraseKind::noun_phrase, r2, RowVec<double>(m.mask.value.row(0)));
  typename MaskedPhraseModel<double>::Pass pass;
  EXPECT_NEAR(total, mpm_loss(m.decode(*masked, frames, pass, {}), masked->targets), 1e-14);
  const auto none = caption_with({});
  EXPECT_EQ(m.forward(words, frames, none, MaskMode::phrases, r1, c, {}), 0.0);
}

TEST(PromptingDecoder, AveragesNounAndVerbPasses) {
  Rng rng(6);
  MaskedPhraseModel<double> m("m", 8, 2, 16, 10, 0.0);
  m.init(rng);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 8), frames = randn(rng, 5, 8);
  Rng r(1);
  typename MaskedPhraseModel<double>::Cache c;
  const double total = m.forward(words, frames, cap, MaskMode::phrases, r, c, {});
  ASSERT_EQ(c.passes.size(), 2u);
  EXPECT_NEAR(total, (c.passes[0].loss + c.passes[1].loss) / 2.0, 1e-15);
  EXPECT_EQ(c.passes[0].masked.span.kind, PhraseKind::noun_phrase);
  EXPECT_EQ(c.passes[1].masked.span.kind, PhraseKind::verb_phrase);
}

TEST(PromptingDecoder, WordAndRandomModesMaskOneToken) {
  Rng rng(7);
  MaskedPhraseModel<double> m("m", 8, 2, 16, 10, 0.0);
  m.init(rng);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 8), frames = randn(rng, 5, 8);
  Rng r(2);
  typename MaskedPhraseModel<double>::Cache c;
  m.forward(words, frames, cap, MaskMode::words, r, c, {});
  ASSERT_EQ(c.passes.size(), 2u);
  for (const auto& p : c.passes) EXPECT_EQ(p.masked.span.end - p.masked.span.start, 1u);
  EXPECT_EQ(c.passes[1].masked.span.start, 3u);
  m.forward(words, frames, cap, MaskMode::random, r, c, {});
  ASSERT_EQ(c.passes.size(), 1u);
  EXPECT_EQ(c.passes[0].masked.targets.size(), 1u);
}

TEST(PromptingDecoder, AblatedCrossAttentionIgnoresVideo) {
  Rng rng(8);
  MaskedPhraseModel<double> m("m", 8, 2, 16, 10, 0.0);
  m.init(rng);
  ablate_prompts(m);
  const auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 8);
  Rng r1(1), r2(1);
  typename MaskedPhraseModel<double>::Cache c1, c2;
  const double a = m.forward(words, randn(rng, 5, 8), cap, MaskMode::phrases, r1, c1, {});
  const double b = m.forward(words, randn(rng, 9, 8) * 10.0, cap, MaskMode::phrases, r2, c2, {});
  EXPECT_NEAR(a, b, 1e-12);
  EXPECT_LT((c1.passes[0].logits - c2.passes[0].logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PromptingDecoder, EvalDeterministicAndUnmaskedTargetsIrrelevant) {
  Rng rng(9);
  MaskedPhraseModel<double> m("m", 8, 2, 16, 10, 0.3);
  m.init(rng);
  auto cap = caption_with({{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}});
  const MatD words = randn(rng, 8, 8), frames = randn(rng, 5, 8);
  Rng r1(1), r2(1);
  typename MaskedPhraseModel<double>::Cache c;
  const double a = m.forward(words, frames, cap, MaskMode::phrases, r1, c, {});
  cap.tokens[0] = 9;
  cap.tokens[6] = 8;
  const double b = m.forward(words, frames, cap, MaskMode::phrases, r2, c, {});
  EXPECT_EQ(a, b);
}

TEST(PromptingDecoder, LearnsFromVideoBetterThanAblatedControl) {
  // the masked token is recoverable only from the frames: every caption
  // has identical text features, and the frames carry a code of the target
  const Eigen::Index d = 8, vocab = 8;
  Rng data_rng(10);
  const MatD codes = randn(data_rng, vocab, d) * 2.0;
  const MatD words = randn(data_rng, 4, d);
  struct Example {
    Caption cap;
    MatD frames;
  };
  std::vector<Example> data;
  for (int i = 0; i < 32; ++i) {
    const int target = 4 + static_cast<int>(data_rng.index(4));
    Caption cap;
    cap.tokens = {0, target, 1, 2};
    cap.phrases = {{1, 2, PhraseKind::noun_phrase}};
    MatD frames = randn(data_rng, 5, d) * 0.3;
    frames.rowwise() += codes.row(target);
    data.push_back({cap, frames});
  }
  auto train = [&](bool ablated) {
    Rng rng(11);
    MaskedPhraseModel<double> m("m", d, 2, 16, vocab, 0.0);
    m.init(rng);
    if (ablated) ablate_prompts(m);
    auto params = nn::collect_params(m);
    Adam<double> adam(params);
    double last = 0;
    for (int epoch = 0; epoch < 40; ++epoch) {
      last = 0;
      for (const auto& ex : data) {
        nn::zero_grads(params);
        Rng mr(1);
        typename MaskedPhraseModel<double>::Cache c;
        last += m.forward(words, ex.frames, ex.cap, MaskMode::phrases, mr, c, {});
        m.backward(1.0, c);
        if (ablated) {
          m.decoder.cross_attention.value.weight.grad.setZero();
          m.decoder.cross_attention.value.bias.grad.setZero();
        }
        adam.step(3e-3);
      }
      last /= static_cast<double>(data.size());
    }
    return last;
  };
  const double with_video = train(false);
  const double control = train(true);
  EXPECT_LT(with_video, 0.5 * control) << "with video " << with_video << " control " << control;
  EXPECT_GT(control, 0.9);  // close to ln 4 when the target cannot be seen
}

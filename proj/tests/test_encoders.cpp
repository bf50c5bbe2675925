#include <gtest/gtest.h>

#include "alan/encoders.hpp"
#include "alan/nn/gradcheck.hpp"

using namespace alan;

namespace {

MatD randn(Rng& rng, Eigen::Index r, Eigen::Index c) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

EncoderConfig small() {
  EncoderConfig e;
  e.d_model = 8;
  e.n_heads = 2;
  e.ff_hidden = 16;
  e.max_positions = 64;
  e.dropout = 0.1;
  return e;
}

DetectorConfig small_detector() {
  DetectorConfig d;
  d.widths = {8, 4, 1};
  return d;
}

SampledClipSet clips(std::vector<std::size_t> idx, SampleMethod m = SampleMethod::uniform_fixed) {
  return {std::move(idx), m};
}

void zero_embeddings(ClipStream<double>& s) {
  s.positions.table.value.setZero();
  s.sequences.table.value.setZero();
}

double max_abs_diff(const MatD& a, const MatD& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(ClipTokens, LayoutAndClsMean) {
  Rng rng(1);
  const MatD proj = randn(rng, 10, 4);
  const auto u = clips({1, 4, 9}), r = clips({7, 7, 2}, SampleMethod::anomaly_led);
  const auto seq = assemble_clip_tokens(proj, u, r, 512);
  ASSERT_EQ(seq.tokens.rows(), 8);
  const RowVec<double> u_mean = (proj.row(0) + proj.row(3) + proj.row(8)) / 3.0;
  const RowVec<double> r_mean = (proj.row(6) + proj.row(6) + proj.row(1)) / 3.0;
  EXPECT_LT((seq.tokens.row(0) - u_mean).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((seq.tokens.row(4) - r_mean).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(seq.tokens.row(2), proj.row(3));
  EXPECT_EQ(seq.tokens.row(5), proj.row(6));
  EXPECT_EQ(seq.positions, (std::vector<Eigen::Index>{0, 1, 4, 9, 0, 7, 7, 2}));
  EXPECT_EQ(seq.sequence_ids, (std::vector<Eigen::Index>{0, 0, 0, 0, 1, 1, 1, 1}));
}

TEST(ClipTokens, PositionsCappedAtMaximum) {
  const MatD proj = MatD::Ones(20, 2);
  const auto seq = assemble_clip_tokens(proj, clips({20}), clips({3}), 8);
  EXPECT_EQ(seq.positions[1], 7);
  EXPECT_EQ(seq.positions[3], 3);
}

TEST(ClipTokens, OutOfRangeIndexRejected) {
  const MatD proj = MatD::Ones(5, 2);
  EXPECT_THROW(assemble_clip_tokens(proj, clips({6}), clips({1}), 8), ShapeError);
  EXPECT_THROW(assemble_clip_tokens(proj, clips({1, 2}), clips({1}), 8), ShapeError);
}

TEST(Pooling, AverageExcludesClsRows) {
  MatD out(6, 2);  // N = 2
  out << 100, 100,  //
      1, 2,         //
      3, 4,         //
      -50, 7,       //
      5, 6,         //
      7, 8;
  const auto [g, h] = pool_clip_tokens(out, 2);
  EXPECT_DOUBLE_EQ(g(0), 25.0);
  EXPECT_DOUBLE_EQ(g(1), 53.5);
  EXPECT_DOUBLE_EQ(h(0), (2.0 + 6.0) / 2.0);
  EXPECT_DOUBLE_EQ(h(1), (3.0 + 7.0) / 2.0);
}

TEST(VideoEncoder, ConstantEqualStreamsGiveIdenticalTokens) {
  Rng rng(2);
  VideoEncoder<double> enc("v", 3, 3, small(), small_detector());
  enc.init(rng);
  zero_embeddings(enc.object);
  zero_embeddings(enc.motion);
  const MatD x = MatD::Constant(6, 3, 0.7);
  typename VideoEncoder<double>::Cache c;
  const auto out = enc.encode(x, x, clips({2}), clips({5}, SampleMethod::anomaly_led), c, {});
  for (Eigen::Index r = 1; r < 4; ++r) {
    EXPECT_LT((c.out_object.row(r) - c.out_object.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((c.out_motion.row(r) - c.out_motion.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_LT((out.rep.g_object - out.rep.h_object).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.rep.g_motion - out.rep.h_motion).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(out.frames.rows(), 4);
}

TEST(VideoEncoder, SequenceTagsOnlyMatterThroughTheTable) {
  Rng rng(3);
  VideoEncoder<double> enc("v", 4, 4, small(), small_detector());
  enc.init(rng);
  const MatD xo = randn(rng, 9, 4), xm = randn(rng, 9, 4);
  const auto u = clips({1, 5, 9}), r = clips({4, 2, 4}, SampleMethod::anomaly_led);
  auto run = [&] {
    typename VideoEncoder<double>::Cache c;
    return enc.encode(xo, xm, u, r, c, {}).frames;
  };
  // exchanging the two rows of the table is the same as exchanging the tags
  auto swap_rows = [&] {
    for (auto* s : {&enc.object, &enc.motion}) {
      MatD& t = s->sequences.table.value;
      t.row(0).swap(t.row(1));
    }
  };
  const MatD base = run();
  swap_rows();
  EXPECT_GT(max_abs_diff(base, run()), 1e-6) << "nonzero table: tags must matter";
  swap_rows();
  enc.object.sequences.table.value.setZero();
  enc.motion.sequences.table.value.setZero();
  const MatD zeroed = run();
  swap_rows();
  EXPECT_EQ(zeroed, run());
}

TEST(VideoEncoder, EvalDeterministicAndStreamLengthChecked) {
  Rng rng(4);
  VideoEncoder<double> enc("v", 4, 5, small(), small_detector());
  enc.init(rng);
  const MatD xo = randn(rng, 7, 4), xm = randn(rng, 7, 5);
  const auto u = clips({1, 4, 7}), r = clips({3, 3, 6});
  typename VideoEncoder<double>::Cache c1, c2;
  const auto a = enc.encode(xo, xm, u, r, c1, {});
  const auto b = enc.encode(xo, xm, u, r, c2, {});
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.rep.g_object, b.rep.g_object);
  typename VideoEncoder<double>::Cache c3;
  EXPECT_THROW(enc.encode(xo, randn(rng, 6, 5), u, r, c3, {}), ShapeError);
}

TEST(VideoEncoder, GradCheckThroughRepresentationsAndFrames) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    VideoEncoder<double> enc("v", 3, 4, small(), small_detector());
    enc.init(rng);
    const MatD xo = randn(rng, 8, 3), xm = randn(rng, 8, 4);
    const auto u = clips({1, 4, 8}), r = clips({2, 6, 6}, SampleMethod::anomaly_led);
    const auto probe = DualRepresentation<double>{randn(rng, 1, 8), randn(rng, 1, 8), randn(rng, 1, 8),
                                                  randn(rng, 1, 8)};
    const MatD frame_probe = randn(rng, 8, 8);
    const Rng drop(seed + 100);
    auto params = nn::collect_params(enc);
    const auto report = nn::grad_check(params, [&](bool backward) {
      Rng d = drop;
      typename VideoEncoder<double>::Cache c;
      const auto out = enc.encode(xo, xm, u, r, c, {Mode::train, &d});
      const double loss = out.rep.g_object.dot(probe.g_object) + out.rep.g_motion.dot(probe.g_motion) +
                          out.rep.h_object.dot(probe.h_object) + out.rep.h_motion.dot(probe.h_motion) +
                          out.frames.cwiseProduct(frame_probe).sum();
      if (backward) {
        auto [dpo, dpm] = enc.backward_encode(probe, &frame_probe, c);
        enc.backward_project(dpo, dpm, c);
      }
      return loss;
    });
    EXPECT_TRUE(report.passed()) << "seed " << seed << "\n" << report;
  }
}

TEST(TextEncoder, SingleTokenAveragesToItsOutput) {
  Rng rng(5);
  TextEncoder<double> enc("t", 12, small());
  enc.init(rng);
  typename TextEncoder<double>::Cache c;
  const auto out = enc.encode({7}, c, {});
  ASSERT_EQ(out.words.rows(), 1);
  EXPECT_EQ(out.h, RowVec<double>(out.words.row(0)));
}

TEST(TextEncoder, GatedOutputsUnitNormAndDeterministic) {
  Rng rng(6);
  TextEncoder<double> enc("t", 12, small());
  enc.init(rng);
  const std::vector<int> toks{0, 3, 5, 11, 2};
  typename TextEncoder<double>::Cache c1, c2;
  const auto a = enc.encode(toks, c1, {});
  const auto b = enc.encode(toks, c2, {});
  for (const auto* v : {&a.rep.g_object, &a.rep.g_motion, &a.rep.h_object, &a.rep.h_motion}) {
    EXPECT_NEAR(v->norm(), 1.0, 1e-6);
  }
  EXPECT_EQ(a.rep.h_motion, b.rep.h_motion);
  EXPECT_EQ(a.words, b.words);
}

TEST(TextEncoder, UnknownTokenRejected) {
  TextEncoder<double> enc("t", 12, small());
  typename TextEncoder<double>::Cache c;
  EXPECT_THROW(enc.encode({3, 12}, c, {}), ValidationError);
  EXPECT_THROW(enc.encode({-1}, c, {}), ValidationError);
}

TEST(TextEncoder, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    TextEncoder<double> enc("t", 10, small());
    enc.init(rng);
    const std::vector<int> toks{1, 4, 4, 9, 0};
    const auto probe = DualRepresentation<double>{randn(rng, 1, 8), randn(rng, 1, 8), randn(rng, 1, 8),
                                                  randn(rng, 1, 8)};
    const MatD word_probe = randn(rng, 5, 8);
    const Rng drop(seed + 7);
    const auto report = nn::grad_check(nn::collect_params(enc), [&](bool backward) {
      Rng d = drop;
      typename TextEncoder<double>::Cache c;
      const auto out = enc.encode(toks, c, {Mode::train, &d});
      const double loss = out.rep.g_object.dot(probe.g_object) + out.rep.g_motion.dot(probe.g_motion) +
                          out.rep.h_object.dot(probe.h_object) + out.rep.h_motion.dot(probe.h_motion) +
                          out.words.cwiseProduct(word_probe).sum();
      if (backward) enc.backward(probe, &word_probe, c);
      return loss;
    });
    EXPECT_TRUE(report.passed()) << "seed " << seed << "\n" << report;
  }
}

TEST(AudioEncoder, ConstantInputGivesIdenticalTokens) {
  Rng rng(7);
  AudioEncoder<double> enc("a", 3, small(), small_detector());
  enc.init(rng);
  zero_embeddings(enc.stream);
  typename AudioEncoder<double>::Cache c;
  const auto rep = enc.encode(MatD::Constant(5, 3, -0.4), clips({3}), clips({1}), c, {});
  const MatD& out = c.stream.output;
  for (Eigen::Index r = 1; r < out.rows(); ++r) EXPECT_LT((out.row(r) - out.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(rep.g_object.norm(), 1.0, 1e-9);
}

TEST(AudioEncoder, EvalDeterministicAndGradCheck) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    AudioEncoder<double> enc("a", 3, small(), small_detector());
    enc.init(rng);
    const MatD x = randn(rng, 9, 3);
    const auto u = clips({1, 5, 9}), r = clips({8, 8, 3}, SampleMethod::anomaly_led);
    {
      typename AudioEncoder<double>::Cache c1, c2;
      EXPECT_EQ(enc.encode(x, u, r, c1, {}).h_motion, enc.encode(x, u, r, c2, {}).h_motion);
    }
    const auto probe = DualRepresentation<double>{randn(rng, 1, 8), randn(rng, 1, 8), randn(rng, 1, 8),
                                                  randn(rng, 1, 8)};
    auto params = nn::collect_params(enc.stream);
    auto mp = nn::collect_params(enc.matcher);
    params.insert(params.end(), mp.begin(), mp.end());
    const auto report = nn::grad_check(params, [&](bool backward) {
      typename AudioEncoder<double>::Cache c;
      const auto rep = enc.encode(x, u, r, c, {});
      const double loss = rep.g_object.dot(probe.g_object) + rep.g_motion.dot(probe.g_motion) +
                          rep.h_object.dot(probe.h_object) + rep.h_motion.dot(probe.h_motion);
      if (backward) enc.backward_project(enc.backward_encode(probe, c), c);
      return loss;
    });
    EXPECT_TRUE(report.passed()) << "seed " << seed << "\n" << report;
  }
}

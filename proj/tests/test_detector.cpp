#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "alan/detector.hpp"

using namespace alan;

namespace {

MatD randn(Rng& rng, Eigen::Index r, Eigen::Index c) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// only the centre tap of each kernel can see a length-1 sequence
MatD centre_tap(const TemporalConv1d<double>& conv, Eigen::Index in, Eigen::Index kernel) {
  return conv.weight.value.middleRows((kernel / 2) * in, in);
}

}  // namespace

TEST(Detector, DefaultConfigMatchesStatedArchitecture) {
  AnomalyDetector<double> det("d", 8);
  ASSERT_EQ(det.layers.size(), 3u);
  EXPECT_EQ(det.config().widths, (std::vector<Eigen::Index>{128, 32, 1}));
  EXPECT_EQ(det.config().kernel, 7);
  EXPECT_DOUBLE_EQ(det.config().dropout, 0.6);
  EXPECT_EQ(det.layers[0].weight.value.rows(), 7 * 8);
}

TEST(Detector, LengthOneSequenceSeesOnlyZeroPadding) {
  Rng rng(1);
  AnomalyDetector<double> det("d", 5);
  det.init(rng);
  for (auto& l : det.layers) l.bias.value = randn(rng, 1, l.bias.value.cols()) * 0.1;
  const MatD x = randn(rng, 1, 5);
  const MatD s = det.score(x);
  ASSERT_EQ(s.rows(), 1);
  MatD h1 = (x * centre_tap(det.layers[0], 5, 7)) + det.layers[0].bias.value;
  h1 = h1.cwiseMax(0.0);
  MatD h2 = (h1 * centre_tap(det.layers[1], 128, 7)) + det.layers[1].bias.value;
  h2 = h2.cwiseMax(0.0);
  const double z = (h2 * centre_tap(det.layers[2], 32, 7))(0, 0) + det.layers[2].bias.value(0, 0);
  EXPECT_NEAR(s(0, 0), 1.0 / (1.0 + std::exp(-z)), 1e-12);
}

TEST(Detector, OutputLengthEqualsInputLength) {
  Rng rng(2);
  AnomalyDetector<double> det("d", 3);
  det.init(rng);
  for (Eigen::Index T : {1, 2, 6, 7, 8, 33}) EXPECT_EQ(det.score(randn(rng, T, 3)).rows(), T);
}

TEST(Detector, ZeroWeightsGiveOneHalf) {
  AnomalyDetector<double> det("d", 4);
  Rng rng(3);
  const MatD s = det.score(randn(rng, 20, 4));
  for (Eigen::Index i = 0; i < s.rows(); ++i) EXPECT_EQ(s(i, 0), 0.5);
}

TEST(Detector, EvalIsDeterministicAndScoresInOpenUnitInterval) {
  Rng rng(4);
  AnomalyDetector<double> det("d", 4);
  det.init(rng);
  const MatD x = randn(rng, 30, 4) * 3.0;
  const MatD a = det.score(x), b = det.score(x);
  EXPECT_EQ(a, b);
  EXPECT_GT(a.minCoeff(), 0.0);
  EXPECT_LT(a.maxCoeff(), 1.0);
}

TEST(TopK, ThirtyTwoClipsAveragesTopTwo) {
  std::vector<double> l(32, 0.1);
  l[5] = 0.9;
  l[20] = 0.7;
  l[21] = 0.6;
  EXPECT_EQ(topk_count(32), 2u);
  EXPECT_NEAR(topk_aggregate(std::span<const double>(l)).value, 0.8, 1e-15);
}

TEST(TopK, ShortSequenceClampsToMax) {
  Rng rng(5);
  std::vector<double> l(10);
  for (auto& v : l) v = rng.uniform();
  EXPECT_EQ(topk_count(10), 1u);
  EXPECT_EQ(topk_aggregate(std::span<const double>(l)).value, *std::max_element(l.begin(), l.end()));
}

TEST(TopK, MatchesSortThenMean) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.index(200);
    std::vector<double> l(T);
    for (auto& v : l) v = rng.uniform();
    std::vector<double> sorted = l;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const std::size_t k = std::max<std::size_t>(1, T / 16);
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) sum += sorted[i];
    EXPECT_EQ(topk_aggregate(std::span<const double>(l)).value, sum / static_cast<double>(k)) << "T=" << T;
  }
}

TEST(TopK, Invariants) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.index(128);
    std::vector<double> l(T);
    for (auto& v : l) v = rng.uniform();
    const double rho = topk_aggregate(std::span<const double>(l)).value;
    EXPECT_GE(rho, *std::min_element(l.begin(), l.end()));
    EXPECT_LE(rho, *std::max_element(l.begin(), l.end()));
    auto perm = l;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    EXPECT_EQ(topk_aggregate(std::span<const double>(perm)).value, rho);
  }
  // k equals T only when T = 1
  std::vector<double> one{0.42};
  EXPECT_EQ(topk_aggregate(std::span<const double>(one)).value, 0.42);
}

TEST(Bce, WorkedValues) {
  const double eps = kBceEpsilon;
  EXPECT_NEAR(bce_loss(1.0 - eps, 1), 0.0, 2e-7);
  EXPECT_NEAR(bce_loss(0.5, 1), 0.69314718055994531, 1e-15);
  EXPECT_NEAR(bce_loss(eps, 1), -std::log(eps), 1e-9);
  EXPECT_TRUE(std::isfinite(bce_loss(0.0, 1)));
  EXPECT_TRUE(std::isfinite(bce_loss(1.0, 0)));
  EXPECT_NEAR(bce_loss(0.0, 1), -std::log(eps), 1e-9);
  EXPECT_GE(bce_loss(0.3, 0), 0.0);
}

TEST(Bce, GradientMatchesDerivative) {
  for (double p : {0.1, 0.5, 0.93}) {
    for (int y : {0, 1}) {
      const double h = 1e-6;
      const double num = (bce_loss(p + h, y) - bce_loss(p - h, y)) / (2 * h);
      EXPECT_NEAR(bce_grad(p, y), num, 1e-6);
    }
  }
}

TEST(Detector, TrainingOnPlantedWindowsRaisesInsideScores) {
  // a tiny supervised run: mean score inside windows must exceed outside
  Rng rng(8);
  DetectorConfig cfg;
  cfg.widths = {16, 8, 1};
  cfg.dropout = 0.0;
  AnomalyDetector<double> det("d", 4, cfg);
  det.init(rng);
  RowVec<double> dir = RowVec<double>::Ones(4);
  std::vector<MatD> xs;
  std::vector<int> labels;
  std::vector<std::pair<int, int>> windows;
  for (int i = 0; i < 24; ++i) {
    MatD x = randn(rng, 32, 4) * 0.3;
    const int label = i % 2;
    const int start = static_cast<int>(rng.index(24));
    if (label) {
      for (int t = start; t < start + 6; ++t) x.row(t) += dir;
    }
    xs.push_back(x);
    labels.push_back(label);
    windows.emplace_back(start, start + 6);
  }
  auto params = nn::collect_params(det);
  for (int epoch = 0; epoch < 60; ++epoch) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      nn::zero_grads(params);
      typename AnomalyDetector<double>::Cache c;
      const MatD s = det.forward(xs[i], c, {});
      const auto top = topk_aggregate(s);
      MatD d = MatD::Zero(32, 1);
      for (auto k : top.indices) d(static_cast<Eigen::Index>(k), 0) += bce_grad(top.value, labels[i]) / 2.0;
      det.backward(d, c);
      for (auto* p : params) p->value -= 0.05 * p->grad;
    }
  }
  int ok = 0, total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!labels[i]) continue;
    const MatD s = det.score(xs[i]);
    double in = 0, out = 0;
    for (int t = 0; t < 32; ++t) (t >= windows[i].first && t < windows[i].second ? in : out) += s(t, 0);
    ok += in / 6.0 > out / 26.0 ? 1 : 0;
    ++total;
  }
  EXPECT_EQ(ok, total);
}

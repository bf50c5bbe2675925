#include <cmath>

#include <gtest/gtest.h>

#include "alan/alignment.hpp"
#include "alan/nn/gradcheck.hpp"

using namespace alan;

namespace {

RowVec<double> randv(Rng& rng, Eigen::Index d) {
  RowVec<double> v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = rng.normal();
  return v;
}

DualRepresentation<double> random_rep(Rng& rng, Eigen::Index d) {
  return {randv(rng, d), randv(rng, d), randv(rng, d), randv(rng, d)};
}

double brute_ranking(const MatD& S, double margin) {
  const auto B = S.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < B; ++j) {
      if (i == j) continue;
      total += std::max(0.0, S(i, j) - S(i, i) + margin);
      total += std::max(0.0, S(j, i) - S(i, i) + margin);
    }
  }
  return total / static_cast<double>(B);
}

}  // namespace

TEST(ClsSimilarity, IdenticalPairsGiveOne) {
  Rng rng(1);
  Alignment<double> align("a", 6);
  align.init(rng);
  const auto q = random_rep(rng, 6);
  EXPECT_NEAR(align.cls_similarity(q, q), 1.0, 1e-12);
  EXPECT_NEAR(align.avg_similarity(q, q), 1.0, 1e-12);
  EXPECT_NEAR(align.similarity(q, q), 1.0, 1e-12);
}

TEST(ClsSimilarity, OrthogonalPairsGiveZero) {
  Rng rng(2);
  Alignment<double> align("a", 4);
  align.init(rng);
  DualRepresentation<double> v{RowVec<double>::Unit(4, 0), RowVec<double>::Unit(4, 1), RowVec<double>::Unit(4, 2),
                               RowVec<double>::Unit(4, 3)};
  DualRepresentation<double> q{RowVec<double>::Unit(4, 1) * 3.0, RowVec<double>::Unit(4, 2),
                               RowVec<double>::Unit(4, 3), RowVec<double>::Unit(4, 0) * 0.5};
  EXPECT_NEAR(align.cls_similarity(v, q), 0.0, 1e-15);
  EXPECT_NEAR(align.avg_similarity(v, q), 0.0, 1e-15);
}

TEST(WeightedCosine, MatchesReferenceFormula) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    RowVec<double> a = randv(rng, 5), b = randv(rng, 5), c = randv(rng, 5), d = randv(rng, 5);
    a.normalize();
    b.normalize();
    c.normalize();
    d.normalize();
    double dot_ab = 0, dot_cd = 0;
    for (int k = 0; k < 5; ++k) {
      dot_ab += a(k) * b(k);
      dot_cd += c(k) * d(k);
    }
    EXPECT_NEAR(weighted_cosine(a, b, c, d, {0.6, 0.4}), 0.6 * dot_ab + 0.4 * dot_cd, 1e-14);
  }
}

TEST(WeightHeads, SumToOneAndNonNegative) {
  Rng rng(4);
  Alignment<double> align("a", 6);
  align.init(rng);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = random_rep(rng, 6);
    const auto w = align.weights(q);
    EXPECT_NEAR(w.cls.first + w.cls.second, 1.0, 1e-9);
    EXPECT_NEAR(w.avg.first + w.avg.second, 1.0, 1e-9);
    EXPECT_GE(std::min({w.cls.first, w.cls.second, w.avg.first, w.avg.second}), 0.0);
  }
}

TEST(WeightHeads, LevelsAreIndependent) {
  Rng rng(5);
  Alignment<double> align("a", 6);
  align.init(rng);
  const auto q = random_rep(rng, 6);
  const auto before = align.weights(q);
  align.avg_head.object.bias.value(0, 0) += 2.0;
  const auto after = align.weights(q);
  EXPECT_EQ(before.cls, after.cls);
  EXPECT_NE(before.avg.first, after.avg.first);
}

TEST(Cosine, ScaleInvariance) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const RowVec<double> a = randv(rng, 7), b = randv(rng, 7);
    const double s = 0.01 + 100 * rng.uniform();
    EXPECT_NEAR(nn::cosine(a, b), nn::cosine(a, RowVec<double>(b * s)), 1e-12);
  }
}

TEST(Fusion, WorkedValuesAndBoundaries) {
  EXPECT_DOUBLE_EQ(fused_similarity(1.0, 0.0, 0.5), 0.5);
  EXPECT_EQ(fused_similarity(0.3, 0.9, 1.0), 0.3);
  EXPECT_EQ(fused_similarity(0.3, 0.9, 0.0), 0.9);
  EXPECT_THROW(fused_similarity(0.3, 0.9, 1.01), ValidationError);
  EXPECT_THROW(fused_similarity(0.3, 0.9, -0.1), ValidationError);
  EXPECT_THROW(Alignment<double>("a", 4, 2.0), ValidationError);
}

TEST(Fusion, AlphaOneIsClsOnlyAndZeroIsAvgOnly) {
  Rng rng(7);
  Alignment<double> align("a", 5, 1.0);
  align.init(rng);
  const auto v = random_rep(rng, 5), q = random_rep(rng, 5);
  EXPECT_EQ(align.similarity(v, q), align.cls_similarity(v, q));
  align.set_alpha(0.0);
  EXPECT_EQ(align.similarity(v, q), align.avg_similarity(v, q));
}

TEST(RankingLoss, WorkedExamples) {
  MatD S(2, 2);
  S << 0.5, 0.6, 0.4, 0.9;
  EXPECT_NEAR(ranking_loss(S, 0.05), 0.075, 1e-15);
  EXPECT_NEAR(brute_ranking(S, 0.05), 0.075, 1e-15);
  EXPECT_EQ(ranking_loss(MatD(MatD::Identity(5, 5)), 0.05), 0.0);
}

TEST(RankingLoss, MatchesBruteForce) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto B = static_cast<Eigen::Index>(2 + rng.index(7));
    MatD S(B, B);
    for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = 2 * rng.uniform() - 1;
    const double m = 0.2 * rng.uniform();
    EXPECT_NEAR(ranking_loss(S, m), brute_ranking(S, m), 1e-9);
  }
}

TEST(RankingLoss, Properties) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto B = static_cast<Eigen::Index>(2 + rng.index(7));
    MatD S(B, B);
    for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = 2 * rng.uniform() - 1;
    const double loss = ranking_loss(S, 0.05);
    EXPECT_GE(loss, 0.0);
    // identical row/column permutation
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(B));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    MatD P(B, B);
    for (Eigen::Index i = 0; i < B; ++i) {
      for (Eigen::Index j = 0; j < B; ++j) P(i, j) = S(perm[i], perm[j]);
    }
    EXPECT_NEAR(ranking_loss(P, 0.05), loss, 1e-12);
    // margin satisfied everywhere -> zero
    MatD Z = S;
    for (Eigen::Index i = 0; i < B; ++i) Z(i, i) = 2.0;
    EXPECT_EQ(ranking_loss(Z, 0.05), 0.0);
    // one violation -> strictly positive
    Z(0, 1) = 1.99;
    EXPECT_GT(ranking_loss(Z, 0.05), 0.0);
  }
}

TEST(RankingLoss, PreconditionsChecked) {
  EXPECT_THROW(ranking_loss(MatD(MatD::Zero(1, 1)), 0.05), ValidationError);
  EXPECT_THROW(ranking_loss(MatD(MatD::Zero(2, 3)), 0.05), ShapeError);
  EXPECT_THROW(ranking_loss(MatD(MatD::Zero(2, 2)), -0.1), ValidationError);
}

TEST(RankingLoss, GradientIsZeroAtExactKink) {
  MatD S(2, 2);
  S << 0.5, 0.25, 0.0, 0.9;  // S01 - S00 + 0.25 == 0 exactly
  const MatD g = ranking_loss_grad(S, 0.25);
  EXPECT_EQ(g, MatD(MatD::Zero(2, 2)));
}

TEST(Alignment, GradCheckOnRandomBatches) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Alignment<double> align("a", 5, 0.3 + 0.4 * rng.uniform());
    align.init(rng);
    const std::size_t B = 2 + rng.index(3);
    std::vector<DualRepresentation<double>> videos, queries;
    for (std::size_t i = 0; i < B; ++i) {
      videos.push_back(random_rep(rng, 5));
      queries.push_back(random_rep(rng, 5));
    }
    auto params = nn::collect_params(align);
    // also check the representation gradients by wrapping them as params
    std::vector<nn::Param<double>> reps;
    for (std::size_t i = 0; i < B; ++i) {
      for (const auto* r : {&videos[i], &queries[i]}) {
        for (const auto* f : {&r->g_object, &r->g_motion, &r->h_object, &r->h_motion}) {
          nn::Param<double> p("rep", 1, 5);
          p.value = *f;
          reps.push_back(p);
        }
      }
    }
    for (auto& p : reps) params.push_back(&p);
    const auto report = nn::grad_check(params, [&](bool backward) {
      std::size_t k = 0;
      for (std::size_t i = 0; i < B; ++i) {
        for (auto* r : {&videos[i], &queries[i]}) {
          for (auto* f : {&r->g_object, &r->g_motion, &r->h_object, &r->h_motion}) *f = reps[k++].value;
        }
      }
      typename Alignment<double>::Cache c;
      const MatD S = align.similarity_matrix(videos, queries, c);
      const double loss = ranking_loss(S, 0.4);
      if (backward) {
        auto [dv, dq] = align.backward(ranking_loss_grad(S, 0.4), c);
        k = 0;
        for (std::size_t i = 0; i < B; ++i) {
          for (auto* r : {&dv[i], &dq[i]}) {
            for (auto* f : {&r->g_object, &r->g_motion, &r->h_object, &r->h_motion}) reps[k++].grad += *f;
          }
        }
      }
      return loss;
    });
    EXPECT_TRUE(report.passed()) << "seed " << seed << "\n" << report;
  }
}

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pcadv/experiment.hpp"
#include "pcadv/metrics.hpp"
#include "pcadv/models.hpp"

using namespace pcadv;

TEST(Chamfer, Examples) {
  Points x(2, 3), y(1, 3);
  x << 0, 0, 0, 1, 0, 0;
  y << 0, 0, 0;
  EXPECT_DOUBLE_EQ(chamfer(x, y), 0.5);
  EXPECT_EQ(chamfer(x, x), 0.0);
  EXPECT_THROW(chamfer(Points(0, 3), y), InvalidInput);
}

TEST(Chamfer, MatchesBruteForceOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const Points x = oracle::random_points(1 + trial % 64, rng);
    const Points y = oracle::random_points(1 + (trial * 7) % 64, rng);
    EXPECT_NEAR(chamfer(x, y), oracle::chamfer(x, y), 1e-12);
  }
}

TEST(Chamfer, SymmetricNonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Points x = oracle::random_points(30, rng);
    const Points y = oracle::random_points(20, rng);
    EXPECT_DOUBLE_EQ(chamfer(x, y), chamfer(y, x));
    EXPECT_GT(chamfer(x, y), 0.0);
    std::vector<Index> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Points xp(30, 3);
    for (Index i = 0; i < 30; ++i) xp.row(i) = x.row(perm[i]);
    EXPECT_NEAR(chamfer(xp, y), chamfer(x, y), 1e-15);
  }
}

TEST(Chamfer, ZeroIffMutualCover) {
  Points x(3, 3), y(2, 3);
  x << 0, 0, 0, 0, 0, 0, 1, 1, 1;
  y << 1, 1, 1, 0, 0, 0;
  EXPECT_EQ(chamfer(x, y), 0.0);
}

TEST(Chamfer, TermsExposeAssignments) {
  Points x(2, 3), y(2, 3);
  x << 0, 0, 0, 1, 0, 0;
  y << 0.9, 0, 0, 0.1, 0, 0;
  const ChamferTerms t = chamfer_terms(x, y);
  EXPECT_EQ(t.x_to_y, (std::vector<Index>{1, 0}));
  EXPECT_EQ(t.y_to_x, (std::vector<Index>{1, 0}));
  EXPECT_NEAR(t.value, t.x_term + t.y_term, 0.0);
}

TEST(OffSurface, ThresholdExamples) {
  Points s = Points::Zero(1, 3);
  Points q(1, 3);
  q << 0.06, 0, 0;
  EXPECT_EQ(os_count(q, s).count, 1);
  q << 0.04, 0, 0;
  EXPECT_EQ(os_count(q, s).count, 0);
  EXPECT_EQ(os_count(s, s).count, 0);
}

TEST(OffSurface, MatchesOracleAndIsMonotoneInGamma) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Points s = oracle::random_points(1 + trial % 64, rng);
    const Points q = s + oracle::random_points(s.rows(), rng, 0.1);
    Index previous = q.rows() + 1;
    for (double gamma : {0.0, 0.01, 0.02, 0.05, 0.1, 0.2}) {
      const OffSurface os = os_count(q, s, gamma);
      EXPECT_EQ(os.count, oracle::os_count(q, s, gamma));
      EXPECT_EQ(static_cast<Index>(os.ids.size()), os.count);
      EXPECT_LE(os.count, previous);
      previous = os.count;
    }
  }
}

TEST(NormalizedErrors, IdentityCasesEqualOne) {
  AEConfig cfg;
  cfg.points = 32;
  cfg.latent = 8;
  const AEModel model(cfg);
  const Points t = generate_shape(0, 32, 1).points();
  const Points s = generate_shape(1, 32, 1).points();
  EXPECT_DOUBLE_EQ(t_nre(model, t, t), 1.0);
  EXPECT_DOUBLE_EQ(s_nre(model, s, s), 1.0);
  EXPECT_THROW(t_nre_with(0.1, 0.0), NumericError);
  EXPECT_THROW(s_nre_with(0.1, 0.0), NumericError);
}

TEST(Semantic, AllPredictedAsTarget) {
  const auto r = semantic_eval({2, 2, 1}, {0, 0, 0}, {2, 2, 1}, 3);
  EXPECT_DOUBLE_EQ(r.hit_target, 1.0);
  EXPECT_DOUBLE_EQ(r.avoid_source, 1.0);
  EXPECT_DOUBLE_EQ(r.confusion(2, 2), 1.0);
  EXPECT_DOUBLE_EQ(r.confusion(1, 1), 1.0);
}

TEST(Semantic, TargetEqualsSourceGivesComplement) {
  const std::vector<int> pred{0, 1, 1, 2};
  const std::vector<int> labels{0, 1, 2, 2};
  const auto r = semantic_eval(pred, labels, labels, 3);
  EXPECT_DOUBLE_EQ(r.hit_target, 1.0 - r.avoid_source);
  EXPECT_DOUBLE_EQ(r.confusion(2, 1), 0.5);
  EXPECT_DOUBLE_EQ(r.confusion.row(2).sum(), 1.0);
}

TEST(Semantic, RejectsOutOfRangeLabels) {
  EXPECT_THROW(semantic_eval({3}, {0}, {1}, 3), InvalidInput);
  EXPECT_THROW(semantic_eval({0}, {-1}, {1}, 3), InvalidInput);
  EXPECT_THROW(semantic_eval({0, 1}, {0}, {1}, 3), ShapeMismatch);
}

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // Ties take average ranks: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3).
  EXPECT_NEAR(spearman({1, 1, 2}, {1, 2, 3}), 0.8660254037844386, 1e-12);
  EXPECT_TRUE(std::isnan(spearman({1, 1}, {1, 2})));
}

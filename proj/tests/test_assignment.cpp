#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "themask/assignment.hpp"
#include "themask/random_instances.hpp"

using namespace themask;

namespace {

CostMatrix random_cost(Rng& rng, std::size_t rows, std::size_t cols, bool integer = false) {
  CostMatrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      m(r, c) = integer ? static_cast<double>(rng.range(0, 3)) : rng.uniform(-5.0, 5.0);
  return m;
}

// Cross-entropy cost recomputed pair by pair from the logits, sharing no
// code with build_cost_components.
double recompute_ce(const PredictionSet& p, const GroundTruth& g, std::size_t q, std::size_t i) {
  const std::size_t px = p.pixels();
  double acc = 0.0;
  for (std::size_t x = 0; x < px; ++x) {
    const double z = p.mask_logits.at(q * px + x);
    double prob = 1.0 / (1.0 + std::exp(-z));
    prob = std::min(std::max(prob, 1e-7), 1.0 - 1e-7);
    const double t = g.instances[i].mask[x];
    acc += -(t * std::log(prob) + (1.0 - t) * std::log(1.0 - prob));
  }
  return acc / static_cast<double>(px);
}

}  // namespace

TEST(Hungarian, DiagonalZeroIsIdentity) {
  CostMatrix m(3, 3, 1.0);
  for (std::size_t i = 0; i < 3; ++i) m(i, i) = 0.0;
  auto a = hungarian(m);
  EXPECT_EQ(a.row_of_col, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(a.total_cost, 0.0);
}

TEST(Hungarian, TwoByTwo) {
  CostMatrix m(2, 2, std::vector<double>{1, 2, 2, 1});
  auto a = hungarian(m);
  EXPECT_EQ(a.row_of_col, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, MatchesBruteForceOnRandomSquare) {
  for (int seed = 0; seed < 500; ++seed) {
    Rng rng(seed);
    auto m = random_cost(rng, 6, 6);
    auto h = hungarian(m);
    auto b = brute_force_match(m);
    ASSERT_EQ(h.total_cost, b.total_cost) << "seed " << seed;
    EXPECT_EQ(h.row_of_col, b.row_of_col);
  }
}

TEST(Hungarian, MatchesBruteForceOnRectangular) {
  for (int seed = 0; seed < 300; ++seed) {
    Rng rng(10'000 + seed);
    const std::size_t cols = rng.range(1, 4);
    const std::size_t rows = rng.range(cols, 8);
    auto m = random_cost(rng, rows, cols);
    auto h = hungarian(m);
    EXPECT_EQ(h.total_cost, brute_force_match(m).total_cost) << rows << "x" << cols;
  }
}

TEST(Hungarian, TiesBreakLexicographically) {
  for (int seed = 0; seed < 300; ++seed) {
    Rng rng(20'000 + seed);
    const std::size_t cols = rng.range(1, 5);
    const std::size_t rows = rng.range(cols, 6);
    auto m = random_cost(rng, rows, cols, true);
    auto h = hungarian(m);
    auto b = brute_force_match(m);
    EXPECT_EQ(h.total_cost, b.total_cost);
    EXPECT_EQ(h.row_of_col, b.row_of_col) << "seed " << seed;
  }
  CostMatrix flat(4, 2, 0.0);
  EXPECT_EQ(hungarian(flat).row_of_col, (std::vector<std::size_t>{0, 1}));
}

TEST(Hungarian, ConstantShiftKeepsAssignment) {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(30'000 + seed);
    auto m = random_cost(rng, 7, 4, seed % 2 == 0);
    CostMatrix shifted = m;
    const double k = rng.uniform(-100, 100);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) shifted(r, c) += k;
    EXPECT_EQ(hungarian(m).row_of_col, hungarian(shifted).row_of_col);
  }
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(hungarian(CostMatrix(2, 3)), ContractError);
  CostMatrix bad(2, 2);
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(hungarian(bad), NumericError);
  EXPECT_TRUE(hungarian(CostMatrix(3, 0)).row_of_col.empty());
}

TEST(BruteForce, SingleEntry) {
  auto a = brute_force_match(CostMatrix(1, 1, std::vector<double>{4.5}));
  EXPECT_EQ(a.row_of_col, (std::vector<std::size_t>{0}));
  EXPECT_EQ(a.total_cost, 4.5);
}

TEST(BruteForce, SizeLimit) { EXPECT_THROW(brute_force_match(CostMatrix(9, 2)), ContractError); }

TEST(BruteForce, RowPermutationPermutesAssignment) {
  Rng rng(5);
  auto m = random_cost(rng, 5, 3);
  std::vector<std::size_t> perm = {3, 0, 4, 1, 2};  // new row i = old row perm[i]
  auto p = m.select_rows(perm);
  auto a = brute_force_match(m);
  auto b = brute_force_match(p);
  EXPECT_DOUBLE_EQ(a.total_cost, b.total_cost);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(perm[b.row_of_col[c]], a.row_of_col[c]);
}

TEST(CostComponents, PerfectPredictionCostsMinusOne) {
  GroundTruth gt{1, 2, 2, {{2, {1, 0, 0, 1}}}};
  PredictionSet p;
  p.frames = 1;
  p.height = 2;
  p.width = 2;
  p.class_probs = Tensor::from_data({1, 3}, {0.0, 1.0, 0.0});
  p.mask_logits = Tensor::from_data({1, 4}, {40, -40, -40, 40});
  auto c = build_cost_components(p, gt, {});
  EXPECT_NEAR(c.ce(0, 0), 0.0, 1e-6);
  EXPECT_NEAR(c.dice(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(c.combined()(0, 0), -1.0, 1e-5);
}

TEST(CostComponents, DisjointMasksZeroProbability) {
  GroundTruth gt{1, 4, 4, {{1, std::vector<double>(16, 1.0)}}};
  PredictionSet p;
  p.frames = 1;
  p.height = 4;
  p.width = 4;
  p.class_probs = Tensor::from_data({1, 3}, {0.0, 0.5, 0.5});
  p.mask_logits = Tensor::full({1, 16}, -40.0);
  auto c = build_cost_components(p, gt, {});
  const double ce = -std::log(1e-7);
  EXPECT_NEAR(c.ce(0, 0), ce, 1e-9);
  EXPECT_NEAR(c.dice(0, 0), 1.0 - 1.0 / 17.0, 1e-12);  // smoothing keeps it just under 1
  EXPECT_NEAR(c.combined()(0, 0), 2.5 * ce + 2.5 * (16.0 / 17.0), 1e-9);
}

TEST(CostComponents, ZeroWeightsLeaveClassTerm) {
  Rng rng(11);
  auto p = random_predictions(rng, 5, 3, 1, 4, 4);
  auto g = random_ground_truth(rng, 3, 3, 1, 4, 4);
  auto c = build_cost_components(p, g, {0.0, 0.0, {}});
  auto comb = c.combined();
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(comb(j, i), -c.cls(j, i));
      EXPECT_EQ(c.cls(j, i), p.class_probs.at(j * 4 + g.instances[i].label - 1));
    }
}

TEST(CostComponents, EntryRangesAndEmptyGroundTruth) {
  Rng rng(12);
  auto p = random_predictions(rng, 6, 4, 2, 3, 3);
  auto g = random_ground_truth(rng, 4, 4, 2, 3, 3);
  auto c = build_cost_components(p, g, {});
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(c.ce(j, i), 0.0);
      EXPECT_GE(c.dice(j, i), 0.0);
      EXPECT_GE(c.cls(j, i), 0.0);
      EXPECT_LE(c.cls(j, i), 1.0);
      EXPECT_GE(c.combined()(j, i), -1.0);
    }
  GroundTruth empty{2, 3, 3, {}};
  auto e = build_cost_components(p, empty, {});
  EXPECT_EQ(e.num_gt(), 0u);
  EXPECT_EQ(e.num_queries(), 6u);
}

TEST(CostComponents, ShapeMismatch) {
  Rng rng(13);
  auto p = random_predictions(rng, 3, 2, 1, 4, 4);
  auto g = random_ground_truth(rng, 1, 2, 1, 4, 5);
  EXPECT_THROW(build_cost_components(p, g, {}), DimensionError);
}

TEST(CostComponents, SampledPointsRestrictEveryPair) {
  Rng rng(14);
  auto p = random_predictions(rng, 4, 3, 1, 4, 4);
  auto g = random_ground_truth(rng, 2, 3, 1, 4, 4);
  std::vector<std::size_t> pts = {0, 5, 7, 15};
  auto c = build_cost_components(p, g, {2.5, 2.5, pts});
  // restrict by hand and compare
  PredictionSet ps = p;
  ps.height = 1;
  ps.width = 4;
  ps.mask_logits = index_select(p.mask_logits, 1, pts);
  GroundTruth gs{1, 1, 4, {}};
  for (const auto& inst : g.instances) {
    GroundTruthInstance s{inst.label, {}};
    for (auto x : pts) s.mask.push_back(inst.mask[x]);
    gs.instances.push_back(s);
  }
  auto d = build_cost_components(ps, gs, {});
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_DOUBLE_EQ(c.ce(j, i), d.ce(j, i));
      EXPECT_DOUBLE_EQ(c.dice(j, i), d.dice(j, i));
    }
}

TEST(TwoRound, HundredQueriesEightTruths) {
  Rng rng(21);
  auto p = random_predictions(rng, 100, 10, 1, 6, 6);
  auto g = random_ground_truth(rng, 8, 10, 1, 6, 6);
  auto one = one_round_match(build_cost_components(p, g, {}));
  auto two = two_round_match(build_cost_components(p, g, {}));
  EXPECT_EQ(one.round1_size(), 8u);
  EXPECT_EQ(one.round2_size(), 0u);
  EXPECT_EQ(two.round1_size(), 8u);
  EXPECT_EQ(two.round2_size(), 8u);
  EXPECT_EQ(two.unmatched.size(), 84u);
  EXPECT_EQ(two.sigma1, one.sigma1);
}

TEST(TwoRound, SquareHasNoSecondRound) {
  Rng rng(22);
  auto p = random_predictions(rng, 4, 5, 1, 3, 3);
  auto g = random_ground_truth(rng, 4, 5, 1, 3, 3);
  auto m = two_round_match(build_cost_components(p, g, {}));
  EXPECT_EQ(m.round2_size(), 0u);
  EXPECT_TRUE(m.unmatched.empty());
}

TEST(TwoRound, SecondRoundEqualsRecomputedCrossEntropyMatch) {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(23'000 + seed);
    auto p = random_predictions(rng, 10, 5, 1, 4, 4);
    auto g = random_ground_truth(rng, 4, 5, 1, 4, 4);
    auto m = two_round_match(build_cost_components(p, g, {}));
    std::vector<std::size_t> rest;
    for (std::size_t q = 0; q < 10; ++q)
      if (std::find(m.sigma1.begin(), m.sigma1.end(), q) == m.sigma1.end()) rest.push_back(q);
    CostMatrix fresh(rest.size(), 4);
    for (std::size_t r = 0; r < rest.size(); ++r)
      for (std::size_t i = 0; i < 4; ++i) fresh(r, i) = recompute_ce(p, g, rest[r], i);
    auto a = hungarian(fresh);
    for (std::size_t i = 0; i < 4; ++i) {
      ASSERT_TRUE(m.sigma2[i].has_value());
      EXPECT_EQ(*m.sigma2[i], rest[a.row_of_col[i]]);
    }
  }
}

TEST(TwoRound, InvariantsOnRandomSizes) {
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(24'000 + seed);
    const std::size_t n = rng.range(1, 32);
    const std::size_t ngt = rng.range(0, static_cast<long>(n));
    auto p = random_predictions(rng, n, 6, 1, 3, 3);
    auto g = random_ground_truth(rng, ngt, 6, 1, 3, 3);
    auto comp = build_cost_components(p, g, {});
    EXPECT_NO_THROW(check_match_invariants(two_round_match(comp), ngt, true)) << n << "/" << ngt;
    EXPECT_NO_THROW(check_match_invariants(one_round_match(comp), ngt, false));
  }
}

TEST(TwoRound, RejectsBadSizesAndRoundCounts) {
  Rng rng(25);
  auto p = random_predictions(rng, 2, 4, 1, 3, 3);
  auto g = random_ground_truth(rng, 3, 4, 1, 3, 3);
  auto comp = build_cost_components(p, g, {});
  EXPECT_THROW(two_round_match(comp), ContractError);
  auto g2 = random_ground_truth(rng, 1, 4, 1, 3, 3);
  auto comp2 = build_cost_components(p, g2, {});
  EXPECT_THROW(match_queries(comp2, 3), ContractError);
  EXPECT_NO_THROW(match_queries(comp2, 1));
}

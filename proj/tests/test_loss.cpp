#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "themask/gradcheck.hpp"
#include "themask/loss.hpp"
#include "themask/oracles.hpp"
#include "themask/random_instances.hpp"

using namespace themask;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from_data({n}, std::move(v));
}

MatchResult match_for(const PredictionSet& p, const GroundTruth& g, int rounds) {
  return match_queries(build_cost_components(p, g, {}), rounds);
}

PredictionSet with_logits(const PredictionSet& p, const Tensor& class_logits,
                          const Tensor& mask_logits) {
  PredictionSet out = p;
  out.class_probs = softmax(class_logits, 1);
  out.mask_logits = mask_logits;
  return out;
}

// Entropy-style bce of x against itself, with the same clamp.
double self_bce(const std::vector<double>& t) {
  double acc = 0.0;
  for (double v : t) {
    const double p = std::min(std::max(v, 1e-7), 1.0 - 1e-7);
    acc += -(v * std::log(p) + (1.0 - v) * std::log(1.0 - p));
  }
  return acc / static_cast<double>(t.size());
}

double dice_of(const std::vector<double>& p, const std::vector<double>& t, double s) {
  double i = 0, a = 0, b = 0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    i += p[x] * t[x];
    a += p[x];
    b += t[x];
  }
  return 1.0 - (2.0 * i + s) / (a + b + s);
}

}  // namespace

TEST(Bce, PerfectBinaryPredictionIsNearZero) {
  auto t = vec({1, 0, 0, 1, 1});
  EXPECT_LE(bce_mask_loss(t, t).item(), 1e-6);
}

TEST(Bce, HalfProbabilityIsLn2) {
  auto p = Tensor::full({2, 3}, 0.5);
  auto t = Tensor::from_data({2, 3}, {1, 0, 1, 1, 0, 0});
  EXPECT_NEAR(bce_mask_loss(p, t).item(), std::log(2.0), 1e-15);
}

TEST(Bce, ShapeMismatchThrows) {
  EXPECT_THROW(bce_mask_loss(vec({0.5, 0.5}), vec({1, 0, 0})), DimensionError);
  EXPECT_THROW(dice_loss(vec({0.5, 0.5}), vec({1, 0, 0})), DimensionError);
  EXPECT_THROW(soft_mask(vec({0.5, 0.5}), vec({1, 0, 0})), DimensionError);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> p(12), t(12);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    for (auto& v : t) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto target = vec(t);
    auto r = finite_diff_check([&](const Tensor& x) { return bce_mask_loss(x, target); }, vec(p));
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Dice, PerfectNonemptyMaskAt32x32) {
  Rng rng(3);
  std::vector<double> m(32 * 32);
  for (auto& v : m) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  auto t = Tensor::from_data({32, 32}, m);
  const double got = dice_loss(t, t).item();
  EXPECT_LE(got, 1e-2);
  EXPECT_NEAR(got, dice_of(m, m, 1.0), 1e-15);
}

TEST(Dice, EmptyPredictionAndTargetGivesZero) {
  auto z = Tensor::zeros({4, 4});
  EXPECT_EQ(dice_loss(z, z).item(), 0.0);
}

TEST(Dice, UnsmoothedHalfExample) {
  EXPECT_NEAR(dice_loss(vec({0.5, 0.5}), vec({1, 0}), 0.0).item(), 0.5, 1e-15);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    std::vector<double> p(10), t(10);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    for (auto& v : t) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    auto target = vec(t);
    auto r = finite_diff_check([&](const Tensor& x) { return dice_loss(x, target); }, vec(p));
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Classification, CertainCorrectPredictionsGiveZero) {
  // 3 queries, K = 2; query 0 matched to label 2, others unmatched.
  auto probs = Tensor::from_data({3, 3}, {0, 1, 0, 0, 0, 1, 0, 0, 1});
  MatchResult m;
  m.num_queries = 3;
  m.sigma1 = {0};
  m.sigma2 = {std::nullopt};
  m.unmatched = {1, 2};
  const std::vector<int> labels{2};
  EXPECT_EQ(classification_loss(probs, m, labels, 0.1).item(), 0.0);
}

TEST(Classification, SingleUnmatchedQueryHalfNoObject) {
  auto probs = Tensor::from_data({1, 2}, {0.5, 0.5});
  MatchResult m;
  m.num_queries = 1;
  m.unmatched = {0};
  const std::vector<int> labels;
  EXPECT_NEAR(classification_loss(probs, m, labels, 0.1).item(), 0.1 * std::log(2.0), 1e-15);
}

TEST(Classification, DroppingSigma2AddsNoObjectTerms) {
  Rng rng(5);
  auto p = random_predictions(rng, 10, 4, 1, 4, 4);
  auto g = random_ground_truth(rng, 3, 4, 1, 4, 4);
  auto m = match_for(p, g, 2);
  const auto with = classification_targets(m, g.labels(), 4, true);
  const auto without = classification_targets(m, g.labels(), 4, false);
  auto count = [](const std::vector<std::size_t>& t) {
    return std::count(t.begin(), t.end(), std::size_t{4});
  };
  EXPECT_EQ(count(without) - count(with), static_cast<long>(m.round2_size()));
  EXPECT_EQ(m.round2_size(), 3u);
}

TEST(Classification, LabelOutOfRangeThrows) {
  auto probs = Tensor::full({2, 3}, 1.0 / 3.0);
  MatchResult m;
  m.num_queries = 2;
  m.sigma1 = {0};
  m.sigma2 = {std::nullopt};
  m.unmatched = {1};
  const std::vector<int> bad{3};
  EXPECT_THROW(classification_loss(probs, m, bad, 0.1), ContractError);
  const std::vector<int> zero{0};
  EXPECT_THROW(classification_loss(probs, m, zero, 0.1), ContractError);
}

TEST(SoftMask, Examples) {
  auto gt = vec({1, 0, 1, 1});
  EXPECT_EQ(soft_mask(Tensor::full({4}, 1.0), gt).data()[2], 1.0);
  auto ones = soft_mask(Tensor::full({4}, 1.0), gt);
  auto half = soft_mask(Tensor::full({4}, 0.5), gt);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ones.at(i), gt.at(i));
    EXPECT_EQ(half.at(i), 0.5 * gt.at(i));
  }
  auto none = soft_mask(vec({0.3, 0.9, 0.1, 0.7}), Tensor::zeros({4}));
  for (double v : none.data()) EXPECT_EQ(v, 0.0);
}

TEST(SoftMask, IsDetachedAndBounded) {
  Rng rng(9);
  std::vector<double> p(20), m(20);
  for (auto& v : p) v = rng.uniform();
  for (auto& v : m) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  auto x = Tensor::from_data({20}, p, true);
  auto sm = soft_mask(x, vec(m));
  EXPECT_FALSE(sm.requires_grad());
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_GE(sm.at(i), 0.0);
    EXPECT_LE(sm.at(i), m[i]);
  }
}

TEST(HardLoss, PerfectMasksNearZero) {
  auto masks = Tensor::from_data({2, 4}, {1, 0, 0, 1, 0, 1, 1, 0});
  auto probs = Tensor::from_data({3, 4}, {0, 1, 1, 0, 0.5, 0.5, 0.5, 0.5, 1, 0, 0, 1});
  const std::vector<std::size_t> sigma{2, 0};
  LossWeights w;
  // dice smoothing leaves a small positive residue per pair
  const double residue = 2.5 * (1.0 - 5.0 / 5.0);
  EXPECT_NEAR(hard_loss(probs, masks, sigma, w).item(), 2 * residue, 1e-5);
}

TEST(HardLoss, SingleGroundTruthComposition) {
  Rng rng(11);
  std::vector<double> p(16), t(16);
  for (auto& v : p) v = rng.uniform(0.1, 0.9);
  for (auto& v : t) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  auto probs = Tensor::from_data({1, 16}, p);
  auto masks = Tensor::from_data({1, 16}, t);
  double bce = 0.0;
  for (std::size_t x = 0; x < 16; ++x) bce -= t[x] * std::log(p[x]) + (1 - t[x]) * std::log(1 - p[x]);
  bce /= 16.0;
  const double want = 2.5 * (bce + dice_of(p, t, 1.0));
  EXPECT_NEAR(hard_loss(probs, masks, {0}, LossWeights{}).item(), want, 1e-13);
}

TEST(HardLoss, LinearInWeights) {
  Rng rng(12);
  auto p = random_predictions(rng, 6, 3, 1, 4, 4);
  auto g = random_ground_truth(rng, 3, 3, 1, 4, 4);
  auto m = match_for(p, g, 1);
  LossWeights w, w2;
  w2.ce_r1 *= 2;
  w2.dice_r1 *= 2;
  const double a = hard_loss(p.mask_probs(), g.mask_matrix(), m.sigma1, w).item();
  const double b = hard_loss(p.mask_probs(), g.mask_matrix(), m.sigma1, w2).item();
  EXPECT_NEAR(b, 2 * a, 1e-12 * b);
}

TEST(HardLoss, InvalidIndexThrows) {
  auto probs = Tensor::full({2, 4}, 0.5);
  auto masks = Tensor::zeros({1, 4});
  EXPECT_THROW(hard_loss(probs, masks, {5}, LossWeights{}), ContractError);
  EXPECT_THROW(hard_loss(probs, masks, {0, 1}, LossWeights{}), ContractError);
}

TEST(SoftLoss, PredictionEqualToSoftTarget) {
  // Zero outside the gt support means sm == pred exactly.
  const std::vector<double> gt{1, 1, 0, 1, 0, 0};
  const std::vector<double> p{0.3, 0.8, 0.0, 0.55, 0.0, 0.0};
  auto probs = Tensor::from_data({1, 6}, p);
  auto masks = Tensor::from_data({1, 6}, gt);
  LossWeights w;
  const double want = 0.25 * self_bce(p) + 0.25 * dice_of(p, p, 1.0);
  const double got = soft_loss(probs, masks, {std::optional<std::size_t>(0)}, w).item();
  EXPECT_NEAR(got, want, 1e-13);
  EXPECT_GT(self_bce(p), 0.1);
}

TEST(SoftLoss, EmptySigma2IsZero) {
  auto probs = Tensor::full({3, 4}, 0.5);
  auto masks = Tensor::from_data({2, 4}, {1, 0, 0, 1, 0, 1, 1, 0});
  EXPECT_EQ(soft_loss(probs, masks, {std::nullopt, std::nullopt}, LossWeights{}).item(), 0.0);
}

TEST(SoftLoss, FullConfidenceReducesToHardForm) {
  Rng rng(13);
  std::vector<double> gt(12), p(12);
  for (std::size_t x = 0; x < 12; ++x) {
    gt[x] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    p[x] = gt[x] ? 1.0 : rng.uniform(0.1, 0.9);
  }
  auto probs = Tensor::from_data({1, 12}, p);
  auto masks = Tensor::from_data({1, 12}, gt);
  LossWeights w;
  LossWeights as_hard;
  as_hard.ce_r1 = w.ce_r2;
  as_hard.dice_r1 = w.dice_r2;
  EXPECT_EQ(soft_loss(probs, masks, {std::optional<std::size_t>(0)}, w).item(),
            hard_loss(probs, masks, {0}, as_hard).item());
}

TEST(HierarchicalLoss, DefaultWeights) {
  LossWeights w;
  EXPECT_EQ(w.ce_r1, 2.5);
  EXPECT_EQ(w.dice_r1, 2.5);
  EXPECT_EQ(w.ce_r2, 0.25);
  EXPECT_EQ(w.dice_r2, 0.25);
  EXPECT_EQ(w.alpha, 0.5);
  EXPECT_EQ(w.no_object, 0.1);
  LossWeights bad;
  bad.alpha = -1;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(HierarchicalLoss, AlphaZeroIsHardPlusClassification) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    auto p = random_predictions(rng, 8, 4, 2, 4, 4);
    auto g = random_ground_truth(rng, 3, 4, 2, 4, 4);
    auto m = match_for(p, g, 2);
    LossWeights w;
    w.alpha = 0.0;
    const double total = hierarchical_loss(p, g, m, w).total.item();
    const double parts = hard_loss(p.mask_probs(), g.mask_matrix(), m.sigma1, w).item() +
                         classification_loss(p.class_probs, m, g.labels(), w.no_object).item();
    EXPECT_EQ(total, parts) << "seed " << seed;
  }
}

TEST(HierarchicalLoss, OneRoundAlphaZeroEqualsBaselineExactly) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    auto p = random_predictions(rng, 7, 3, 1, 5, 5);
    auto g = random_ground_truth(rng, 3, 3, 1, 5, 5);
    auto m = match_for(p, g, 1);
    LossWeights w;
    w.alpha = 0.0;
    const double h = hierarchical_loss(p, g, m, w, LossVariant::hierarchical).total.item();
    const double b = hierarchical_loss(p, g, m, w, LossVariant::baseline).total.item();
    EXPECT_EQ(h, b);
  }
}

TEST(HierarchicalLoss, BaselineMatchesIndependentReference) {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(400 + seed);
    const std::size_t ngt = rng.below(5);
    auto p = random_predictions(rng, 9, 5, 2, 4, 4);
    auto g = random_ground_truth(rng, ngt, 5, 2, 4, 4);
    auto m = match_for(p, g, 1);
    LossWeights w;
    const double got = hierarchical_loss(p, g, m, w, LossVariant::baseline).total.item();
    const double ref = oracle::baseline_loss(p, g, m.sigma1, 2.5, 2.5, 0.1);
    EXPECT_LE(std::abs(got - ref), 1e-12 * std::abs(ref)) << "seed " << seed;
  }
}

TEST(HierarchicalLoss, TwoRoundOriginalUsesHardWeightsOnSigma2) {
  Rng rng(17);
  auto p = random_predictions(rng, 8, 4, 1, 4, 4);
  auto g = random_ground_truth(rng, 3, 4, 1, 4, 4);
  auto m = match_for(p, g, 2);
  LossWeights w;
  auto terms = hierarchical_loss(p, g, m, w, LossVariant::two_round_original);
  // sigma2 under the hard loss, as if it were a first-round match
  const double second = oracle::baseline_loss(p, g, [&] {
    std::vector<std::size_t> s;
    for (auto& q : m.sigma2) s.push_back(*q);
    return s;
  }(), 2.5, 2.5, 0.1);
  const double second_cls = [&] {
    double c = 0.0;
    std::vector<long> target(8, -1);
    for (std::size_t i = 0; i < 3; ++i) target[*m.sigma2[i]] = g.instances[i].label - 1;
    for (std::size_t q = 0; q < 8; ++q)
      c -= target[q] >= 0 ? std::log(p.class_probs.at(q * 5 + target[q]))
                          : 0.1 * std::log(p.class_probs.at(q * 5 + 4));
    return c / 8.0;
  }();
  EXPECT_NEAR(terms.soft, second - second_cls, 1e-12);
  EXPECT_NEAR(terms.total.item(), terms.hard + terms.soft + terms.cls, 1e-12);
}

TEST(HierarchicalLoss, NoGroundTruthSupervisesEverythingToNoObject) {
  Rng rng(21);
  auto p = random_predictions(rng, 5, 3, 1, 4, 4);
  auto g = random_ground_truth(rng, 0, 3, 1, 4, 4);
  auto m = match_for(p, g, 2);
  auto terms = hierarchical_loss(p, g, m, LossWeights{});
  EXPECT_EQ(terms.hard, 0.0);
  EXPECT_EQ(terms.soft, 0.0);
  double want = 0.0;
  for (std::size_t q = 0; q < 5; ++q) want -= 0.1 * std::log(p.class_probs.at(q * 4 + 3));
  EXPECT_NEAR(terms.cls, want / 5.0, 1e-14);
}

TEST(HierarchicalLoss, NonNegative) {
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(500 + seed);
    auto p = random_predictions(rng, 8, 4, 1, 4, 4);
    auto g = random_ground_truth(rng, rng.below(5), 4, 1, 4, 4);
    auto m = match_for(p, g, 2);
    auto t = hierarchical_loss(p, g, m, LossWeights{});
    EXPECT_GE(t.hard, 0.0);
    EXPECT_GE(t.soft, 0.0);
    EXPECT_GE(t.cls, 0.0);
    auto comp = build_cost_components(p, g, {});
    auto c = comp.combined();
    for (double v : c.values()) EXPECT_GE(v, -1.0);
  }
}

TEST(HierarchicalLoss, InvariantToGroundTruthOrder) {
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(600 + seed);
    auto p = random_predictions(rng, 10, 5, 1, 5, 5);
    auto g = random_ground_truth(rng, 4, 5, 1, 5, 5);
    GroundTruth h = g;
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    for (std::size_t i = 0; i < 4; ++i) h.instances[i] = g.instances[perm[i]];
    const double a = hierarchical_loss(p, g, match_for(p, g, 2), LossWeights{}).total.item();
    const double b = hierarchical_loss(p, h, match_for(p, h, 2), LossWeights{}).total.item();
    EXPECT_NEAR(a, b, 1e-12 * a) << "seed " << seed;
  }
}

TEST(HierarchicalLoss, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto base = random_predictions(rng, 5, 3, 1, 8, 8);
    auto g = random_ground_truth(rng, 2, 3, 1, 8, 8);
    std::vector<double> cl(5 * 4);
    for (auto& v : cl) v = 2.0 * rng.normal();
    auto class_logits = Tensor::from_data({5, 4}, cl);
    base.class_probs = softmax(class_logits, 1);
    const auto m = match_for(base, g, 2);
    ASSERT_EQ(m.round2_size(), 2u);
    // soft targets are constants of the unperturbed prediction, like the match
    const Tensor sm = soft_targets(base.mask_probs(), g.mask_matrix(), m.sigma2);
    for (auto variant : {LossVariant::hierarchical, LossVariant::two_round_original,
                         LossVariant::baseline}) {
      auto by_mask = composite_check(
          [&](const Tensor& x) {
            LossOptions opt;
            opt.variant = variant;
            opt.soft_targets = sm;
            return hierarchical_loss(with_logits(base, class_logits, x), g, m, LossWeights{}, opt)
                .total;
          },
          base.mask_logits);
      EXPECT_LE(by_mask.max_rel_error, 1e-4) << "seed " << seed << " " << to_string(variant);
      auto by_class = composite_check(
          [&](const Tensor& x) {
            LossOptions opt;
            opt.variant = variant;
            opt.soft_targets = sm;
            return hierarchical_loss(with_logits(base, x, base.mask_logits), g, m, LossWeights{}, opt)
                .total;
          },
          class_logits);
      EXPECT_LE(by_class.max_rel_error, 1e-4) << "seed " << seed << " " << to_string(variant);
    }
  }
}

TEST(HierarchicalLoss, PointSamplingRestrictsMaskTerms) {
  Rng rng(23);
  auto p = random_predictions(rng, 6, 3, 1, 4, 4);
  auto g = random_ground_truth(rng, 2, 3, 1, 4, 4);
  auto m = match_for(p, g, 2);
  std::vector<std::size_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(hierarchical_loss(p, g, m, LossWeights{}, LossVariant::hierarchical, all).total.item(),
            hierarchical_loss(p, g, m, LossWeights{}).total.item());
  const std::vector<std::size_t> few{1, 5, 9};
  auto t = hierarchical_loss(p, g, m, LossWeights{}, LossVariant::hierarchical, few);
  EXPECT_NE(t.hard, hierarchical_loss(p, g, m, LossWeights{}).hard);
}

TEST(LossVariant, Parsing) {
  EXPECT_EQ(loss_variant_from_string("hierarchical"), LossVariant::hierarchical);
  EXPECT_EQ(loss_variant_from_string("two_round_original"), LossVariant::two_round_original);
  EXPECT_EQ(loss_variant_from_string("baseline"), LossVariant::baseline);
  EXPECT_THROW(loss_variant_from_string("focal"), UsageError);
}

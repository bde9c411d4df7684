#include <gtest/gtest.h>

#include <algorithm>

#include "themask/infer.hpp"
#include "themask/oracles.hpp"
#include "themask/random_instances.hpp"

using namespace themask;

namespace {

PredictionSet make_set(std::size_t n, std::size_t k, std::size_t t, std::size_t h,
                       std::size_t w, std::vector<double> cls, std::vector<double> logits) {
  PredictionSet p;
  p.class_probs = Tensor::from_data({n, k + 1}, std::move(cls));
  p.mask_logits = Tensor::from_data({n, t * h * w}, std::move(logits));
  p.frames = t;
  p.height = h;
  p.width = w;
  return p;
}

// Frame t of a clip-level set as a one-frame set with the same classes.
PredictionSet frame_of(const PredictionSet& p, std::size_t t) {
  PredictionSet f = p;
  const std::size_t hw = p.height * p.width;
  f.mask_logits = narrow(p.mask_logits, 1, t * hw, hw);
  f.frames = 1;
  return f;
}

std::vector<PredictionSet> frames_of(const PredictionSet& p) {
  std::vector<PredictionSet> out;
  for (std::size_t t = 0; t < p.frames; ++t) out.push_back(frame_of(p, t));
  return out;
}

LabelMap labels(std::size_t t, std::size_t h, std::size_t w, std::vector<int> v) {
  return {t, h, w, std::move(v)};
}

constexpr double kBig = 50.0;  // sigmoid(kBig) == 1 in double precision

}  // namespace

TEST(AggregateSemantic, SingleQueryFullMask) {
  auto p = make_set(1, 3, 1, 2, 2, {0, 1, 0, 0}, std::vector<double>(4, kBig));
  const LabelMap m = aggregate_semantic(p);
  EXPECT_EQ(m.labels, std::vector<int>(4, 2));
  EXPECT_EQ(m.frames, 1u);
}

TEST(AggregateSemantic, DisjointMasksPartition) {
  // query 0: class 3 on the left column, query 1: class 1 on the right
  auto p = make_set(2, 3, 1, 2, 2, {0, 0, 1, 0, 1, 0, 0, 0},
                    {kBig, -kBig, kBig, -kBig, -kBig, kBig, -kBig, kBig});
  EXPECT_EQ(aggregate_semantic(p).labels, (std::vector<int>{3, 1, 3, 1}));
}

TEST(AggregateSemantic, TiesGoToSmallestClass) {
  auto p = make_set(1, 3, 1, 1, 2, {0.4, 0.4, 0.2, 0.0}, {0.0, 3.0});
  EXPECT_EQ(aggregate_semantic(p).labels, (std::vector<int>{1, 1}));
}

TEST(AggregateSemantic, NoObjectNeverEmitted) {
  auto p = make_set(1, 2, 1, 1, 3, {0.0, 0.0, 1.0}, {1.0, 2.0, 3.0});
  EXPECT_EQ(aggregate_semantic(p).labels, (std::vector<int>{1, 1, 1}));
}

TEST(AggregateSemantic, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t t = 1 + rng.below(3);
    auto p = random_predictions(rng, 2 + rng.below(6), 2 + rng.below(4), t, 3 + rng.below(4),
                                3 + rng.below(4));
    EXPECT_EQ(aggregate_semantic(p).labels, oracle::semantic_labels(p)) << "seed " << seed;
  }
}

TEST(AggregateSemantic, InvariantUnderCommonPositiveScale) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto p = random_predictions(rng, 5, 3, 2, 4, 4);
    auto q = p;
    q.class_probs = scale(p.class_probs, 0.25);  // power of two keeps sums exact
    EXPECT_EQ(aggregate_semantic(p), aggregate_semantic(q));
  }
}

TEST(AggregateVideoFrame, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(5), k = 2 + rng.below(3), t = 1 + rng.below(3);
    const std::size_t h = 3 + rng.below(3), w = 3 + rng.below(3);
    auto video = random_predictions(rng, n, k, t, h, w);
    std::vector<PredictionSet> frames;
    for (std::size_t f = 0; f < t; ++f) frames.push_back(random_predictions(rng, n, k, 1, h, w));
    EXPECT_EQ(aggregate_video_frame(video, frames).labels,
              oracle::video_frame_labels(video, frames))
        << "seed " << seed;
  }
}

TEST(AggregateVideoFrame, IdenticalSetsEqualSemantic) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto p = random_predictions(rng, 4, 3, 1 + rng.below(3), 4, 5);
    EXPECT_EQ(aggregate_video_frame(p, frames_of(p)), aggregate_semantic(p)) << "seed " << seed;
  }
}

TEST(AggregateVideoFrame, ZeroFrameScoresEqualVideoOnly) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto video = random_predictions(rng, 4, 3, 2, 4, 4);
    auto frames = frames_of(video);
    for (auto& f : frames) f.class_probs = Tensor::zeros(f.class_probs.shape());
    EXPECT_EQ(aggregate_video_frame(video, frames), aggregate_semantic(video));
  }
}

TEST(AggregateVideoFrame, ShapeMismatchThrows) {
  Rng rng(1);
  auto video = random_predictions(rng, 3, 2, 2, 3, 3);
  auto frames = frames_of(video);
  frames.pop_back();
  EXPECT_THROW(aggregate_video_frame(video, frames), DimensionError);
  frames = frames_of(video);
  frames[1] = random_predictions(rng, 3, 2, 1, 3, 4);
  EXPECT_THROW(aggregate_video_frame(video, frames), DimensionError);
}

TEST(Metrics, PerfectPrediction) {
  const auto gt = labels(2, 2, 2, {1, 2, 3, 1, 2, 2, 3, 1});
  EXPECT_EQ(miou(gt, gt, 3), 1.0);
  EXPECT_EQ(wiou(gt, gt, 3), 1.0);
}

TEST(Metrics, HalfAndHalf) {
  const auto pred = labels(1, 2, 2, {1, 1, 1, 1});
  const auto gt = labels(1, 2, 2, {1, 1, 2, 2});
  ConfusionAccumulator acc(2);
  acc.add(pred, gt);
  EXPECT_EQ(acc.iou(0).value(), 0.5);
  EXPECT_EQ(acc.iou(1).value(), 0.0);
  EXPECT_EQ(acc.miou(), 0.25);
  EXPECT_EQ(acc.wiou(), 0.25);
}

TEST(Metrics, AbsentClassesExcludedPredictedOnlyCountZero) {
  // class 3 absent everywhere, class 2 predicted but absent from gt
  const auto pred = labels(1, 1, 4, {1, 1, 1, 2});
  const auto gt = labels(1, 1, 4, {1, 1, 1, 1});
  ConfusionAccumulator acc(3);
  acc.add(pred, gt);
  EXPECT_FALSE(acc.iou(2).has_value());
  EXPECT_EQ(acc.iou(1).value(), 0.0);
  EXPECT_EQ(acc.miou(), 0.375);
  EXPECT_EQ(acc.wiou(), 0.75);
}

TEST(Metrics, IgnoreLabelSkipped) {
  const auto pred = labels(1, 1, 4, {2, 2, 1, 1});
  const auto gt = labels(1, 1, 4, {kIgnoreLabel, kIgnoreLabel, 1, 1});
  EXPECT_EQ(miou(pred, gt, 2), 1.0);
}

TEST(Metrics, UniformFrequenciesGiveMiou) {
  const auto pred = labels(1, 1, 4, {1, 2, 2, 2});
  const auto gt = labels(1, 1, 4, {1, 1, 2, 2});
  EXPECT_DOUBLE_EQ(miou(pred, gt, 2), wiou(pred, gt, 2));
}

TEST(Metrics, FrameOrderInvariant) {
  Rng rng(3);
  std::vector<int> p(3 * 16), g(3 * 16);
  for (auto& v : p) v = static_cast<int>(rng.range(1, 4));
  for (auto& v : g) v = static_cast<int>(rng.range(1, 4));
  auto swap_frames = [](std::vector<int> v) {
    std::swap_ranges(v.begin(), v.begin() + 16, v.begin() + 32);
    return v;
  };
  const auto a = labels(3, 4, 4, p), b = labels(3, 4, 4, g);
  const auto a2 = labels(3, 4, 4, swap_frames(p)), b2 = labels(3, 4, 4, swap_frames(g));
  EXPECT_EQ(miou(a, b, 4), miou(a2, b2, 4));
  EXPECT_EQ(wiou(a, b, 4), wiou(a2, b2, 4));
}

TEST(Metrics, OutOfRangeLabelThrows) {
  ConfusionAccumulator acc(2);
  EXPECT_THROW(acc.add(std::vector<int>{3}, std::vector<int>{1}), ContractError);
  EXPECT_THROW(acc.add(std::vector<int>{1, 1}, std::vector<int>{1}), DimensionError);
}

TEST(Metrics, AccumulatesOverSet) {
  ConfusionAccumulator acc(2);
  acc.add(std::vector<int>{1, 1}, std::vector<int>{1, 1});
  acc.add(std::vector<int>{1, 1}, std::vector<int>{2, 2});
  EXPECT_EQ(acc.miou(), 0.25);
}

TEST(ClipRanges, Examples) {
  using R = std::vector<std::pair<std::size_t, std::size_t>>;
  EXPECT_EQ(clip_ranges(4, 2), (R{{0, 2}, {2, 4}}));
  EXPECT_EQ(clip_ranges(5, 2), (R{{0, 2}, {2, 4}, {4, 5}}));
  EXPECT_EQ(clip_ranges(3, 3), (R{{0, 3}}));
  EXPECT_THROW(clip_ranges(3, 0), ContractError);
}

TEST(ClipwiseInfer, ClipsAreIndependent) {
  const std::size_t hw = 4;
  std::vector<double> v(5 * hw);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  // label = 1 + (clip length) for each frame of the clip, checks boundaries
  std::vector<std::size_t> seen;
  auto fn = [&](const Tensor& clip, std::size_t frames) {
    seen.push_back(static_cast<std::size_t>(clip.data()[0]) / hw);
    return LabelMap{frames, 2, 2, std::vector<int>(frames * hw, static_cast<int>(frames))};
  };
  const LabelMap m = clipwise_infer(Tensor::from_data({5 * hw, 1}, v), 5, 2, fn);
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(m.frames, 5u);
  std::vector<int> expect(5 * hw, 2);
  std::fill(expect.begin() + 4 * hw, expect.end(), 1);
  EXPECT_EQ(m.labels, expect);
}

TEST(ClipwiseInfer, ModelOutputIndependentOfOtherClips) {
  ModelConfig cfg;
  cfg.num_queries = 3;
  cfg.channels = 8;
  cfg.layers = 2;
  cfg.num_classes = 3;
  cfg.in_channels = 3;
  cfg.height = 8;
  cfg.width = 8;
  Rng rng(5);
  const ParamStore ps = init_params(cfg, rng);
  std::vector<double> v(4 * 64 * 3);
  for (auto& e : v) e = rng.normal();
  const LabelMap a = clipwise_infer(ps, cfg, Tensor::from_data({4 * 64, 3}, v), 4, 2);
  for (std::size_t i = 2 * 64 * 3; i < v.size(); ++i) v[i] = rng.normal();
  const LabelMap b = clipwise_infer(ps, cfg, Tensor::from_data({4 * 64, 3}, v), 4, 2);
  EXPECT_TRUE(std::equal(a.labels.begin(), a.labels.begin() + 128, b.labels.begin()));
  // whole-video clip equals direct inference
  const Tensor x = Tensor::from_data({4 * 64, 3}, v);
  EXPECT_EQ(clipwise_infer(ps, cfg, x, 4, 4), predict_clip(ps, cfg, x, 4));
}

TEST(ClipwiseInfer, EveryModeLabelsEveryPixel) {
  for (auto mode :
       {TemporalMode::one_to_video, TemporalMode::one_to_frame, TemporalMode::video_frame}) {
    ModelConfig cfg;
    cfg.num_queries = 3;
    cfg.channels = 8;
    cfg.layers = 2;
    cfg.num_classes = 3;
    cfg.in_channels = 3;
    cfg.height = 8;
    cfg.width = 8;
    cfg.mode = mode;
    Rng rng(2);
    const ParamStore ps = init_params(cfg, rng);
    std::vector<double> v(3 * 64 * 3);
    for (auto& e : v) e = rng.normal();
    const LabelMap m = clipwise_infer(ps, cfg, Tensor::from_data({3 * 64, 3}, v), 3, 2);
    ASSERT_EQ(m.labels.size(), 3u * 64u) << to_string(mode);
    for (int l : m.labels) {
      EXPECT_GE(l, 1);
      EXPECT_LE(l, 3);
    }
  }
}

TEST(MatchStats, DoublesMatchedQueries) {
  Rng rng(9);
  MatchStats two, one;
  for (int i = 0; i < 20; ++i) {
    auto p = random_predictions(rng, 100, 10, 1, 4, 4);
    auto g = random_ground_truth(rng, 8, 10, 1, 4, 4);
    const auto comp = build_cost_components(p, g, {});
    two.add(match_queries(comp, 2));
    one.add(match_queries(comp, 1));
  }
  EXPECT_EQ(two.matched_round1(), 8.0);
  EXPECT_EQ(two.matched_round2(), 8.0);
  EXPECT_EQ(two.matched_round1() + two.matched_round2() + two.unmatched(), 100.0);
  EXPECT_EQ(one.matched_round2(), 0.0);
  EXPECT_EQ(one.unmatched(), 92.0);
}

#pragma once

// Finite-difference suites and oracle suites shared by the `gradcheck` and
// `selftest` commands and the acceptance binary. Every check returns one
// pass/fail line with a short detail string.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "themask/assignment.hpp"
#include "themask/data.hpp"
#include "themask/decoder.hpp"
#include "themask/gradcheck.hpp"
#include "themask/infer.hpp"
#include "themask/loss.hpp"
#include "themask/oracles.hpp"
#include "themask/random_instances.hpp"

namespace themask::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const std::vector<CheckResult>& rs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rs) {
    out.push_back(
        {{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}, {"seconds", r.seconds}});
  }
  return out;
}

inline bool all_pass(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const auto& r) { return r.pass; });
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// Times `body`, which fills pass and detail.
inline CheckResult timed(const std::string& name,
                         const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference suites

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradFloor = 1e-8;

/// Tracks the worst relative error over a suite.
struct Worst {
  double err = 0.0;
  std::string where;
  std::size_t cases = 0;

  void see(const GradCheckResult& r, const std::string& at) {
    ++cases;
    if (r.max_rel_error > err || where.empty()) {
      err = std::max(err, r.max_rel_error);
      where = at;
    }
  }

  void report(CheckResult& out) const {
    out.pass = err <= kGradTolerance;
    out.detail = std::to_string(cases) + " checks, max rel error " + fmt("%.3g", err) +
                 (where.empty() ? "" : " (" + where + ")");
  }
};

inline Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from_data({n}, std::move(v));
}

inline CheckResult grad_bce(std::size_t seeds = 20) {
  return timed("bce", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(100 + s);
      const std::size_t n = 4 + rng.below(60);
      std::vector<double> p(n), t(n);
      for (auto& v : p) v = rng.uniform(0.05, 0.95);
      for (auto& v : t) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
      const Tensor target = vec(t);
      w.see(finite_diff_check([&](const Tensor& x) { return bce_mask_loss(x, target); }, vec(p)),
            "seed " + std::to_string(s));
    }
    w.report(out);
  });
}

inline CheckResult grad_dice(std::size_t seeds = 20) {
  return timed("dice", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(200 + s);
      const std::size_t n = 4 + rng.below(60);
      std::vector<double> p(n), t(n);
      for (auto& v : p) v = rng.uniform(0.05, 0.95);
      for (auto& v : t) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      const Tensor target = vec(t);
      w.see(finite_diff_check([&](const Tensor& x) { return dice_loss(x, target); }, vec(p)),
            "seed " + std::to_string(s));
    }
    w.report(out);
  });
}

/// A random instance with its two-round match; class logits are returned
/// separately so checks can differentiate through the softmax.
struct LossInstance {
  PredictionSet preds;
  Tensor class_logits;
  GroundTruth gt;
  MatchResult match;
};

inline LossInstance loss_instance(std::uint64_t seed, std::size_t n = 5, std::size_t ngt = 2,
                                  std::size_t frames = 1, std::size_t side = 8) {
  Rng rng(seed);
  const std::size_t k = 3;
  LossInstance li;
  li.preds = random_predictions(rng, n, k, frames, side, side);
  std::vector<double> logits(n * (k + 1));
  for (auto& v : logits) v = 2.0 * rng.normal();
  li.class_logits = Tensor::from_data({n, k + 1}, std::move(logits));
  li.preds.class_probs = softmax(li.class_logits, 1);
  li.gt = random_ground_truth(rng, ngt, k, frames, side, side);
  li.match = two_round_match(build_cost_components(li.preds, li.gt, {}));
  return li;
}

inline CheckResult grad_classification(std::size_t seeds = 20) {
  return timed("classification", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      const LossInstance li = loss_instance(300 + s);
      const auto labels = li.gt.labels();
      w.see(finite_diff_check(
                [&](const Tensor& x) {
                  return classification_loss(softmax(x, 1), li.match, labels, 0.1);
                },
                li.class_logits),
            "seed " + std::to_string(s));
    }
    w.report(out);
  });
}

inline CheckResult grad_hard(std::size_t seeds = 20) {
  return timed("hard", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      const LossInstance li = loss_instance(400 + s);
      const Tensor gm = li.gt.mask_matrix();
      w.see(composite_check(
                [&](const Tensor& x) {
                  return hard_loss(sigmoid(x), gm, li.match.sigma1, LossWeights{});
                },
                li.preds.mask_logits),
            "seed " + std::to_string(s));
    }
    w.report(out);
  });
}

inline CheckResult grad_soft(std::size_t seeds = 20) {
  return timed("soft", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      const LossInstance li = loss_instance(500 + s);
      const Tensor sm =
          soft_targets(li.preds.mask_probs(), li.gt.mask_matrix(), li.match.sigma2);
      w.see(composite_check(
                [&](const Tensor& x) {
                  return soft_loss_against(sigmoid(x), sm, li.match.sigma2, LossWeights{});
                },
                li.preds.mask_logits),
            "seed " + std::to_string(s));
    }
    w.report(out);
  });
}

/// Whole loss in mask and class logits, all three variants, match and
/// soft targets held at the unperturbed prediction.
inline CheckResult grad_hierarchical(std::size_t seeds = 20) {
  return timed("hierarchical", [&](CheckResult& out) {
    Worst w;
    for (std::size_t s = 0; s < seeds; ++s) {
      const LossInstance li = loss_instance(600 + s);
      const Tensor sm =
          soft_targets(li.preds.mask_probs(), li.gt.mask_matrix(), li.match.sigma2);
      for (auto variant : {LossVariant::hierarchical, LossVariant::two_round_original,
                           LossVariant::baseline}) {
        LossOptions opt;
        opt.variant = variant;
        opt.soft_targets = sm;
        auto with = [&](const Tensor& cls, const Tensor& masks) {
          PredictionSet p = li.preds;
          p.class_probs = softmax(cls, 1);
          p.mask_logits = masks;
          return hierarchical_loss(p, li.gt, li.match, LossWeights{}, opt).total;
        };
        const std::string at = "seed " + std::to_string(s) + " " + to_string(variant);
        w.see(composite_check([&](const Tensor& x) { return with(li.class_logits, x); },
                              li.preds.mask_logits),
              at + " masks");
        w.see(composite_check([&](const Tensor& x) { return with(x, li.preds.mask_logits); },
                              li.class_logits),
              at + " classes");
      }
    }
    w.report(out);
  });
}

inline ModelConfig tiny_model(TemporalMode mode) {
  ModelConfig cfg;
  cfg.num_queries = 3;
  cfg.channels = 8;
  cfg.layers = 2;
  cfg.num_classes = 3;
  cfg.in_channels = 3;
  cfg.height = 8;
  cfg.width = 8;
  cfg.mode = mode;
  return cfg;
}

/// Checks d(readout)/d(every parameter tensor) at a few random coordinates
/// each, plus d/d(input). The readout must replay attention masks from
/// `tape`, which the caller records once at the unperturbed point.
inline void check_model_map(
    Worst& w, const ParamStore& ps, const Tensor& input, Rng& rng, const std::string& tag,
    const std::function<Tensor(const ParamStore&, const Tensor&)>& readout) {
  constexpr std::size_t kPerTensor = 3;
  constexpr std::size_t kInputCoords = 24;
  for (const auto& [name, prm] : ps.entries()) {
    std::vector<std::size_t> coords;
    const std::size_t n = prm.value.numel();
    for (std::size_t k = 0; k < std::min(kPerTensor, n); ++k) coords.push_back(rng.below(n));
    w.see(composite_check(
              [&](const Tensor& x) {
                ParamStore c = ps;
                c.entries()[name].value = x;
                return readout(c, input);
              },
              prm.value, coords, kGradFloor),
          tag + " " + name);
  }
  std::vector<std::size_t> coords;
  for (std::size_t k = 0; k < kInputCoords; ++k) coords.push_back(rng.below(input.numel()));
  w.see(composite_check([&](const Tensor& x) { return readout(ps, x); }, input, coords,
                        kGradFloor),
        tag + " input");
}

/// Random linear readout of the final layer's training predictions, in all
/// three temporal modes (tiny config, T = 2).
inline CheckResult grad_decoder(std::size_t seeds = 20) {
  return timed("decoder_forward", [&](CheckResult& out) {
    Worst w;
    const std::size_t t = 2;
    for (auto mode :
         {TemporalMode::one_to_video, TemporalMode::one_to_frame, TemporalMode::video_frame}) {
      const ModelConfig cfg = tiny_model(mode);
      for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(700 + s);
        const ParamStore ps = init_params(cfg, rng);
        const std::size_t px = t * cfg.height * cfg.width;
        std::vector<double> in(px * cfg.in_channels), rc(cfg.num_queries * (cfg.num_classes + 1)),
            rm(cfg.num_queries * px);
        for (auto& e : in) e = rng.normal();
        for (auto& e : rc) e = rng.normal();
        for (auto& e : rm) e = rng.normal();
        const Tensor input = Tensor::from_data({px, cfg.in_channels}, in);
        const Tensor wc = Tensor::from_data({cfg.num_queries, cfg.num_classes + 1}, rc);
        const Tensor wm = Tensor::from_data({cfg.num_queries, px}, rm);
        AttentionMaskTape tape;
        tape.mode = AttentionMaskTape::Mode::record;
        auto readout = [&](const ParamStore& p, const Tensor& x) {
          ForwardOptions o;
          o.tape = &tape;
          tape.cursor = 0;
          const auto r = Decoder(p, cfg).forward(encode(p, cfg, x, t), o);
          const auto& tr = r.final_layer().train;
          return add(sum(mul(tr.class_probs, wc)), sum(mul(tr.mask_logits, wm)));
        };
        readout(ps, input);
        tape.mode = AttentionMaskTape::Mode::replay;
        check_model_map(w, ps, input, rng, to_string(mode) + " seed " + std::to_string(s),
                        readout);
      }
    }
    w.report(out);
  });
}

/// Forward composed with the hierarchical loss; match, soft targets and
/// attention masks are all held at the unperturbed point.
inline CheckResult grad_end_to_end(std::size_t seeds = 20) {
  return timed("forward_loss", [&](CheckResult& out) {
    Worst w;
    const std::size_t t = 2;
    const ModelConfig cfg = tiny_model(TemporalMode::video_frame);
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(800 + s);
      const ParamStore ps = init_params(cfg, rng);
      const std::size_t px = t * cfg.height * cfg.width;
      std::vector<double> in(px * cfg.in_channels);
      for (auto& e : in) e = rng.normal();
      const Tensor input = Tensor::from_data({px, cfg.in_channels}, in);
      const GroundTruth gt = random_ground_truth(rng, 2, cfg.num_classes, t, cfg.height,
                                                 cfg.width);
      AttentionMaskTape tape;
      tape.mode = AttentionMaskTape::Mode::record;
      std::optional<MatchResult> match;
      std::optional<Tensor> sm;
      auto readout = [&](const ParamStore& p, const Tensor& x) {
        ForwardOptions o;
        o.tape = &tape;
        tape.cursor = 0;
        const auto r = Decoder(p, cfg).forward(encode(p, cfg, x, t), o);
        const PredictionSet& pred = r.final_layer().train;
        if (!match) {
          match = two_round_match(build_cost_components(pred, gt, {}));
          sm = soft_targets(pred.mask_probs(), gt.mask_matrix(), match->sigma2);
        }
        LossOptions opt;
        opt.soft_targets = sm;
        return hierarchical_loss(pred, gt, *match, LossWeights{}, opt).total;
      };
      readout(ps, input);
      tape.mode = AttentionMaskTape::Mode::replay;
      check_model_map(w, ps, input, rng, "seed " + std::to_string(s), readout);
    }
    w.report(out);
  });
}

inline std::vector<CheckResult> gradcheck_suite() {
  return {grad_bce(),  grad_dice(),         grad_classification(), grad_hard(),
          grad_soft(), grad_hierarchical(), grad_decoder(),        grad_end_to_end()};
}

// ---------------------------------------------------------------------------
// Oracle suites

inline CostMatrix random_cost(Rng& rng, std::size_t rows, std::size_t cols, bool integer) {
  CostMatrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      m(r, c) = integer ? static_cast<double>(rng.range(0, 3)) : rng.uniform(-5.0, 5.0);
  return m;
}

/// Hungarian total cost equals exhaustive enumeration on square matrices
/// up to 6x6, rectangular ones up to 8x4, real and tie-heavy integer costs.
inline CheckResult hungarian_vs_brute_force(std::size_t cases = 600) {
  return timed("hungarian_vs_brute_force", [&](CheckResult& out) {
    std::size_t bad = 0, square = 0, rect = 0;
    for (std::size_t s = 0; s < cases; ++s) {
      Rng rng(1000 + s);
      std::size_t rows, cols;
      if (s % 2 == 0) {
        rows = cols = 1 + rng.below(6);
        ++square;
      } else {
        cols = 1 + rng.below(4);
        rows = cols + rng.below(8 - cols + 1);
        ++rect;
      }
      const CostMatrix m = random_cost(rng, rows, cols, s % 3 == 0);
      if (hungarian(m).total_cost != brute_force_match(m).total_cost) ++bad;
    }
    out.pass = bad == 0;
    out.detail = std::to_string(cases) + " matrices (" + std::to_string(square) + " square, " +
                 std::to_string(rect) + " rectangular), " + std::to_string(bad) + " mismatches";
  });
}

/// Second-round assignments from the stored cross-entropy entries equal
/// those from entries recomputed pixel by pixel.
inline CheckResult cost_reuse(std::size_t cases = 120) {
  return timed("cost_reuse", [&](CheckResult& out) {
    std::size_t bad = 0, nonempty = 0;
    for (std::size_t s = 0; s < cases; ++s) {
      Rng rng(2000 + s);
      const std::size_t ngt = 1 + rng.below(5);
      const std::size_t n = ngt + 1 + rng.below(2 * ngt + 2);
      const auto p = random_predictions(rng, n, 6, 1 + rng.below(2), 4, 4);
      const auto g = random_ground_truth(rng, ngt, 6, p.frames, 4, 4);
      const MatchResult reused = two_round_match(build_cost_components(p, g, {}));
      MatchResult first = reused;
      first.sigma2.assign(ngt, std::nullopt);
      CostMatrix fresh(n, ngt);
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t i = 0; i < ngt; ++i) fresh(q, i) = oracle::cross_entropy_cost(p, g, q, i);
      const MatchResult recomputed = second_round(first, fresh);
      if (reused.sigma2 != recomputed.sigma2) ++bad;
      if (reused.round2_size() > 0) ++nonempty;
    }
    out.pass = bad == 0 && nonempty == cases;
    out.detail = std::to_string(cases) + " instances, " + std::to_string(bad) +
                 " differing second rounds";
  });
}

/// N = 100 queries against synthetic clips with 8 categories each: every
/// clip matches exactly N^gt queries in round one and 2 N^gt in total.
inline CheckResult matched_doubling(std::size_t clips = 20) {
  return timed("matched_query_doubling", [&](CheckResult& out) {
    DataConfig dc;
    dc.num_classes = 10;
    dc.height = 16;
    dc.width = 16;
    dc.frames = 2;
    dc.min_shapes = 7;
    dc.max_shapes = 7;
    dc.min_size = 2;
    dc.max_size = 4;
    const auto data = generate_clips(31, clips, dc);
    MatchStats stats;
    bool exact = true;
    double gt_sum = 0.0;
    for (std::size_t i = 0; i < clips; ++i) {
      Rng rng(3000 + i);
      const auto& g = data[i].gt;
      const auto p = random_predictions(rng, 100, dc.num_classes, dc.frames, dc.height, dc.width);
      const MatchResult m = two_round_match(build_cost_components(p, g, {}));
      stats.add(m);
      gt_sum += static_cast<double>(g.size());
      if (m.round1_size() != g.size() || m.round2_size() != g.size() ||
          m.unmatched.size() != 100 - 2 * g.size())
        exact = false;
    }
    const double mean_gt = gt_sum / static_cast<double>(clips);
    out.pass = exact && stats.matched_round1() == mean_gt &&
               stats.matched_round1() + stats.matched_round2() == 2.0 * mean_gt;
    out.detail = "mean N^gt " + fmt("%.3f", mean_gt) + ", matched_round1 " +
                 fmt("%.3f", stats.matched_round1()) + ", total matched " +
                 fmt("%.3f", stats.matched_round1() + stats.matched_round2());
  });
}

/// One-round matching with the original loss equals the independently
/// coded baseline loss.
inline CheckResult baseline_equivalence(std::size_t cases = 50) {
  return timed("baseline_equivalence", [&](CheckResult& out) {
    double worst = 0.0;
    for (std::size_t s = 0; s < cases; ++s) {
      Rng rng(4000 + s);
      const std::size_t ngt = rng.below(5);
      const std::size_t n = std::max<std::size_t>(ngt, 1) + rng.below(6);
      const auto p = random_predictions(rng, n, 5, 1 + rng.below(2), 5, 5);
      const auto g = random_ground_truth(rng, ngt, 5, p.frames, 5, 5);
      const LossWeights w;
      const MatchResult m = one_round_match(build_cost_components(p, g, {}));
      const double ours = hierarchical_loss(p, g, m, w, LossVariant::baseline).total.item();
      const double ref =
          oracle::baseline_loss(p, g, m.sigma1, w.ce_r1, w.dice_r1, w.no_object);
      worst = std::max(worst, std::abs(ours - ref) / std::max(std::abs(ref), 1e-300));
    }
    out.pass = worst <= 1e-12;
    out.detail = std::to_string(cases) + " instances, max rel difference " + fmt("%.3g", worst);
  });
}

/// Both aggregation rules against per-pixel brute force, plus the
/// identical-sets reduction.
inline CheckResult inference_oracle(std::size_t cases = 50) {
  return timed("inference_oracle", [&](CheckResult& out) {
    std::size_t sem_bad = 0, vf_bad = 0, same_bad = 0;
    for (std::size_t s = 0; s < cases; ++s) {
      Rng rng(5000 + s);
      const std::size_t n = 2 + rng.below(6), k = 2 + rng.below(4), t = 1 + rng.below(3);
      const std::size_t h = 3 + rng.below(4), w = 3 + rng.below(4);
      const auto video = random_predictions(rng, n, k, t, h, w);
      std::vector<PredictionSet> frames, same;
      for (std::size_t f = 0; f < t; ++f) {
        frames.push_back(random_predictions(rng, n, k, 1, h, w));
        PredictionSet c = video;
        c.mask_logits = narrow(video.mask_logits, 1, f * h * w, h * w);
        c.frames = 1;
        same.push_back(c);
      }
      if (aggregate_semantic(video).labels != oracle::semantic_labels(video)) ++sem_bad;
      if (aggregate_video_frame(video, frames).labels != oracle::video_frame_labels(video, frames))
        ++vf_bad;
      if (aggregate_video_frame(video, same) != aggregate_semantic(video)) ++same_bad;
    }
    out.pass = sem_bad + vf_bad + same_bad == 0;
    out.detail = std::to_string(cases) + " instances; mismatches: semantic " +
                 std::to_string(sem_bad) + ", video-frame " + std::to_string(vf_bad) +
                 ", identical-sets " + std::to_string(same_bad);
  });
}

inline LabelMap flat_labels(std::vector<int> v) {
  const std::size_t n = v.size();
  return {1, 1, n, std::move(v)};
}

/// Hand-counted metric cases.
inline CheckResult metric_sanity() {
  return timed("metric_sanity", [&](CheckResult& out) {
    const auto gt = flat_labels({1, 1, 2, 2});
    const auto same_m = miou(gt, gt, 2), same_w = wiou(gt, gt, 2);
    const auto half = flat_labels({1, 1, 1, 1});
    const auto half_m = miou(half, gt, 2), half_w = wiou(half, gt, 2);
    out.pass = same_m == 1.0 && same_w == 1.0 && half_m == 0.25 && half_w == 0.25;
    out.detail = "pred==gt: miou " + fmt("%g", same_m) + " wiou " + fmt("%g", same_w) +
                 "; half/half: miou " + fmt("%g", half_m) + " wiou " + fmt("%g", half_w);
  });
}

inline std::vector<CheckResult> selftest_suite() {
  return {hungarian_vs_brute_force(), cost_reuse(),           matched_doubling(),
          baseline_equivalence(),     inference_oracle(),     metric_sanity()};
}

}  // namespace themask::checks

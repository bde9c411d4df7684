#pragma once

// Mask and classification losses for matched query sets: the one-round
// baseline, two rounds with the original loss, and the hierarchical
// hard/soft combination.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "themask/assignment.hpp"
#include "themask/prediction.hpp"
#include "themask/tensor.hpp"

namespace themask {

struct LossWeights {
  double ce_r1 = 2.5;
  double dice_r1 = 2.5;
  double ce_r2 = 0.25;
  double dice_r2 = 0.25;
  double alpha = 0.5;
  double no_object = 0.1;

  void validate() const {
    for (double w : {ce_r1, dice_r1, ce_r2, dice_r2, alpha, no_object}) {
      if (!(w >= 0.0)) throw ContractError("loss weights must be non-negative");
    }
  }
};

enum class LossVariant {
  baseline,            // sigma1 only; everything else predicts no-object
  two_round_original,  // sigma2 gets the same hard loss as sigma1
  hierarchical,        // sigma2 gets the soft loss scaled by alpha
};

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::baseline: return "baseline";
    case LossVariant::two_round_original: return "two_round_original";
    case LossVariant::hierarchical: return "hierarchical";
  }
  return "?";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "baseline" || s == "original") return LossVariant::baseline;
  if (s == "two_round_original") return LossVariant::two_round_original;
  if (s == "hierarchical") return LossVariant::hierarchical;
  throw UsageError("unknown loss variant '" + s + "'");
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0), 1.0); }

}  // namespace detail

/// Row-wise mean binary cross-entropy of [R x X] probabilities; returns [R].
inline Tensor bce_rows(const Tensor& pred_probs, const Tensor& target) {
  detail::require_same_shape(pred_probs, target, "bce");
  const Tensor p = clamp(pred_probs, kProbEps, 1.0 - kProbEps);
  const Tensor elem = add(mul(target, log(p)), mul(detail::one_minus(target), log(detail::one_minus(p))));
  return scale(sum(elem, 1), -1.0 / static_cast<double>(pred_probs.dim(1)));
}

/// Row-wise dice loss 1 - (2 sum(p t) + s) / (sum p + sum t + s); returns [R].
inline Tensor dice_rows(const Tensor& pred_probs, const Tensor& target,
                        double smooth = kDiceSmooth) {
  detail::require_same_shape(pred_probs, target, "dice");
  const Tensor num = add_scalar(scale(sum(mul(pred_probs, target), 1), 2.0), smooth);
  const Tensor den = add_scalar(add(sum(pred_probs, 1), sum(target, 1)), smooth);
  return detail::one_minus(div(num, den));
}

namespace detail {

inline Tensor as_row(const Tensor& x) { return reshape(x, {1, x.numel()}); }

}  // namespace detail

/// Mean binary cross-entropy over all positions, probabilities clamped to
/// [1e-7, 1 - 1e-7].
inline Tensor bce_mask_loss(const Tensor& pred_probs, const Tensor& target) {
  detail::require_same_shape(pred_probs, target, "bce");
  return reshape(bce_rows(detail::as_row(pred_probs), detail::as_row(target)), {});
}

inline Tensor dice_loss(const Tensor& pred_probs, const Tensor& target,
                        double smooth = kDiceSmooth) {
  detail::require_same_shape(pred_probs, target, "dice");
  return reshape(dice_rows(detail::as_row(pred_probs), detail::as_row(target), smooth), {});
}

/// Per-query class target: label-1 for matched queries, K (no-object)
/// otherwise. sigma2 queries count as matched when `use_sigma2`.
inline std::vector<std::size_t> classification_targets(const MatchResult& match,
                                                        std::span<const int> gt_labels,
                                                        std::size_t num_classes, bool use_sigma2) {
  if (match.sigma1.size() != gt_labels.size() || match.sigma2.size() != gt_labels.size()) {
    throw ContractError("match does not cover the ground-truth list");
  }
  std::vector<std::size_t> target(match.num_queries, num_classes);
  auto set = [&](std::size_t q, int label) {
    if (label < 1 || label > static_cast<int>(num_classes)) {
      throw ContractError("label " + std::to_string(label) + " out of range");
    }
    if (q >= match.num_queries) throw ContractError("match index out of range");
    target[q] = static_cast<std::size_t>(label - 1);
  };
  for (std::size_t i = 0; i < gt_labels.size(); ++i) {
    set(match.sigma1[i], gt_labels[i]);
    if (use_sigma2 && match.sigma2[i]) set(*match.sigma2[i], gt_labels[i]);
  }
  return target;
}

/// Mean over all N queries of -w_i log p_i(target_i), with w = no_object
/// for queries whose target is no-object and 1 otherwise.
inline Tensor classification_loss(const Tensor& class_probs, const MatchResult& match,
                                  std::span<const int> gt_labels, double no_object_weight,
                                  bool use_sigma2 = true) {
  const std::size_t n = class_probs.dim(0);
  const std::size_t kp1 = class_probs.dim(1);
  if (match.num_queries != n) throw ContractError("match built for a different query count");
  const auto target = classification_targets(match, gt_labels, kp1 - 1, use_sigma2);
  std::vector<std::size_t> flat(n);
  std::vector<double> w(n);
  for (std::size_t q = 0; q < n; ++q) {
    flat[q] = q * kp1 + target[q];
    w[q] = target[q] == kp1 - 1 ? no_object_weight : 1.0;
  }
  const Tensor picked = index_select(reshape(class_probs, {n * kp1}), 0, flat);
  const Tensor weighted = mul(log(picked), Tensor::from_data({n}, std::move(w)));
  return scale(sum(weighted), -1.0 / static_cast<double>(n));
}

/// Soft target: prediction times ground truth, detached so no gradient
/// reaches the prediction through its own target.
inline Tensor soft_mask(const Tensor& pred_probs, const Tensor& gt_mask) {
  detail::require_same_shape(pred_probs, gt_mask, "soft_mask");
  return mul(pred_probs.detach(), gt_mask.detach());
}

namespace detail {

// Sum over listed (gt, query) pairs of ce_w * bce + dice_w * dice; targets
// are rows of `targets` by gt index.
inline Tensor pair_mask_loss(const Tensor& mask_probs, const Tensor& targets,
                             const std::vector<std::size_t>& gts,
                             const std::vector<std::size_t>& queries, double ce_w, double dice_w) {
  if (gts.empty()) return Tensor::scalar(0.0);
  for (auto q : queries) {
    if (q >= mask_probs.dim(0)) throw ContractError("match index out of range");
  }
  for (auto g : gts) {
    if (g >= targets.dim(0)) throw ContractError("ground-truth index out of range");
  }
  const Tensor p = index_select(mask_probs, 0, queries);
  const Tensor t = index_select(targets, 0, gts);
  return add(scale(sum(bce_rows(p, t)), ce_w), scale(sum(dice_rows(p, t)), dice_w));
}

inline void pairs_of(const std::vector<std::optional<std::size_t>>& sigma,
                     std::vector<std::size_t>& gts, std::vector<std::size_t>& queries) {
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (sigma[i]) {
      gts.push_back(i);
      queries.push_back(*sigma[i]);
    }
  }
}

}  // namespace detail

/// Mask term over first-round pairs against the true masks.
/// `mask_probs` is [N x X], `gt_masks` is [N^gt x X].
inline Tensor hard_loss(const Tensor& mask_probs, const Tensor& gt_masks,
                        const std::vector<std::size_t>& sigma1, const LossWeights& w) {
  if (sigma1.size() != gt_masks.dim(0)) throw ContractError("sigma1 must cover every ground truth");
  std::vector<std::size_t> gts(sigma1.size());
  for (std::size_t i = 0; i < gts.size(); ++i) gts[i] = i;
  return detail::pair_mask_loss(mask_probs, gt_masks, gts, sigma1, w.ce_r1, w.dice_r1);
}

/// Soft targets for every ground truth, one row each; rows without a
/// second-round query are zero. Constant.
inline Tensor soft_targets(const Tensor& mask_probs, const Tensor& gt_masks,
                           const std::vector<std::optional<std::size_t>>& sigma2) {
  if (sigma2.size() != gt_masks.dim(0)) throw ContractError("sigma2 has the wrong domain");
  const std::size_t x = gt_masks.dim(1);
  if (mask_probs.rank() != 2 || mask_probs.dim(1) != x) {
    throw DimensionError("soft_targets: " + shape_str(mask_probs.shape()) + " vs " +
                         shape_str(gt_masks.shape()));
  }
  std::vector<double> v(sigma2.size() * x, 0.0);
  const auto p = mask_probs.data();
  const auto g = gt_masks.data();
  for (std::size_t i = 0; i < sigma2.size(); ++i) {
    if (!sigma2[i]) continue;
    const std::size_t q = *sigma2[i];
    if (q >= mask_probs.dim(0)) throw ContractError("match index out of range");
    for (std::size_t k = 0; k < x; ++k) v[i * x + k] = p[q * x + k] * g[i * x + k];
  }
  return Tensor::from_data(gt_masks.shape(), std::move(v));
}

/// Second-round mask term against already-built soft targets (rows by gt).
inline Tensor soft_loss_against(const Tensor& mask_probs, const Tensor& targets,
                                const std::vector<std::optional<std::size_t>>& sigma2,
                                const LossWeights& w) {
  if (sigma2.size() != targets.dim(0)) throw ContractError("sigma2 has the wrong domain");
  std::vector<std::size_t> gts, queries;
  detail::pairs_of(sigma2, gts, queries);
  return detail::pair_mask_loss(mask_probs, targets, gts, queries, w.ce_r2, w.dice_r2);
}

/// Mask term over second-round pairs against soft targets.
inline Tensor soft_loss(const Tensor& mask_probs, const Tensor& gt_masks,
                        const std::vector<std::optional<std::size_t>>& sigma2,
                        const LossWeights& w) {
  return soft_loss_against(mask_probs, soft_targets(mask_probs, gt_masks, sigma2), sigma2, w);
}

struct LossTerms {
  Tensor total;
  double hard = 0.0;  // first-round mask term
  double soft = 0.0;  // second-round mask term before alpha
  double cls = 0.0;
};

struct LossOptions {
  LossVariant variant = LossVariant::hierarchical;
  /// Flat T*H*W positions every mask term is restricted to; empty = all.
  std::vector<std::size_t> points;
  /// Soft targets to use instead of rebuilding them from the predictions,
  /// [N^gt x points]. Gradient checks pass these to hold targets fixed.
  std::optional<Tensor> soft_targets;
};

/// Loss of one clip's predictions under a fixed match.
inline LossTerms hierarchical_loss(const PredictionSet& preds, const GroundTruth& gts,
                                   const MatchResult& match, const LossWeights& w,
                                   const LossOptions& opt) {
  preds.validate();
  w.validate();
  if (gts.pixels() != preds.pixels()) throw DimensionError("prediction/ground-truth pixel count");
  gts.validate(preds.num_classes());

  Tensor probs = preds.mask_probs();
  Tensor targets = gts.mask_matrix();
  if (!opt.points.empty()) {
    probs = index_select(probs, 1, opt.points);
    targets = index_select(targets, 1, opt.points);
  }
  const auto labels = gts.labels();

  LossTerms out;
  const Tensor hard = hard_loss(probs, targets, match.sigma1, w);
  Tensor total = hard;
  out.hard = hard.item();
  if (opt.variant == LossVariant::two_round_original) {
    std::vector<std::size_t> g2, q2;
    detail::pairs_of(match.sigma2, g2, q2);
    const Tensor second = detail::pair_mask_loss(probs, targets, g2, q2, w.ce_r1, w.dice_r1);
    out.soft = second.item();
    total = add(total, second);
  } else if (opt.variant == LossVariant::hierarchical) {
    const Tensor sm = opt.soft_targets ? *opt.soft_targets
                                       : soft_targets(probs, targets, match.sigma2);
    detail::require_same_shape(sm, targets, "soft targets");
    const Tensor soft = soft_loss_against(probs, sm, match.sigma2, w);
    out.soft = soft.item();
    total = add(total, scale(soft, w.alpha));
  }
  const Tensor cls = classification_loss(preds.class_probs, match, labels, w.no_object,
                                         opt.variant != LossVariant::baseline);
  out.cls = cls.item();
  out.total = add(total, cls);
  return out;
}

inline LossTerms hierarchical_loss(const PredictionSet& preds, const GroundTruth& gts,
                                   const MatchResult& match, const LossWeights& w,
                                   LossVariant variant = LossVariant::hierarchical,
                                   const std::vector<std::size_t>& points = {}) {
  LossOptions opt;
  opt.variant = variant;
  opt.points = points;
  return hierarchical_loss(preds, gts, match, w, opt);
}

}  // namespace themask

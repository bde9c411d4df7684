#pragma once

// Independent plain-loop reference computations. None of these share code
// with the tensor engine, the cost builder, or the aggregation routines they
// are used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "themask/assignment.hpp"
#include "themask/prediction.hpp"

namespace themask::oracle {

inline double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Mean binary cross-entropy between query q's mask and ground truth i,
/// evaluated pixel by pixel from the logits.
inline double cross_entropy_cost(const PredictionSet& p, const GroundTruth& g, std::size_t q,
                                 std::size_t i) {
  const std::size_t px = p.pixels();
  const auto logits = p.mask_logits.data();
  double acc = 0.0;
  for (std::size_t x = 0; x < px; ++x) {
    double prob = logistic(logits[q * px + x]);
    prob = std::min(std::max(prob, 1e-7), 1.0 - 1e-7);
    const double t = g.instances[i].mask[x];
    acc += -(t * std::log(prob) + (1.0 - t) * std::log(1.0 - prob));
  }
  return acc / static_cast<double>(px);
}

inline double dice_value(const PredictionSet& p, const std::vector<double>& target,
                         std::size_t q) {
  const std::size_t px = p.pixels();
  const auto logits = p.mask_logits.data();
  double inter = 0.0, ps = 0.0, ts = 0.0;
  for (std::size_t x = 0; x < px; ++x) {
    const double prob = logistic(logits[q * px + x]);
    inter += prob * target[x];
    ps += prob;
    ts += target[x];
  }
  return 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
}

/// One-round mask-classification loss: summed weighted mask terms of the
/// matched pairs plus the mean over queries of the (no-object-weighted)
/// negative log class probability.
inline double baseline_loss(const PredictionSet& p, const GroundTruth& g,
                            const std::vector<std::size_t>& sigma, double lambda_ce,
                            double lambda_dice, double no_object_weight) {
  const std::size_t n = p.num_queries();
  const std::size_t kp1 = p.class_probs.dim(1);
  const auto cls = p.class_probs.data();
  double mask_term = 0.0;
  std::vector<long> target(n, -1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const std::size_t q = sigma[i];
    mask_term += lambda_ce * cross_entropy_cost(p, g, q, i) +
                 lambda_dice * dice_value(p, g.instances[i].mask, q);
    target[q] = g.instances[i].label - 1;
  }
  double cls_term = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    if (target[q] >= 0) {
      cls_term -= std::log(cls[q * kp1 + static_cast<std::size_t>(target[q])]);
    } else {
      cls_term -= no_object_weight * std::log(cls[q * kp1 + kp1 - 1]);
    }
  }
  return mask_term + cls_term / static_cast<double>(n);
}

/// Per-pixel argmax over classes 1..K of sum_i p_i(c) * m_i(x), computed
/// literally for each pixel. Ties go to the smallest class.
inline std::vector<int> semantic_labels(const PredictionSet& p) {
  const std::size_t n = p.num_queries();
  const std::size_t k = p.num_classes();
  const std::size_t px = p.pixels();
  const auto cls = p.class_probs.data();
  const auto logits = p.mask_logits.data();
  std::vector<int> out(px);
  for (std::size_t x = 0; x < px; ++x) {
    int best = 1;
    double best_score = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double score = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        score += cls[i * (k + 1) + c] * logistic(logits[i * px + x]);
      }
      if (c == 0 || score > best_score) {
        best_score = score;
        best = static_cast<int>(c + 1);
      }
    }
    out[x] = best;
  }
  return out;
}

/// Per-pixel argmax of sum_i 0.5 * (video term + frame term), with frame t
/// using the t-th frame-level prediction set.
inline std::vector<int> video_frame_labels(const PredictionSet& video,
                                           const std::vector<PredictionSet>& frames) {
  const std::size_t n = video.num_queries();
  const std::size_t k = video.num_classes();
  const std::size_t hw = video.height * video.width;
  const auto vc = video.class_probs.data();
  const auto vm = video.mask_logits.data();
  std::vector<int> out(video.pixels());
  for (std::size_t t = 0; t < video.frames; ++t) {
    const auto fc = frames[t].class_probs.data();
    const auto fm = frames[t].mask_logits.data();
    for (std::size_t x = 0; x < hw; ++x) {
      int best = 1;
      double best_score = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        double score = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vc[i * (k + 1) + c] * logistic(vm[i * video.pixels() + t * hw + x]);
          const double b = fc[i * (k + 1) + c] * logistic(fm[i * hw + x]);
          score += 0.5 * (a + b);
        }
        if (c == 0 || score > best_score) {
          best_score = score;
          best = static_cast<int>(c + 1);
        }
      }
      out[t * hw + x] = best;
    }
  }
  return out;
}

}  // namespace themask::oracle

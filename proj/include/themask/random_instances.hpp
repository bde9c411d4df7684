#pragma once

// Random prediction/ground-truth instances for oracle suites and tests.

#include <algorithm>
#include <vector>

#include "themask/prediction.hpp"
#include "themask/rng.hpp"

namespace themask {

/// Class rows are softmax of N(0, class_scale^2) logits; mask logits are
/// N(0, mask_scale^2).
inline PredictionSet random_predictions(Rng& rng, std::size_t queries, std::size_t classes,
                                        std::size_t frames, std::size_t height, std::size_t width,
                                        double class_scale = 2.0, double mask_scale = 2.0) {
  std::vector<double> logits(queries * (classes + 1));
  for (auto& v : logits) v = class_scale * rng.normal();
  std::vector<double> masks(queries * frames * height * width);
  for (auto& v : masks) v = mask_scale * rng.normal();
  PredictionSet p;
  p.class_probs = softmax(Tensor::from_data({queries, classes + 1}, std::move(logits)), 1);
  p.mask_logits = Tensor::from_data({queries, frames * height * width}, std::move(masks));
  p.frames = frames;
  p.height = height;
  p.width = width;
  return p;
}

/// `count` ground truths with distinct labels from 1..classes and random
/// binary masks, each with at least one foreground pixel.
inline GroundTruth random_ground_truth(Rng& rng, std::size_t count, std::size_t classes,
                                       std::size_t frames, std::size_t height, std::size_t width,
                                       double density = 0.3) {
  GroundTruth gt;
  gt.frames = frames;
  gt.height = height;
  gt.width = width;
  std::vector<int> labels(classes);
  for (std::size_t k = 0; k < classes; ++k) labels[k] = static_cast<int>(k + 1);
  rng.shuffle(labels);
  const std::size_t px = gt.pixels();
  for (std::size_t i = 0; i < count; ++i) {
    GroundTruthInstance inst;
    inst.label = labels[i % classes];
    inst.mask.resize(px);
    for (auto& m : inst.mask) m = rng.bernoulli(density) ? 1.0 : 0.0;
    inst.mask[rng.below(px)] = 1.0;
    gt.instances.push_back(std::move(inst));
  }
  return gt;
}

}  // namespace themask

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "themask/tensor.hpp"

namespace themask {

/// Label used for pixels excluded from evaluation.
inline constexpr int kIgnoreLabel = 0;

/// N (class distribution, mask) pairs for one clip. Class index k in
/// [0, K) is label k+1; column K is the no-object label.
struct PredictionSet {
  Tensor class_probs;  // [N x (K+1)], rows on the simplex
  Tensor mask_logits;  // [N x T*H*W], frame-major
  std::size_t frames = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t num_queries() const { return class_probs.dim(0); }
  std::size_t num_classes() const { return class_probs.dim(1) - 1; }
  std::size_t pixels() const { return frames * height * width; }
  Tensor mask_probs() const { return sigmoid(mask_logits); }

  void validate() const {
    if (class_probs.rank() != 2 || mask_logits.rank() != 2 ||
        class_probs.dim(0) != mask_logits.dim(0) || class_probs.dim(1) < 2 ||
        mask_logits.dim(1) != pixels()) {
      throw DimensionError("prediction set shapes disagree: classes " +
                           shape_str(class_probs.shape()) + ", masks " +
                           shape_str(mask_logits.shape()));
    }
  }
};

struct GroundTruthInstance {
  int label = 0;             // in 1..K
  std::vector<double> mask;  // binary, T*H*W frame-major
};

struct GroundTruth {
  std::size_t frames = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<GroundTruthInstance> instances;

  std::size_t size() const { return instances.size(); }
  std::size_t pixels() const { return frames * height * width; }

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& inst : instances) out.push_back(inst.label);
    return out;
  }

  /// Masks stacked as a constant [N^gt x T*H*W] tensor.
  Tensor mask_matrix() const {
    std::vector<double> v;
    v.reserve(size() * pixels());
    for (const auto& inst : instances) v.insert(v.end(), inst.mask.begin(), inst.mask.end());
    return Tensor::from_data({size(), pixels()}, std::move(v));
  }

  void validate(std::size_t num_classes) const {
    for (const auto& inst : instances) {
      if (inst.mask.size() != pixels()) {
        throw DimensionError("ground-truth mask has " + std::to_string(inst.mask.size()) +
                             " entries, expected " + std::to_string(pixels()));
      }
      if (inst.label < 1 || inst.label > static_cast<int>(num_classes)) {
        throw ContractError("ground-truth label " + std::to_string(inst.label) +
                            " outside 1.." + std::to_string(num_classes));
      }
    }
  }
};

}  // namespace themask

#pragma once

// Label maps from prediction pairs, clip-wise video inference, and
// evaluation metrics.

#include <cstddef>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "themask/assignment.hpp"
#include "themask/decoder.hpp"
#include "themask/errors.hpp"
#include "themask/prediction.hpp"

namespace themask {

/// Labels in 1..K, frame-major T x H x W.
struct LabelMap {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  std::size_t pixels() const { return frames * height * width; }
  bool operator==(const LabelMap&) const = default;
};

namespace detail {

/// Per-pixel argmax over classes of a [K x P] score table; the first
/// maximum wins, so ties go to the smallest label.
inline std::vector<int> argmax_labels(const std::vector<double>& score, std::size_t k,
                                      std::size_t px) {
  std::vector<int> out(px, 1);
  std::vector<double> best(score.begin(), score.begin() + static_cast<long>(px));
  for (std::size_t c = 1; c < k; ++c) {
    const double* row = score.data() + c * px;
    for (std::size_t x = 0; x < px; ++x) {
      if (row[x] > best[x]) {
        best[x] = row[x];
        out[x] = static_cast<int>(c + 1);
      }
    }
  }
  return out;
}

}  // namespace detail

/// label(x) = argmax_c sum_i p_i(c) * sigmoid(m_i(x)), no-object excluded.
inline LabelMap aggregate_semantic(const PredictionSet& p) {
  p.validate();
  const std::size_t n = p.num_queries();
  const std::size_t k = p.num_classes();
  const std::size_t px = p.pixels();
  const auto cls = p.class_probs.data();
  const Tensor probs = p.mask_probs().detach();
  const auto m = probs.data();
  std::vector<double> score(k * px, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double* row = score.data() + c * px;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = cls[i * (k + 1) + c];
      const double* mi = m.data() + i * px;
      for (std::size_t x = 0; x < px; ++x) row[x] += w * mi[x];
    }
  }
  return {p.frames, p.height, p.width, detail::argmax_labels(score, k, px)};
}

/// Averages each query's video-level and frame-level terms before summing:
/// score(c, t, x) = sum_i 0.5 * (pv_i(c) mv_i(t, x) + pt_i(c) mt_i(x)).
inline LabelMap aggregate_video_frame(const PredictionSet& video,
                                      const std::vector<PredictionSet>& frames) {
  video.validate();
  if (frames.size() != video.frames) {
    throw DimensionError("aggregate_video_frame: " + std::to_string(frames.size()) +
                         " frame sets for a clip of " + std::to_string(video.frames));
  }
  const std::size_t n = video.num_queries();
  const std::size_t k = video.num_classes();
  const std::size_t hw = video.height * video.width;
  const std::size_t px = video.pixels();
  for (const auto& f : frames) {
    f.validate();
    if (f.num_queries() != n || f.num_classes() != k || f.frames != 1 ||
        f.height != video.height || f.width != video.width) {
      throw DimensionError("aggregate_video_frame: frame set does not match the video set");
    }
  }
  const auto vc = video.class_probs.data();
  const Tensor vprobs = video.mask_probs().detach();
  const auto vm = vprobs.data();
  std::vector<double> score(k * px, 0.0);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto fc = frames[t].class_probs.data();
    const Tensor fprobs = frames[t].mask_probs().detach();
    const auto fm = fprobs.data();
    for (std::size_t c = 0; c < k; ++c) {
      double* row = score.data() + c * px + t * hw;
      for (std::size_t i = 0; i < n; ++i) {
        const double wv = vc[i * (k + 1) + c];
        const double wf = fc[i * (k + 1) + c];
        const double* mv = vm.data() + i * px + t * hw;
        const double* mf = fm.data() + i * hw;
        for (std::size_t x = 0; x < hw; ++x) row[x] += 0.5 * (wv * mv[x] + wf * mf[x]);
      }
    }
  }
  return {video.frames, video.height, video.width, detail::argmax_labels(score, k, px)};
}

/// Concatenates label maps along time.
inline LabelMap concat_frames(const std::vector<LabelMap>& parts) {
  LabelMap out;
  for (const auto& p : parts) {
    if (out.frames == 0) {
      out.height = p.height;
      out.width = p.width;
    } else if (p.height != out.height || p.width != out.width) {
      throw DimensionError("concat_frames: frame sizes differ");
    }
    out.frames += p.frames;
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Confusion counts over an evaluation set. Ground-truth pixels equal to
/// kIgnoreLabel are skipped.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t num_classes)
      : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw ContractError("metrics need at least one class");
  }

  void add(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size()) {
      throw DimensionError("prediction has " + std::to_string(pred.size()) +
                           " pixels, ground truth " + std::to_string(gt.size()));
    }
    for (std::size_t x = 0; x < gt.size(); ++x) {
      if (gt[x] == kIgnoreLabel) continue;
      const auto g = check(gt[x]);
      const auto p = check(pred[x]);
      ++counts_[g * k_ + p];
    }
  }

  void add(const LabelMap& pred, const LabelMap& gt) { add(pred.labels, gt.labels); }

  /// IoU of label c+1, or nullopt when the class appears in neither map.
  std::optional<double> iou(std::size_t c) const {
    const auto tp = at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < k_; ++o) {
      if (o == c) continue;
      fp += at(o, c);
      fn += at(c, o);
    }
    const auto denom = tp + fp + fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(denom);
  }

  std::vector<std::optional<double>> per_class_iou() const {
    std::vector<std::optional<double>> out;
    for (std::size_t c = 0; c < k_; ++c) out.push_back(iou(c));
    return out;
  }

  double miou() const {
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k_; ++c) {
      if (auto v = iou(c)) {
        sum += *v;
        ++present;
      }
    }
    return present == 0 ? 0.0 : sum / static_cast<double>(present);
  }

  /// Ground-truth-frequency weighted IoU.
  double wiou() const {
    std::uint64_t total = 0;
    for (auto v : counts_) total += v;
    if (total == 0) return 0.0;
    double out = 0.0;
    for (std::size_t c = 0; c < k_; ++c) {
      std::uint64_t gt = 0;
      for (std::size_t o = 0; o < k_; ++o) gt += at(c, o);
      if (gt == 0) continue;
      out += static_cast<double>(gt) / static_cast<double>(total) * iou(c).value();
    }
    return out;
  }

  std::size_t num_classes() const { return k_; }

 private:
  std::size_t check(int label) const {
    if (label < 1 || label > static_cast<int>(k_)) {
      throw ContractError("label " + std::to_string(label) + " outside 1.." +
                          std::to_string(k_));
    }
    return static_cast<std::size_t>(label - 1);
  }
  std::uint64_t at(std::size_t g, std::size_t p) const { return counts_[g * k_ + p]; }

  std::size_t k_;
  std::vector<std::uint64_t> counts_;  // [gt][pred]
};

inline double miou(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  ConfusionAccumulator acc(k);
  acc.add(pred, gt);
  return acc.miou();
}

inline double wiou(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  ConfusionAccumulator acc(k);
  acc.add(pred, gt);
  return acc.wiou();
}

/// Running means of match sizes, one sample per clip.
class MatchStats {
 public:
  void add(const MatchResult& m) {
    ++clips_;
    r1_ += static_cast<double>(m.round1_size());
    r2_ += static_cast<double>(m.round2_size());
    unmatched_ += static_cast<double>(m.unmatched.size());
    queries_ += static_cast<double>(m.num_queries);
  }

  std::size_t clips() const { return clips_; }
  double matched_round1() const { return mean(r1_); }
  double matched_round2() const { return mean(r2_); }
  double unmatched() const { return mean(unmatched_); }
  double queries() const { return mean(queries_); }

  void merge(const MatchStats& o) {
    clips_ += o.clips_;
    r1_ += o.r1_;
    r2_ += o.r2_;
    unmatched_ += o.unmatched_;
    queries_ += o.queries_;
  }
  /// Every ground truth gets exactly one round-one query.
  double categories_per_clip() const { return mean(r1_); }

 private:
  double mean(double v) const { return clips_ == 0 ? 0.0 : v / static_cast<double>(clips_); }

  std::size_t clips_ = 0;
  double r1_ = 0.0, r2_ = 0.0, unmatched_ = 0.0, queries_ = 0.0;
};

// ---------------------------------------------------------------------------
// Clip-wise inference

/// Consecutive [begin, end) frame ranges of length t; the last may be short.
inline std::vector<std::pair<std::size_t, std::size_t>> clip_ranges(std::size_t total,
                                                                    std::size_t t) {
  if (t == 0) throw ContractError("clip length must be at least 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < total; b += t) out.emplace_back(b, std::min(total, b + t));
  return out;
}

/// Label map of a clip from one layer's inference outputs, using the
/// aggregation that matches the temporal mode.
inline LabelMap label_map(const LayerPredictions& layer, TemporalMode mode) {
  switch (mode) {
    case TemporalMode::one_to_video:
      return aggregate_semantic(*layer.video);
    case TemporalMode::video_frame:
      return aggregate_video_frame(*layer.video, layer.frames);
    case TemporalMode::one_to_frame: {
      std::vector<LabelMap> parts;
      for (const auto& f : layer.frames) parts.push_back(aggregate_semantic(f));
      return concat_frames(parts);
    }
  }
  throw ContractError("unknown temporal mode");
}

inline LabelMap predict_clip(const ParamStore& ps, const ModelConfig& cfg, const Tensor& input,
                             std::size_t frames) {
  ForwardOptions opt;
  opt.inference = true;
  const EncodedClip enc = encode(ps, cfg, input, frames);
  return label_map(Decoder(ps, cfg).forward(enc, opt).final_layer(), cfg.mode);
}

/// Splits a [T_total*H*W x ch] video into non-overlapping clips of length
/// t, labels each independently and concatenates the results in order.
inline LabelMap clipwise_infer(
    const Tensor& video, std::size_t total_frames, std::size_t t,
    const std::function<LabelMap(const Tensor& clip, std::size_t frames)>& infer) {
  if (video.rank() != 2 || total_frames == 0 || video.dim(0) % total_frames != 0) {
    throw DimensionError("clipwise_infer: video of shape " + shape_str(video.shape()) +
                         " does not hold " + std::to_string(total_frames) + " frames");
  }
  const std::size_t per_frame = video.dim(0) / total_frames;
  std::vector<LabelMap> parts;
  for (auto [b, e] : clip_ranges(total_frames, t)) {
    const Tensor clip = narrow(video, 0, b * per_frame, (e - b) * per_frame);
    LabelMap m = infer(clip, e - b);
    if (m.frames != e - b) throw ContractError("clip inference returned the wrong frame count");
    parts.push_back(std::move(m));
  }
  return concat_frames(parts);
}

inline LabelMap clipwise_infer(const ParamStore& ps, const ModelConfig& cfg, const Tensor& video,
                               std::size_t total_frames, std::size_t t) {
  return clipwise_infer(video, total_frames, t, [&](const Tensor& clip, std::size_t f) {
    return predict_clip(ps, cfg, clip, f);
  });
}

}  // namespace themask

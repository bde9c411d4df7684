#pragma once

// Synthetic moving-shape clips: label grids, per-class ground-truth masks,
// and noisy one-hot feature channels.

#include <algorithm>
#include <cstdio>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "themask/errors.hpp"
#include "themask/prediction.hpp"
#include "themask/rng.hpp"
#include "themask/serialize.hpp"
#include "themask/tensor.hpp"

namespace themask {

/// Label 1 is the background class; shapes take distinct labels in 2..K.
inline constexpr int kBackgroundLabel = 1;

enum class ShapeKind { rectangle, circle, triangle };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  int label = 2;
  long cx = 0, cy = 0;  // centre at frame 0
  long rx = 1, ry = 1;  // half extents; circles use rx
  long vx = 0, vy = 0;  // pixels per frame
};

struct DataConfig {
  std::size_t num_classes = 4;  // including background
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t frames = 4;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  long min_size = 4;  // half extent range in pixels
  long max_size = 8;
  long max_speed = 2;
  double noise = 0.3;

  void validate() const {
    if (height < 8 || width < 8) throw ContractError("clips must be at least 8x8");
    if (num_classes < 2) throw ContractError("need at least 2 classes");
    if (frames < 1) throw ContractError("clips need at least one frame");
    if (min_shapes < 1 || min_shapes > max_shapes)
      throw ContractError("shape count range is empty");
    if (max_shapes + 1 > num_classes)
      throw ContractError("more shapes than non-background classes");
    if (min_size < 1 || min_size > max_size) throw ContractError("shape size range is empty");
    if (max_speed < 0 || !(noise >= 0.0)) throw ContractError("bad motion or noise setting");
  }
};

struct Clip {
  std::size_t frames = 0, height = 0, width = 0;
  std::size_t channels = 0;  // equals the class count
  Tensor features;          // [T*H*W x channels]
  std::vector<int> labels;  // T*H*W, frame-major
  GroundTruth gt;           // one instance per class present, ascending label
};

namespace detail {

inline bool shape_covers(const ShapeSpec& s, long t, long x, long y) {
  const long cx = s.cx + s.vx * t;
  const long cy = s.cy + s.vy * t;
  const long dx = x - cx, dy = y - cy;
  switch (s.kind) {
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
    case ShapeKind::circle:
      return dx * dx + dy * dy <= s.rx * s.rx;
    case ShapeKind::triangle:
      // apex up, base at cy + ry
      return dy >= -s.ry && dy <= s.ry && 2 * std::abs(dx) <= dy + s.ry;
  }
  return false;
}

}  // namespace detail

/// Paints shapes in order (later ones on top) over the background.
inline std::vector<int> render_labels(const std::vector<ShapeSpec>& shapes, std::size_t frames,
                                      std::size_t height, std::size_t width) {
  std::vector<int> out(frames * height * width, kBackgroundLabel);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        int& px = out[(t * height + y) * width + x];
        for (const auto& s : shapes) {
          if (detail::shape_covers(s, static_cast<long>(t), static_cast<long>(x),
                                   static_cast<long>(y)))
            px = s.label;
        }
      }
    }
  }
  return out;
}

/// One instance per label present anywhere in the clip.
inline GroundTruth ground_truth_from_labels(const std::vector<int>& labels, std::size_t frames,
                                            std::size_t height, std::size_t width,
                                            std::size_t num_classes) {
  GroundTruth gt;
  gt.frames = frames;
  gt.height = height;
  gt.width = width;
  for (std::size_t c = 1; c <= num_classes; ++c) {
    GroundTruthInstance inst;
    inst.label = static_cast<int>(c);
    inst.mask.resize(labels.size());
    bool any = false;
    for (std::size_t x = 0; x < labels.size(); ++x) {
      inst.mask[x] = labels[x] == inst.label ? 1.0 : 0.0;
      any = any || labels[x] == inst.label;
    }
    if (any) gt.instances.push_back(std::move(inst));
  }
  return gt;
}

/// Builds a clip from explicit shapes. Feature channel c is the indicator
/// of label c+1 plus N(0, noise^2).
inline Clip render_clip(const std::vector<ShapeSpec>& shapes, const DataConfig& cfg, Rng& rng) {
  Clip clip;
  clip.frames = cfg.frames;
  clip.height = cfg.height;
  clip.width = cfg.width;
  clip.channels = cfg.num_classes;
  clip.labels = render_labels(shapes, cfg.frames, cfg.height, cfg.width);
  for (int l : clip.labels) {
    if (l < 1 || l > static_cast<int>(cfg.num_classes))
      throw ContractError("shape label outside 1..K");
  }
  const std::size_t k = cfg.num_classes;
  std::vector<double> feat(clip.labels.size() * k);
  for (std::size_t x = 0; x < clip.labels.size(); ++x) {
    for (std::size_t c = 0; c < k; ++c) {
      const double on = clip.labels[x] == static_cast<int>(c + 1) ? 1.0 : 0.0;
      feat[x * k + c] = on + cfg.noise * rng.normal();
    }
  }
  clip.features = Tensor::from_data({clip.labels.size(), k}, std::move(feat));
  clip.gt = ground_truth_from_labels(clip.labels, cfg.frames, cfg.height, cfg.width, k);
  return clip;
}

inline ShapeSpec random_shape(Rng& rng, int label, const DataConfig& cfg) {
  ShapeSpec s;
  s.kind = static_cast<ShapeKind>(rng.below(3));
  s.label = label;
  s.cx = static_cast<long>(rng.below(cfg.width));
  s.cy = static_cast<long>(rng.below(cfg.height));
  s.rx = rng.range(cfg.min_size, cfg.max_size);
  s.ry = rng.range(cfg.min_size, cfg.max_size);
  s.vx = rng.range(-cfg.max_speed, cfg.max_speed);
  s.vy = rng.range(-cfg.max_speed, cfg.max_speed);
  return s;
}

/// Random shapes with distinct non-background labels. A shape that ends up
/// invisible in every frame (clipped away or fully covered) is redrawn.
inline Clip generate_clip(Rng& rng, const DataConfig& cfg) {
  cfg.validate();
  const auto count = static_cast<std::size_t>(
      rng.range(static_cast<long>(cfg.min_shapes), static_cast<long>(cfg.max_shapes)));
  std::vector<int> pool;
  for (std::size_t c = 2; c <= cfg.num_classes; ++c) pool.push_back(static_cast<int>(c));
  rng.shuffle(pool);
  std::vector<ShapeSpec> shapes;
  for (std::size_t i = 0; i < count; ++i) shapes.push_back(random_shape(rng, pool[i], cfg));
  for (int attempt = 0;; ++attempt) {
    const auto labels = render_labels(shapes, cfg.frames, cfg.height, cfg.width);
    bool redrawn = false;
    for (auto& s : shapes) {
      if (std::find(labels.begin(), labels.end(), s.label) == labels.end()) {
        s = random_shape(rng, s.label, cfg);
        redrawn = true;
      }
    }
    if (!redrawn) break;
    if (attempt > 1000) throw ContractError("could not place visible shapes");
  }
  return render_clip(shapes, cfg, rng);
}

/// Mirrors every frame left to right.
inline Clip hflip(const Clip& c) {
  Clip out = c;
  const std::size_t w = c.width, ch = c.channels;
  auto src = c.features.data();
  std::vector<double> feat(src.size());
  for (std::size_t row = 0; row < c.frames * c.height; ++row) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t from = row * w + x, to = row * w + (w - 1 - x);
      out.labels[to] = c.labels[from];
      for (std::size_t k = 0; k < ch; ++k) feat[to * ch + k] = src[from * ch + k];
      for (std::size_t i = 0; i < c.gt.size(); ++i) {
        out.gt.instances[i].mask[to] = c.gt.instances[i].mask[from];
      }
    }
  }
  out.features = Tensor::from_data(c.features.shape(), std::move(feat));
  return out;
}

/// Frames [begin, begin+len) of a clip.
inline Clip slice_frames(const Clip& c, std::size_t begin, std::size_t len) {
  if (len == 0 || begin + len > c.frames) throw ContractError("frame window out of range");
  const std::size_t hw = c.height * c.width;
  Clip out;
  out.frames = len;
  out.height = c.height;
  out.width = c.width;
  out.channels = c.channels;
  out.features = narrow(c.features, 0, begin * hw, len * hw).detach();
  out.labels.assign(c.labels.begin() + static_cast<long>(begin * hw),
                    c.labels.begin() + static_cast<long>((begin + len) * hw));
  out.gt = ground_truth_from_labels(out.labels, len, c.height, c.width, c.channels);
  return out;
}

/// Clip i comes from stream i of the root seed, so the set does not depend
/// on the worker count.
inline std::vector<Clip> generate_clips(std::uint64_t seed, std::size_t count,
                                        const DataConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  const Rng root(seed);
  std::vector<Clip> out(count);
  threads = std::max<std::size_t>(1, std::min(threads, count));
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < count; i += threads) {
      Rng r = root.split(i);
      out[i] = generate_clip(r, cfg);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  return out;
}

inline Tensor labels_tensor(const std::vector<int>& labels, std::size_t frames, std::size_t h,
                            std::size_t w) {
  return Tensor::from_data({frames, h, w}, std::vector<double>(labels.begin(), labels.end()));
}

/// Writes clip_XXXX.features.them / .labels.them plus clips.json.
inline void write_clips(const std::filesystem::path& dir, const std::vector<Clip>& clips,
                        const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = meta;
  index["clips"] = nlohmann::json::array();
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu", i);
    const auto& c = clips[i];
    save_tensor_file(dir / (std::string(name) + ".features.them"), c.features);
    save_tensor_file(dir / (std::string(name) + ".labels.them"),
                     labels_tensor(c.labels, c.frames, c.height, c.width));
    index["clips"].push_back({{"name", name},
                              {"frames", c.frames},
                              {"height", c.height},
                              {"width", c.width},
                              {"channels", c.channels},
                              {"labels_present", c.gt.labels()}});
  }
  std::ofstream out(dir / "clips.json");
  if (!out) throw IoError("cannot write " + (dir / "clips.json").string());
  out << index.dump(2) << "\n";
}

}  // namespace themask

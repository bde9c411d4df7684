#pragma once

// Feature encoder and temporal aggregation decoder.
//
// The encoder turns per-pixel input channels into a ladder of feature maps
// (full, 1/2 and 1/4 resolution) plus per-pixel mask features. The decoder
// refines N object queries against those maps, one scale per layer in a
// round-robin schedule, and emits class distributions and mask logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "themask/errors.hpp"
#include "themask/params.hpp"
#include "themask/prediction.hpp"
#include "themask/rng.hpp"
#include "themask/tensor.hpp"

namespace themask {

enum class TemporalMode {
  one_to_video,  // one query set attends to every frame's tokens at once
  one_to_frame,  // a query set per frame, never merged
  video_frame,   // per-frame queries initialized from and merged back into video queries
};

inline std::string to_string(TemporalMode m) {
  switch (m) {
    case TemporalMode::one_to_video: return "one_to_video";
    case TemporalMode::one_to_frame: return "one_to_frame";
    case TemporalMode::video_frame: return "video_frame";
  }
  return "?";
}

inline TemporalMode temporal_mode_from_string(const std::string& s) {
  if (s == "one_to_video") return TemporalMode::one_to_video;
  if (s == "one_to_frame") return TemporalMode::one_to_frame;
  if (s == "video_frame") return TemporalMode::video_frame;
  throw UsageError("unknown temporal mode '" + s + "'");
}

struct ModelConfig {
  std::size_t num_queries = 8;
  std::size_t channels = 32;
  std::size_t layers = 3;
  std::size_t heads = 1;
  std::size_t num_scales = 3;
  std::size_t num_classes = 4;  // K, without no-object
  std::size_t in_channels = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  TemporalMode mode = TemporalMode::video_frame;

  void validate() const {
    if (layers < 1 || num_queries < 1 || channels < 1 || heads < 1) {
      throw ContractError("decoder needs at least one layer, query, channel and head");
    }
    if (channels % heads != 0) throw ContractError("channels must be divisible by heads");
    if (num_scales < 1 || num_scales > 3) throw ContractError("num_scales must be 1, 2 or 3");
    if (num_classes < 1 || in_channels < 1) throw ContractError("need classes and input channels");
    if (height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0) {
      throw ContractError("height and width must be positive multiples of 4");
    }
  }

  /// Spatial size of scale s in the order scales are fed to layers
  /// (increasing resolution).
  std::size_t scale_height(std::size_t s) const { return height >> (2 - s); }
  std::size_t scale_width(std::size_t s) const { return width >> (2 - s); }
  std::size_t scale_tokens(std::size_t s) const { return scale_height(s) * scale_width(s); }

  /// Scale consumed by decoder layer `layer` (0-based).
  std::size_t scale_of_layer(std::size_t layer) const { return layer % num_scales; }
};

/// Creates every parameter with its initial value: weights, biases and
/// embeddings uniform in [-1/sqrt(C), 1/sqrt(C)], norm gains 1 and biases 0,
/// gate biases 0.
inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore ps;
  const std::size_t c = cfg.channels;
  const double b = 1.0 / std::sqrt(static_cast<double>(c));
  auto lin = [&](const std::string& name, std::size_t in, std::size_t out, const char* group) {
    ps.add_uniform(name + ".w", {in, out}, b, group, rng);
    ps.add_uniform(name + ".b", {out}, b, group, rng);
  };
  auto norm = [&](const std::string& name) {
    ps.add_constant(name + ".g", {c}, 1.0, kDecoderGroup);
    ps.add_constant(name + ".b", {c}, 0.0, kDecoderGroup);
  };
  auto attn = [&](const std::string& name, bool out_proj) {
    lin(name + ".q", c, c, kDecoderGroup);
    // no key bias: it shifts each attention row by a constant
    ps.add_uniform(name + ".k.w", {c, c}, b, kDecoderGroup, rng);
    lin(name + ".v", c, c, kDecoderGroup);
    if (out_proj) lin(name + ".o", c, c, kDecoderGroup);
  };

  lin("encoder.stem", 9 * cfg.in_channels, c, kBackboneGroup);
  lin("encoder.down1", 4 * c, c, kBackboneGroup);
  lin("encoder.down2", 4 * c, c, kBackboneGroup);
  lin("encoder.pixel", c, c, kBackboneGroup);

  ps.add_uniform("decoder.query_feat", {cfg.num_queries, c}, b, kDecoderGroup, rng);
  ps.add_uniform("decoder.query_pos", {cfg.num_queries, c}, b, kDecoderGroup, rng);
  for (std::size_t s = 0; s < cfg.num_scales; ++s) {
    const std::string p = "decoder.scale" + std::to_string(s);
    ps.add_uniform(p + ".level", {c}, b, kDecoderGroup, rng);
    ps.add_uniform(p + ".pos", {cfg.scale_tokens(s), c}, b, kDecoderGroup, rng);
  }
  if (cfg.mode == TemporalMode::video_frame) attn("decoder.init", false);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    norm(p + ".norm_cross");
    attn(p + ".cross", true);
    norm(p + ".norm_self");
    attn(p + ".self", true);
    norm(p + ".norm_ffn");
    lin(p + ".ffn1", c, 2 * c, kDecoderGroup);
    lin(p + ".ffn2", 2 * c, c, kDecoderGroup);
    if (cfg.mode == TemporalMode::video_frame) {
      ps.add_uniform(p + ".gate.w", {c, 1}, b, kDecoderGroup, rng);
      ps.add_constant(p + ".gate.b", {1}, 0.0, kDecoderGroup);
    }
  }
  norm("decoder.norm");
  lin("decoder.class", c, cfg.num_classes + 1, kDecoderGroup);
  lin("decoder.mask1", c, c, kDecoderGroup);
  lin("decoder.mask2", c, c, kDecoderGroup);
  return ps;
}

// ---------------------------------------------------------------------------
// Encoder

struct EncodedClip {
  std::size_t frames = 0;
  std::vector<Tensor> scales;  // scale s: [T * H_s * W_s x C], frame-major
  Tensor pixel;                // [T * H * W x C]
};

namespace detail {

inline Tensor apply_linear(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return linear(x, ps[name + ".w"], ps[name + ".b"]);
}

inline Tensor apply_norm(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return layer_norm(x, ps[name + ".g"], ps[name + ".b"]);
}

// [T*H*W x C] -> [T*(H/2)*(W/2) x 4C], grouping each 2x2 block.
inline Tensor patchify(const Tensor& x, std::size_t t, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(1);
  Tensor r = reshape(x, {t, h / 2, 2, w / 2, 2, c});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, {t * (h / 2) * (w / 2), 4 * c});
}

// [T*H*W x C] -> [T*H*W x 9C]: each pixel's 3x3 neighbourhood within its
// frame, row-major offsets, edges replicated. A linear map of this is a 3x3
// convolution.
inline Tensor neighbourhood3x3(const Tensor& x, std::size_t t, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(9 * t * h * w);
  auto clampi = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1));
  };
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx)
            idx.push_back((f * h + clampi(static_cast<long>(y) + dy, h)) * w +
                          clampi(static_cast<long>(xx) + dx, w));
  return reshape(index_select(x, 0, std::move(idx)), {t * h * w, 9 * c});
}

}  // namespace detail

/// `input` is [T*H*W x in_channels], frame-major, row-major within a frame.
inline EncodedClip encode(const ParamStore& ps, const ModelConfig& cfg, const Tensor& input,
                          std::size_t frames) {
  const std::size_t h = cfg.height, w = cfg.width;
  if (input.rank() != 2 || input.dim(0) != frames * h * w || input.dim(1) != cfg.in_channels) {
    throw DimensionError("encoder input " + shape_str(input.shape()) + ", expected [" +
                         std::to_string(frames * h * w) + " x " +
                         std::to_string(cfg.in_channels) + "]");
  }
  EncodedClip out;
  out.frames = frames;
  const Tensor full =
      gelu(detail::apply_linear(ps, "encoder.stem", detail::neighbourhood3x3(input, frames, h, w)));
  const Tensor half =
      gelu(detail::apply_linear(ps, "encoder.down1", detail::patchify(full, frames, h, w)));
  const Tensor quarter = gelu(
      detail::apply_linear(ps, "encoder.down2", detail::patchify(half, frames, h / 2, w / 2)));
  const Tensor ladder[3] = {quarter, half, full};
  for (std::size_t s = 0; s < cfg.num_scales; ++s) out.scales.push_back(ladder[s]);
  out.pixel = detail::apply_linear(ps, "encoder.pixel", full);
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Binary masks consumed by masked attention, in call order. Recording and
/// replaying them holds the masks fixed across perturbed forward passes.
struct AttentionMaskTape {
  enum class Mode { off, record, replay };
  Mode mode = Mode::off;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t cursor = 0;
};

struct AttentionRecord {
  std::string site;           // "init", "cross", "self"
  std::size_t layer = 0;
  std::size_t rows = 0;
  std::size_t width = 0;      // keys per attention row
  std::size_t fallback_rows = 0;
  double max_row_sum_error = 0.0;
};

struct ForwardTrace {
  std::vector<AttentionRecord> attention;
  std::vector<std::vector<double>> gate_weights;  // per layer, [T x N] flattened
};

/// Nearest-neighbour resize of [N x H*W] mask logits to h x w, then
/// probability >= 0.5 (logit >= 0) becomes 1.
inline std::vector<std::uint8_t> compute_attention_mask(std::span<const double> logits,
                                                        std::size_t n, std::size_t height,
                                                        std::size_t width, std::size_t h,
                                                        std::size_t w) {
  if (logits.size() != n * height * width) {
    throw DimensionError("attention mask source has " + std::to_string(logits.size()) +
                         " entries, expected " + std::to_string(n * height * width));
  }
  std::vector<std::uint8_t> out(n * h * w);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = y * height / h;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = x * width / w;
        out[(q * h + y) * w + x] = logits[(q * height + sy) * width + sx] >= 0.0 ? 1 : 0;
      }
    }
  }
  return out;
}

struct AttentionBlock {
  const ParamStore* ps = nullptr;
  std::string name;
  bool out_proj = true;
};

/// softmax(q k^T / sqrt(d) + mask) v per head, heads concatenated, then the
/// optional output projection. `mask` is [N x S]; a row with no admitted key
/// attends to every key instead.
inline Tensor attention(const AttentionBlock& blk, std::size_t heads, const Tensor& q_in,
                        const Tensor& k_in, const Tensor& v_in,
                        const std::vector<std::uint8_t>* mask, AttentionRecord* rec) {
  const ParamStore& ps = *blk.ps;
  const Tensor q = detail::apply_linear(ps, blk.name + ".q", q_in);
  const Tensor k = matmul(k_in, ps[blk.name + ".k.w"]);
  const Tensor v = detail::apply_linear(ps, blk.name + ".v", v_in);
  const std::size_t n = q.dim(0), s = k.dim(0), c = q.dim(1);
  if (k.dim(1) != c || v.dim(0) != s) throw DimensionError("attention operand shapes");

  std::vector<std::uint8_t> admit;
  std::size_t fallback = 0;
  if (mask) {
    if (mask->size() != n * s) {
      throw DimensionError("attention mask is " + std::to_string(mask->size()) + ", expected " +
                           std::to_string(n * s));
    }
    admit = *mask;
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < s && !any; ++j) any = admit[i * s + j] != 0;
      if (!any) {
        std::fill(admit.begin() + static_cast<long>(i * s),
                  admit.begin() + static_cast<long>((i + 1) * s), 1);
        ++fallback;
      }
    }
  }

  const std::size_t d = c / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outs;
  double row_err = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : narrow(q, 1, h * d, d);
    const Tensor kh = heads == 1 ? k : narrow(k, 1, h * d, d);
    const Tensor vh = heads == 1 ? v : narrow(v, 1, h * d, d);
    Tensor logits = scale(matmul_nt(qh, kh), inv);
    if (mask) logits = masked_fill(logits, admit, -std::numeric_limits<double>::infinity());
    const Tensor a = softmax(logits, 1);
    if (rec) {
      const auto av = a.data();
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < s; ++j) sum += av[i * s + j];
        row_err = std::max(row_err, std::abs(sum - 1.0));
      }
    }
    outs.push_back(matmul(a, vh));
  }
  Tensor out = heads == 1 ? outs[0] : concat(outs, 1);
  if (blk.out_proj) out = detail::apply_linear(ps, blk.name + ".o", out);
  if (rec) {
    rec->rows = n;
    rec->width = s;
    rec->fallback_rows = fallback;
    rec->max_row_sum_error = row_err;
  }
  return out;
}

/// Per query i: q_prev_i + sum_t w_t q^t_i with w = softmax over t of the
/// scalar gate applied to q^t_i. `frame_queries` holds T tensors [N x C].
inline Tensor aggregate_to_video(const Tensor& prev, const std::vector<Tensor>& frame_queries,
                                 const Tensor& gate_w, const Tensor& gate_b,
                                 std::vector<double>* weights_out = nullptr) {
  const std::size_t t = frame_queries.size();
  if (t == 0) throw ContractError("aggregation needs at least one frame");
  const std::size_t n = prev.dim(0), c = prev.dim(1);
  for (const auto& f : frame_queries) {
    if (f.shape() != prev.shape()) throw DimensionError("frame query shape mismatch");
  }
  const Tensor stacked = concat(frame_queries, 0);                     // [T*N x C]
  const Tensor scores = reshape(linear(stacked, gate_w, gate_b), {t, n});
  const Tensor w = softmax(scores, 0);                                 // [T x N]
  if (weights_out) weights_out->assign(w.data().begin(), w.data().end());
  const Tensor weighted = mul(reshape(stacked, {t, n, c}), reshape(w, {t, n, 1}));
  return add(prev, sum(weighted, 0));
}

// ---------------------------------------------------------------------------
// Decoder

struct ForwardOptions {
  /// Also build the video-level and frame-level prediction sets used at
  /// inference.
  bool inference = false;
  /// Emit training predictions after every layer, not only the last.
  bool every_layer = false;
  AttentionMaskTape* tape = nullptr;
  ForwardTrace* trace = nullptr;
};

struct LayerPredictions {
  /// Pairs supervised in training: [N x (K+1)] classes, [N x T*H*W] masks.
  PredictionSet train;
  /// Inference only. Video-level classes and masks; for one_to_frame the
  /// video-level set is not produced.
  std::optional<PredictionSet> video;
  std::vector<PredictionSet> frames;  // per frame, [N x H*W] masks
};

struct ForwardResult {
  std::vector<LayerPredictions> layers;  // last entry is the final layer
  Tensor video_queries;                  // [N x C]
  std::vector<Tensor> frame_queries;     // T x [N x C], empty for one_to_video

  const LayerPredictions& final_layer() const { return layers.back(); }
};

class Decoder {
 public:
  Decoder(const ParamStore& ps, const ModelConfig& cfg) : ps_(ps), cfg_(cfg) { cfg_.validate(); }

  /// Initial frame queries: unmasked attention of the video queries over
  /// that frame's tokens at all scales.
  std::vector<Tensor> init_frame_queries(const Tensor& video_queries,
                                         const std::vector<Tensor>& frame_tokens,
                                         ForwardTrace* trace) const {
    std::vector<Tensor> out;
    const AttentionBlock blk{&ps_, "decoder.init", false};
    for (const auto& tokens : frame_tokens) {
      AttentionRecord rec;
      out.push_back(attention(blk, cfg_.heads, video_queries, tokens, tokens, nullptr,
                              trace ? &rec : nullptr));
      if (trace) {
        rec.site = "init";
        trace->attention.push_back(rec);
      }
    }
    return out;
  }

  struct Heads {
    Tensor class_logits;  // [N x (K+1)]
    Tensor mask_embed;    // [N x C]
  };

  Heads heads(const Tensor& queries) const {
    const Tensor qn = detail::apply_norm(ps_, "decoder.norm", queries);
    Heads h;
    h.class_logits = detail::apply_linear(ps_, "decoder.class", qn);
    h.mask_embed = detail::apply_linear(
        ps_, "decoder.mask2", gelu(detail::apply_linear(ps_, "decoder.mask1", qn)));
    return h;
  }

  ForwardResult forward(const EncodedClip& enc, const ForwardOptions& opt = {}) const {
    const std::size_t t = enc.frames;
    const std::size_t hw = cfg_.height * cfg_.width;
    if (t == 0) throw ContractError("clip has no frames");
    if (enc.scales.size() != cfg_.num_scales) throw DimensionError("scale count mismatch");

    // tokens[s][f]: frame f at scale s, carrying level and position embeddings
    std::vector<std::vector<Tensor>> tokens(cfg_.num_scales);
    std::vector<Tensor> all_frames(cfg_.num_scales);
    for (std::size_t s = 0; s < cfg_.num_scales; ++s) {
      const std::size_t n_tok = cfg_.scale_tokens(s);
      const std::string p = "decoder.scale" + std::to_string(s);
      const Tensor feat = reshape(enc.scales[s], {t, n_tok, cfg_.channels});
      const Tensor tok = add(add(feat, ps_[p + ".pos"]), ps_[p + ".level"]);
      all_frames[s] = reshape(tok, {t * n_tok, cfg_.channels});
      for (std::size_t f = 0; f < t; ++f) {
        tokens[s].push_back(narrow(all_frames[s], 0, f * n_tok, n_tok));
      }
    }
    std::vector<Tensor> pixel_frames;
    for (std::size_t f = 0; f < t; ++f) pixel_frames.push_back(narrow(enc.pixel, 0, f * hw, hw));

    ForwardResult res;
    const Tensor& qv0 = ps_["decoder.query_feat"];
    const Tensor& pos = ps_["decoder.query_pos"];
    Tensor video = qv0;
    std::vector<Tensor> frames;
    if (cfg_.mode == TemporalMode::video_frame) {
      std::vector<Tensor> per_frame(t);
      for (std::size_t f = 0; f < t; ++f) {
        std::vector<Tensor> parts;
        for (std::size_t s = 0; s < cfg_.num_scales; ++s) parts.push_back(tokens[s][f]);
        per_frame[f] = concat(parts, 0);
      }
      frames = init_frame_queries(qv0, per_frame, opt.trace);
    } else if (cfg_.mode == TemporalMode::one_to_frame) {
      frames.assign(t, qv0);
    }

    // Mask logits of the current queries, for the next layer's attention mask.
    auto current_masks = [&]() {
      std::vector<std::vector<double>> out;
      if (cfg_.mode == TemporalMode::one_to_video) {
        const Tensor m = matmul_nt(heads(video).mask_embed, enc.pixel);
        out.emplace_back(m.data().begin(), m.data().end());
      } else {
        for (std::size_t f = 0; f < t; ++f) {
          const Tensor m = matmul_nt(heads(frames[f]).mask_embed, pixel_frames[f]);
          out.emplace_back(m.data().begin(), m.data().end());
        }
      }
      return out;
    };

    const std::size_t n = cfg_.num_queries;
    auto take_mask = [&](auto&& make) -> std::vector<std::uint8_t> {
      if (opt.tape && opt.tape->mode == AttentionMaskTape::Mode::replay) {
        if (opt.tape->cursor >= opt.tape->masks.size()) {
          throw ContractError("attention mask tape exhausted");
        }
        return opt.tape->masks[opt.tape->cursor++];
      }
      auto m = make();
      if (opt.tape && opt.tape->mode == AttentionMaskTape::Mode::record) {
        opt.tape->masks.push_back(m);
      }
      return m;
    };

    auto block = [&](const Tensor& q, const Tensor& keys, const std::vector<std::uint8_t>& mask,
                     const std::string& p, std::size_t layer) {
      AttentionRecord cross_rec, self_rec;
      const Tensor qn = detail::apply_norm(ps_, p + ".norm_cross", q);
      Tensor x = add(q, attention({&ps_, p + ".cross", true}, cfg_.heads, add(qn, pos), keys,
                                  keys, &mask, opt.trace ? &cross_rec : nullptr));
      const Tensor sn = detail::apply_norm(ps_, p + ".norm_self", x);
      const Tensor sq = add(sn, pos);
      x = add(x, attention({&ps_, p + ".self", true}, cfg_.heads, sq, sq, sn, nullptr,
                           opt.trace ? &self_rec : nullptr));
      const Tensor fn = detail::apply_norm(ps_, p + ".norm_ffn", x);
      x = add(x, detail::apply_linear(ps_, p + ".ffn2",
                                      gelu(detail::apply_linear(ps_, p + ".ffn1", fn))));
      if (opt.trace) {
        cross_rec.site = "cross";
        cross_rec.layer = layer;
        self_rec.site = "self";
        self_rec.layer = layer;
        opt.trace->attention.push_back(cross_rec);
        opt.trace->attention.push_back(self_rec);
      }
      return x;
    };

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::size_t s = cfg_.scale_of_layer(l);
      const std::size_t sh = cfg_.scale_height(s), sw = cfg_.scale_width(s);
      const std::size_t n_tok = sh * sw;
      const std::string p = "decoder.layer" + std::to_string(l);
      std::vector<std::vector<double>> prev;
      const bool need_prev = !(opt.tape && opt.tape->mode == AttentionMaskTape::Mode::replay);
      if (need_prev) prev = current_masks();

      if (cfg_.mode == TemporalMode::one_to_video) {
        auto mask = take_mask([&] {
          // [N x T*H*W] -> per frame resize, then lay frames side by side
          std::vector<std::uint8_t> m(n * t * n_tok);
          for (std::size_t f = 0; f < t; ++f) {
            std::vector<double> part(n * hw);
            for (std::size_t q = 0; q < n; ++q) {
              std::copy_n(prev[0].begin() + static_cast<long>(q * t * hw + f * hw), hw,
                          part.begin() + static_cast<long>(q * hw));
            }
            auto r = compute_attention_mask(part, n, cfg_.height, cfg_.width, sh, sw);
            for (std::size_t q = 0; q < n; ++q) {
              std::copy_n(r.begin() + static_cast<long>(q * n_tok), n_tok,
                          m.begin() + static_cast<long>(q * t * n_tok + f * n_tok));
            }
          }
          return m;
        });
        video = block(video, all_frames[s], mask, p, l);
      } else {
        for (std::size_t f = 0; f < t; ++f) {
          auto mask = take_mask([&] {
            return compute_attention_mask(prev[f], n, cfg_.height, cfg_.width, sh, sw);
          });
          frames[f] = block(frames[f], tokens[s][f], mask, p, l);
        }
        if (cfg_.mode == TemporalMode::video_frame) {
          std::vector<double> w;
          video = aggregate_to_video(video, frames, ps_[p + ".gate.w"], ps_[p + ".gate.b"],
                                     opt.trace ? &w : nullptr);
          if (opt.trace) opt.trace->gate_weights.push_back(std::move(w));
        }
      }
      if (opt.every_layer || l + 1 == cfg_.layers) {
        res.layers.push_back(predictions(video, frames, enc, pixel_frames, opt.inference));
      }
    }
    res.video_queries = video;
    res.frame_queries = frames;
    return res;
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  PredictionSet make_set(const Tensor& class_probs, const Tensor& mask_logits,
                         std::size_t frames) const {
    PredictionSet p;
    p.class_probs = class_probs;
    p.mask_logits = mask_logits;
    p.frames = frames;
    p.height = cfg_.height;
    p.width = cfg_.width;
    return p;
  }

  LayerPredictions predictions(const Tensor& video, const std::vector<Tensor>& frames,
                               const EncodedClip& enc, const std::vector<Tensor>& pixel_frames,
                               bool inference) const {
    const std::size_t t = enc.frames;
    LayerPredictions out;
    if (cfg_.mode == TemporalMode::one_to_video) {
      const Heads hv = heads(video);
      out.train = make_set(softmax(hv.class_logits, 1), matmul_nt(hv.mask_embed, enc.pixel), t);
      if (inference) out.video = out.train;
      return out;
    }
    std::vector<Heads> hf;
    std::vector<Tensor> masks;
    for (std::size_t f = 0; f < t; ++f) {
      hf.push_back(heads(frames[f]));
      masks.push_back(matmul_nt(hf.back().mask_embed, pixel_frames[f]));
    }
    const Tensor frame_masks = t == 1 ? masks[0] : concat(masks, 1);
    Tensor cls;
    std::optional<Heads> hv;
    if (cfg_.mode == TemporalMode::video_frame) {
      hv = heads(video);
      cls = softmax(hv->class_logits, 1);
    } else {
      // one_to_frame has no merged queries; its clip-level class is the
      // mean of the frame-level distributions
      Tensor acc = softmax(hf[0].class_logits, 1);
      for (std::size_t f = 1; f < t; ++f) acc = add(acc, softmax(hf[f].class_logits, 1));
      cls = scale(acc, 1.0 / static_cast<double>(t));
    }
    out.train = make_set(cls, frame_masks, t);
    if (inference) {
      if (hv) out.video = make_set(cls, matmul_nt(hv->mask_embed, enc.pixel), t);
      for (std::size_t f = 0; f < t; ++f) {
        out.frames.push_back(make_set(softmax(hf[f].class_logits, 1), masks[f], 1));
      }
    }
    return out;
  }

  const ParamStore& ps_;
  ModelConfig cfg_;
};

}  // namespace themask

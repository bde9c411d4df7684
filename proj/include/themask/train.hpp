#pragma once

// Two-phase training, evaluation, and ablation drivers.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "themask/assignment.hpp"
#include "themask/config.hpp"
#include "themask/data.hpp"
#include "themask/decoder.hpp"
#include "themask/infer.hpp"
#include "themask/loss.hpp"
#include "themask/optim.hpp"
#include "themask/params.hpp"
#include "themask/serialize.hpp"

namespace themask {

/// Worker cap from THEMASK_THREADS, else the hardware count.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("THEMASK_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw UsageError(std::string("THEMASK_THREADS must be a positive integer, got '") + env +
                       "'");
    }
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// Stream ids under the run seed. Clip i of the training set uses stream i.
inline constexpr std::uint64_t kInitStream = 1'000'000;
inline constexpr std::uint64_t kSamplerStream = 1'000'001;

inline std::vector<Clip> training_clips(const RunConfig& cfg, std::size_t threads = 1) {
  return generate_clips(cfg.seed, cfg.train_clips, cfg.data, threads);
}

inline ParamStore init_model(const RunConfig& cfg) {
  Rng rng = Rng(cfg.seed).split(kInitStream);
  return init_params(cfg.model_config(), rng);
}

inline int rounds_for(LossVariant v) { return v == LossVariant::baseline ? 1 : 2; }

enum class Phase { warmup, main };

inline std::string to_string(Phase p) { return p == Phase::warmup ? "warmup" : "main"; }

/// Loss variant in force at an iteration.
inline LossVariant variant_at(const RunConfig& cfg, std::size_t iter) {
  if (cfg.warmup_one_round && iter < cfg.schedule.warmup_iters) return LossVariant::baseline;
  return cfg.variant;
}

struct Sample {
  Tensor features;
  GroundTruth gt;
  std::size_t frames = 0;
  std::vector<std::size_t> points;  // empty: every pixel
};

/// A random t-frame window of a random training clip, flipped with
/// probability hflip_prob.
inline Sample draw_sample(const std::vector<Clip>& clips, const RunConfig& cfg, Rng& rng) {
  const Clip& c = clips[rng.below(clips.size())];
  const std::size_t start = rng.below(c.frames - cfg.clip_length + 1);
  Clip w = slice_frames(c, start, cfg.clip_length);
  if (rng.bernoulli(cfg.hflip_prob)) w = hflip(w);
  Sample s;
  s.features = w.features;
  s.gt = std::move(w.gt);
  s.frames = w.frames;
  if (cfg.num_points > 0) {
    const std::size_t px = s.gt.pixels();
    for (std::size_t i = 0; i < cfg.num_points; ++i) s.points.push_back(rng.below(px));
  }
  return s;
}

struct StepOutput {
  Tensor loss;  // mean over the batch, differentiable
  LossTerms terms;  // batch means; total holds no graph
  MatchStats stats;
};

/// Forward, match and loss for one batch. Deep supervision adds every
/// layer's loss, each layer matched on its own predictions.
inline StepOutput batch_loss(const ParamStore& ps, const RunConfig& cfg,
                             const std::vector<Sample>& batch, LossVariant variant) {
  const ModelConfig mc = cfg.model_config();
  const Decoder dec(ps, mc);
  ForwardOptions fo;
  fo.every_layer = cfg.deep_supervision;
  CostConfig cc;
  cc.lambda_ce = cfg.loss.ce_r1;
  cc.lambda_dice = cfg.loss.dice_r1;
  StepOutput out;
  double hard = 0.0, soft = 0.0, cls = 0.0;
  std::vector<Tensor> losses;
  for (const auto& s : batch) {
    const ForwardResult r = dec.forward(encode(ps, mc, s.features, s.frames), fo);
    cc.points = s.points;
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
      const PredictionSet& p = r.layers[l].train;
      const MatchResult m = match_queries(build_cost_components(p, s.gt, cc), rounds_for(variant));
      const LossTerms t = hierarchical_loss(p, s.gt, m, cfg.loss, variant, s.points);
      losses.push_back(t.total);
      if (l + 1 == r.layers.size()) {
        out.stats.add(m);
        hard += t.hard;
        soft += t.soft;
        cls += t.cls;
      }
    }
  }
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss = scale(total, inv);
  out.terms.total = Tensor::scalar(out.loss.item());
  out.terms.hard = hard * inv;
  out.terms.soft = soft * inv;
  out.terms.cls = cls * inv;
  return out;
}

/// Copies a checkpoint into the model for finetuning; every parameter of
/// the model must be present with its shape and nothing extra is allowed.
inline void load_into(ParamStore& ps, const Checkpoint& ckpt) {
  ps.load(ckpt.tensors, {kBackboneGroup, kDecoderGroup}, true);
}

struct TrainResult {
  ParamStore params;
  std::vector<nlohmann::json> log;
  MatchStats main_phase_stats;  // matches of the iterations after warm-up
};

/// Runs the schedule. `on_log` receives each JSON log line as written.
inline TrainResult train_model(const RunConfig& cfg, const std::vector<Clip>& clips,
                               const std::function<void(const nlohmann::json&)>& on_log = {}) {
  cfg.validate();
  TrainResult res{init_model(cfg), {}, {}};
  ParamStore& ps = res.params;
  AdamWConfig oc;
  oc.weight_decay = cfg.optim.weight_decay;
  oc.lr_multiplier[kBackboneGroup] = cfg.optim.backbone_multiplier;
  if (!cfg.finetune.init_checkpoint.empty()) {
    load_into(ps, load_checkpoint(cfg.finetune.init_checkpoint));
    if (cfg.finetune.freeze_backbone) oc.frozen.insert(kBackboneGroup);
  }
  AdamW opt(oc);
  Rng rng = Rng(cfg.seed).split(kSamplerStream);
  const std::string hash = config_hash(cfg);
  for (std::size_t it = 0; it < cfg.schedule.total_iters; ++it) {
    const LossVariant variant = variant_at(cfg, it);
    const Phase phase = cfg.warmup_one_round && it < cfg.schedule.warmup_iters ? Phase::warmup
                                                                                : Phase::main;
    const double lr = poly_lr(it, cfg.schedule.total_iters, cfg.optim.lr, cfg.schedule.power);
    std::vector<Sample> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(draw_sample(clips, cfg, rng));
    ps.zero_grad();
    StepOutput step = batch_loss(ps, cfg, batch, variant);
    backward(step.loss);
    opt.step(ps, lr);
    nlohmann::json line = {{"iter", it},
                           {"phase", to_string(phase)},
                           {"variant", to_string(variant)},
                           {"lr", lr},
                           {"loss", step.terms.total.item()},
                           {"hard", step.terms.hard},
                           {"soft", step.terms.soft},
                           {"cls", step.terms.cls},
                           {"matched_round1", step.stats.matched_round1()},
                           {"matched_round2", step.stats.matched_round2()},
                           {"unmatched", step.stats.unmatched()},
                           {"categories_per_clip", step.stats.categories_per_clip()},
                           {"config_hash", hash}};
    if (phase == Phase::main) res.main_phase_stats.merge(step.stats);
    if (on_log) on_log(line);
    res.log.push_back(std::move(line));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  ConfusionAccumulator confusion;
  MatchStats stats;
};

/// Clip-wise labels of every clip plus the match sizes of each clip
/// window's training predictions against its ground truth.
inline EvalResult evaluate_clips(const ParamStore& ps, const RunConfig& cfg,
                                 const std::vector<Clip>& clips, std::size_t threads) {
  const ModelConfig mc = cfg.model_config();
  const int rounds = rounds_for(cfg.variant);
  CostConfig cc;
  cc.lambda_ce = cfg.loss.ce_r1;
  cc.lambda_dice = cfg.loss.dice_r1;
  struct PerClip {
    LabelMap labels;
    std::vector<MatchResult> matches;
  };
  std::vector<PerClip> per(clips.size());
  parallel_for(clips.size(), threads, [&](std::size_t i) {
    const Clip& c = clips[i];
    std::vector<LabelMap> parts;
    for (auto [b, e] : clip_ranges(c.frames, cfg.clip_length)) {
      const Clip w = slice_frames(c, b, e - b);
      ForwardOptions fo;
      fo.inference = true;
      const ForwardResult r = Decoder(ps, mc).forward(encode(ps, mc, w.features, w.frames), fo);
      const LayerPredictions& last = r.final_layer();
      parts.push_back(label_map(last, mc.mode));
      per[i].matches.push_back(
          match_queries(build_cost_components(last.train, w.gt, cc), rounds));
    }
    per[i].labels = concat_frames(parts);
  });
  EvalResult out{ConfusionAccumulator(cfg.data.num_classes), {}};
  for (std::size_t i = 0; i < clips.size(); ++i) {
    out.confusion.add(per[i].labels.labels, clips[i].labels);
    for (const auto& m : per[i].matches) out.stats.add(m);
  }
  return out;
}

inline nlohmann::json optional_list(const std::vector<std::optional<double>>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& x : v) out.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return out;
}

/// Metrics JSON over the configured evaluation set. Heldout evaluation with
/// runs > 1 reports the mean over eval seeds seed, seed+1, ...
inline nlohmann::json evaluate_model(const ParamStore& ps, const RunConfig& cfg,
                                     std::size_t threads) {
  std::vector<EvalResult> runs;
  if (cfg.eval.source == "train") {
    runs.push_back(evaluate_clips(ps, cfg, training_clips(cfg, threads), threads));
  } else {
    for (std::size_t r = 0; r < cfg.eval.runs; ++r) {
      const auto clips = generate_clips(cfg.eval.seed + r, cfg.eval.num_clips, cfg.data, threads);
      runs.push_back(evaluate_clips(ps, cfg, clips, threads));
    }
  }
  const std::size_t k = cfg.data.num_classes;
  double miou_sum = 0.0, wiou_sum = 0.0, r1 = 0.0, r2 = 0.0, un = 0.0, cat = 0.0;
  std::vector<double> cls_sum(k, 0.0);
  std::vector<std::size_t> cls_n(k, 0);
  nlohmann::json per_run = nlohmann::json::array();
  for (const auto& r : runs) {
    miou_sum += r.confusion.miou();
    wiou_sum += r.confusion.wiou();
    r1 += r.stats.matched_round1();
    r2 += r.stats.matched_round2();
    un += r.stats.unmatched();
    cat += r.stats.categories_per_clip();
    const auto pc = r.confusion.per_class_iou();
    for (std::size_t c = 0; c < k; ++c) {
      if (pc[c]) {
        cls_sum[c] += *pc[c];
        ++cls_n[c];
      }
    }
    per_run.push_back({{"miou", r.confusion.miou()},
                       {"wiou", r.confusion.wiou()},
                       {"per_class_iou", optional_list(pc)}});
  }
  const double n = static_cast<double>(runs.size());
  std::vector<std::optional<double>> per_class(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (cls_n[c]) per_class[c] = cls_sum[c] / static_cast<double>(cls_n[c]);
  }
  return {{"miou", miou_sum / n},
          {"wiou", wiou_sum / n},
          {"per_class_iou", optional_list(per_class)},
          {"matched_round1", r1 / n},
          {"matched_round2", r2 / n},
          {"unmatched", un / n},
          {"categories_per_clip", cat / n},
          {"config_hash", config_hash(cfg)},
          {"seed", cfg.seed},
          {"eval_source", cfg.eval.source},
          {"eval_runs", per_run}};
}

// ---------------------------------------------------------------------------
// Files

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

inline Checkpoint make_checkpoint(const ParamStore& ps, const RunConfig& cfg) {
  Checkpoint ck;
  ck.tensors = ps.to_named();
  ck.meta = {{"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
  return ck;
}

/// Model for `cfg` with parameters from the checkpoint directory.
inline ParamStore load_model(const std::filesystem::path& dir, const RunConfig& cfg) {
  ParamStore ps = init_model(cfg);
  load_into(ps, load_checkpoint(dir));
  return ps;
}

/// Training run with files: config.json, train_log.jsonl, checkpoint/,
/// metrics.json (evaluation of the final parameters). Returns the metrics.
inline nlohmann::json run_training(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                   std::size_t threads) {
  std::filesystem::create_directories(out_dir);
  write_json(out_dir / "config.json", to_json(cfg));
  std::ofstream log(out_dir / "train_log.jsonl");
  if (!log) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());
  const auto clips = training_clips(cfg, threads);
  TrainResult res = train_model(cfg, clips, [&](const nlohmann::json& line) {
    log << line.dump() << "\n";
  });
  log.flush();
  save_checkpoint(out_dir / "checkpoint", make_checkpoint(res.params, cfg));
  nlohmann::json metrics = evaluate_model(res.params, cfg, threads);
  metrics["train_matched_round1"] = res.main_phase_stats.matched_round1();
  metrics["train_matched_round2"] = res.main_phase_stats.matched_round2();
  write_json(out_dir / "metrics.json", metrics);
  return metrics;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string name;
  RunConfig cfg;
};

inline std::vector<std::string> ablation_suites() {
  return {"matching_loss", "temporal_mode", "clip_length"};
}

/// Rows of a suite. Every row keeps the base seeds, so all rows train on
/// the same clips and are scored on the same evaluation clips.
inline std::vector<AblationRow> ablation_rows(const std::string& suite, const RunConfig& base) {
  std::vector<AblationRow> rows;
  if (suite == "matching_loss") {
    const std::pair<const char*, LossVariant> v[] = {
        {"one_round+original", LossVariant::baseline},
        {"two_round+original", LossVariant::two_round_original},
        {"two_round+hierarchical", LossVariant::hierarchical}};
    for (auto [name, variant] : v) {
      RunConfig c = base;
      c.variant = variant;
      rows.push_back({name, c});
    }
  } else if (suite == "temporal_mode") {
    for (std::size_t t : {2, 4}) {
      for (auto mode :
           {TemporalMode::one_to_video, TemporalMode::one_to_frame, TemporalMode::video_frame}) {
        RunConfig c = base;
        c.model.mode = mode;
        c.clip_length = t;
        c.data.frames = std::max(c.data.frames, t);
        rows.push_back({to_string(mode) + "/t=" + std::to_string(t), c});
      }
    }
  } else if (suite == "clip_length") {
    for (std::size_t t : {1, 2, 4}) {
      RunConfig c = base;
      c.clip_length = t;
      c.data.frames = std::max(c.data.frames, t);
      rows.push_back({"t=" + std::to_string(t), c});
    }
  } else {
    throw UsageError("unknown ablation suite '" + suite +
                     "' (expected matching_loss, temporal_mode or clip_length)");
  }
  return rows;
}

/// Cross-attention widths of layer 0 for one forward pass on a clip of
/// the row's length.
inline std::size_t cross_attention_width(const RunConfig& cfg) {
  const ModelConfig mc = cfg.model_config();
  const ParamStore ps = init_model(cfg);
  const Clip c = slice_frames(training_clips(cfg).front(), 0, cfg.clip_length);
  ForwardTrace trace;
  ForwardOptions fo;
  fo.trace = &trace;
  Decoder(ps, mc).forward(encode(ps, mc, c.features, c.frames), fo);
  for (const auto& rec : trace.attention) {
    if (rec.site == "cross" && rec.layer == 0) return rec.width;
  }
  throw ContractError("no cross-attention record");
}

/// Trains and evaluates every row; each row's files go to out_dir/<index>.
inline nlohmann::json run_ablation(const std::string& suite, const RunConfig& base,
                                   const std::filesystem::path& out_dir, std::size_t threads,
                                   const std::function<void(const std::string&)>& progress = {}) {
  const auto rows = ablation_rows(suite, base);
  nlohmann::json table = {{"suite", suite},
                          {"eval_source", base.eval.source},
                          {"eval_seed", base.eval.seed},
                          {"seed", base.seed},
                          {"rows", nlohmann::json::array()}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (progress) progress(row.name);
    const auto dir = out_dir / ("row" + std::to_string(i));
    const nlohmann::json m = run_training(row.cfg, dir, threads);
    table["rows"].push_back({{"name", row.name},
                             {"variant", to_string(row.cfg.variant)},
                             {"mode", to_string(row.cfg.model.mode)},
                             {"clip_length", row.cfg.clip_length},
                             {"miou", m["miou"]},
                             {"wiou", m["wiou"]},
                             {"per_class_iou", m["per_class_iou"]},
                             {"train_matched_round1", m["train_matched_round1"]},
                             {"train_matched_round2", m["train_matched_round2"]},
                             {"cross_attention_width", cross_attention_width(row.cfg)},
                             {"config_hash", m["config_hash"]},
                             {"eval_seed", row.cfg.eval.seed},
                             {"seed", row.cfg.seed}});
  }
  // ordering by miou, reported only
  std::vector<std::pair<double, std::string>> order;
  for (const auto& r : table["rows"]) order.emplace_back(r["miou"].get<double>(), r["name"]);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  table["ranking_by_miou"] = nlohmann::json::array();
  for (const auto& [_, name] : order) table["ranking_by_miou"].push_back(name);
  return table;
}

}  // namespace themask

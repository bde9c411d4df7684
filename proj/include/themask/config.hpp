#pragma once

// Run configuration, its JSON form, and the config hash (SHA-256 of the
// canonical JSON: sorted keys, no whitespace).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "themask/data.hpp"
#include "themask/decoder.hpp"
#include "themask/errors.hpp"
#include "themask/loss.hpp"

namespace themask {

struct OptimConfig {
  double lr = 1e-3;  // desk scale; 1e-4 does not fit the overfit budget
  double weight_decay = 0.05;
  double backbone_multiplier = 0.1;
};

struct ScheduleConfig {
  double power = 0.9;
  std::size_t warmup_iters = 200;
  std::size_t total_iters = 1200;
};

struct EvalConfig {
  /// "train" scores the training clips; "heldout" draws fresh clips.
  std::string source = "train";
  std::uint64_t seed = 1000;
  std::size_t num_clips = 4;
  std::size_t runs = 1;  // heldout only: mean over this many eval seeds
};

struct FinetuneConfig {
  std::string init_checkpoint;  // empty: train from scratch
  bool freeze_backbone = true;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  LossWeights loss;
  LossVariant variant = LossVariant::hierarchical;
  std::size_t num_points = 0;  // 0: every pixel
  OptimConfig optim;
  ScheduleConfig schedule;
  EvalConfig eval;
  FinetuneConfig finetune;
  std::size_t clip_length = 2;
  std::size_t batch = 2;
  std::size_t train_clips = 4;
  double hflip_prob = 0.5;
  bool warmup_one_round = true;
  bool deep_supervision = false;
  std::uint64_t seed = 0;

  /// Fills the model fields that follow from the data.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.num_classes = data.num_classes;
    m.in_channels = data.num_classes;
    m.height = data.height;
    m.width = data.width;
    return m;
  }

  void validate() const {
    model_config().validate();
    data.validate();
    loss.validate();
    if (clip_length < 1) throw ContractError("clip_length must be at least 1");
    if (clip_length > data.frames)
      throw ContractError("clip_length exceeds the frames per clip");
    if (schedule.total_iters < 1) throw ContractError("total_iters must be at least 1");
    if (schedule.warmup_iters > schedule.total_iters)
      throw ContractError("warmup_iters exceeds total_iters");
    if (batch < 1 || train_clips < 1) throw ContractError("batch and train_clips must be positive");
    if (!(optim.lr > 0.0) || optim.weight_decay < 0.0 || optim.backbone_multiplier < 0.0)
      throw ContractError("bad optimizer settings");
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ContractError("hflip_prob outside [0, 1]");
    if (eval.source != "train" && eval.source != "heldout")
      throw ContractError("eval.source must be 'train' or 'heldout'");
    if (eval.num_clips < 1 || eval.runs < 1) throw ContractError("eval needs clips and runs");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  return json{
      {"model",
       {{"num_queries", c.model.num_queries},
        {"channels", c.model.channels},
        {"layers", c.model.layers},
        {"heads", c.model.heads},
        {"num_scales", c.model.num_scales},
        {"mode", to_string(c.model.mode)}}},
      {"data",
       {{"num_classes", c.data.num_classes},
        {"height", c.data.height},
        {"width", c.data.width},
        {"frames", c.data.frames},
        {"min_shapes", c.data.min_shapes},
        {"max_shapes", c.data.max_shapes},
        {"min_size", c.data.min_size},
        {"max_size", c.data.max_size},
        {"max_speed", c.data.max_speed},
        {"noise", c.data.noise}}},
      {"loss",
       {{"variant", to_string(c.variant)},
        {"ce_r1", c.loss.ce_r1},
        {"dice_r1", c.loss.dice_r1},
        {"ce_r2", c.loss.ce_r2},
        {"dice_r2", c.loss.dice_r2},
        {"alpha", c.loss.alpha},
        {"no_object", c.loss.no_object},
        {"num_points", c.num_points}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"weight_decay", c.optim.weight_decay},
        {"backbone_multiplier", c.optim.backbone_multiplier}}},
      {"schedule",
       {{"power", c.schedule.power},
        {"warmup_iters", c.schedule.warmup_iters},
        {"total_iters", c.schedule.total_iters}}},
      {"eval",
       {{"source", c.eval.source},
        {"seed", c.eval.seed},
        {"num_clips", c.eval.num_clips},
        {"runs", c.eval.runs}}},
      {"finetune",
       {{"init_checkpoint", c.finetune.init_checkpoint},
        {"freeze_backbone", c.finetune.freeze_backbone}}},
      {"clip_length", c.clip_length},
      {"batch", c.batch},
      {"train_clips", c.train_clips},
      {"hflip_prob", c.hflip_prob},
      {"warmup_one_round", c.warmup_one_round},
      {"deep_supervision", c.deep_supervision},
      {"seed", c.seed},
  };
}

namespace detail {

/// Reads known keys of one JSON object into fields; unknown keys are a
/// usage error so typos do not silently fall back to defaults.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw UsageError("config: '" + where_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config: bad value for '" + where_ + key + "': " + e.what());
    }
  }

  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.count(k)) throw UsageError("config: unknown key '" + where_ + k + "'");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::FieldReader top(j, "");
  if (auto* m = top.sub("model")) {
    detail::FieldReader r(*m, "model.");
    r.get("num_queries", c.model.num_queries);
    r.get("channels", c.model.channels);
    r.get("layers", c.model.layers);
    r.get("heads", c.model.heads);
    r.get("num_scales", c.model.num_scales);
    std::string mode = to_string(c.model.mode);
    r.get("mode", mode);
    c.model.mode = temporal_mode_from_string(mode);
    r.finish();
  }
  if (auto* d = top.sub("data")) {
    detail::FieldReader r(*d, "data.");
    r.get("num_classes", c.data.num_classes);
    r.get("height", c.data.height);
    r.get("width", c.data.width);
    r.get("frames", c.data.frames);
    r.get("min_shapes", c.data.min_shapes);
    r.get("max_shapes", c.data.max_shapes);
    r.get("min_size", c.data.min_size);
    r.get("max_size", c.data.max_size);
    r.get("max_speed", c.data.max_speed);
    r.get("noise", c.data.noise);
    r.finish();
  }
  if (auto* l = top.sub("loss")) {
    detail::FieldReader r(*l, "loss.");
    std::string variant = to_string(c.variant);
    r.get("variant", variant);
    c.variant = loss_variant_from_string(variant);
    r.get("ce_r1", c.loss.ce_r1);
    r.get("dice_r1", c.loss.dice_r1);
    r.get("ce_r2", c.loss.ce_r2);
    r.get("dice_r2", c.loss.dice_r2);
    r.get("alpha", c.loss.alpha);
    r.get("no_object", c.loss.no_object);
    r.get("num_points", c.num_points);
    r.finish();
  }
  if (auto* o = top.sub("optim")) {
    detail::FieldReader r(*o, "optim.");
    r.get("lr", c.optim.lr);
    r.get("weight_decay", c.optim.weight_decay);
    r.get("backbone_multiplier", c.optim.backbone_multiplier);
    r.finish();
  }
  if (auto* s = top.sub("schedule")) {
    detail::FieldReader r(*s, "schedule.");
    r.get("power", c.schedule.power);
    r.get("warmup_iters", c.schedule.warmup_iters);
    r.get("total_iters", c.schedule.total_iters);
    r.finish();
  }
  if (auto* e = top.sub("eval")) {
    detail::FieldReader r(*e, "eval.");
    r.get("source", c.eval.source);
    r.get("seed", c.eval.seed);
    r.get("num_clips", c.eval.num_clips);
    r.get("runs", c.eval.runs);
    r.finish();
  }
  if (auto* f = top.sub("finetune")) {
    detail::FieldReader r(*f, "finetune.");
    r.get("init_checkpoint", c.finetune.init_checkpoint);
    r.get("freeze_backbone", c.finetune.freeze_backbone);
    r.finish();
  }
  top.get("clip_length", c.clip_length);
  top.get("batch", c.batch);
  top.get("train_clips", c.train_clips);
  top.get("hflip_prob", c.hflip_prob);
  top.get("warmup_one_round", c.warmup_one_round);
  top.get("deep_supervision", c.deep_supervision);
  top.get("seed", c.seed);
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// Lower-case hex SHA-256.
inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw ContractError("SHA-256 failed");
  }
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    out += buf;
  }
  return out;
}

/// nlohmann objects keep keys sorted, so compact dump() is canonical.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

inline std::string config_hash(const RunConfig& c) {
  return sha256_hex(canonical_json(to_json(c)));
}

}  // namespace themask

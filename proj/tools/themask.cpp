// Command-line front end: data generation, training, evaluation, ablations
// and the built-in check suites.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif
#include <nlohmann/json.hpp>

#include "themask/checks.hpp"
#include "themask/config.hpp"
#include "themask/data.hpp"
#include "themask/train.hpp"

namespace fs = std::filesystem;
using namespace themask;

namespace {

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

int print_checks(const std::vector<checks::CheckResult>& results, const std::string& report) {
  for (const auto& r : results) {
    std::printf("%s %-26s %s [%.2fs]\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str(), r.seconds);
  }
  const bool ok = checks::all_pass(results);
  if (!report.empty()) write_json(report, {{"pass", ok}, {"checks", checks::to_json(results)}});
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"themask: masked video segmentation decoder with two-round matching"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "write synthetic clips as THEM tensors");
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_config;
  std::size_t gen_clips = 4, gen_frames = 4;
  gen->add_option("--seed", gen_seed, "root seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--clips", gen_clips, "number of clips")->check(CLI::PositiveNumber);
  gen->add_option("--frames", gen_frames, "frames per clip")->check(CLI::PositiveNumber);
  gen->add_option("--config", gen_config, "run config whose data section is used");

  auto* train = app.add_subcommand("train", "train a model and evaluate it");
  std::string train_config, train_out;
  train->add_option("--config", train_config, "run config JSON (defaults when omitted)");
  train->add_option("--out-dir", train_out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  std::string eval_ckpt, eval_config, eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--config", eval_config, "run config JSON (defaults when omitted)");
  eval->add_option("--report", eval_report, "metrics JSON path")->required();

  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  std::string abl_suite, abl_out, abl_config;
  std::size_t abl_iters = 0;
  ablate->add_option("--suite", abl_suite, "matching_loss | temporal_mode | clip_length")
      ->required();
  ablate->add_option("--out", abl_out, "comparison table JSON path")->required();
  ablate->add_option("--config", abl_config, "base run config");
  ablate->add_option("--iters", abl_iters, "override total iterations (warm-up scaled 1/6)");

  auto* grad = app.add_subcommand("gradcheck", "run the finite-difference suites");
  std::string grad_report;
  grad->add_option("--report", grad_report, "optional JSON report path");

  auto* self = app.add_subcommand("selftest", "run the oracle suites");
  std::string self_report;
  self->add_option("--report", self_report, "optional JSON report path");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::size_t threads = worker_threads();
    if (*gen) {
      RunConfig cfg = config_or_default(gen_config);
      cfg.data.frames = gen_frames;
      const auto clips = generate_clips(gen_seed, gen_clips, cfg.data, threads);
      nlohmann::json meta = {{"seed", gen_seed}, {"data", to_json(cfg)["data"]}};
      write_clips(gen_out, clips, meta);
      std::printf("wrote %zu clips to %s\n", clips.size(), gen_out.c_str());
    } else if (*train) {
      const RunConfig cfg = config_or_default(train_config);
      const nlohmann::json m = run_training(cfg, train_out, threads);
      std::printf("%s\n", m.dump().c_str());
    } else if (*eval) {
      const RunConfig cfg = config_or_default(eval_config);
      if (!fs::exists(eval_ckpt)) throw IoError("checkpoint not found: " + eval_ckpt);
      const ParamStore ps = load_model(eval_ckpt, cfg);
      const nlohmann::json m = evaluate_model(ps, cfg, threads);
      write_json(eval_report, m);
      std::printf("%s\n", m.dump().c_str());
    } else if (*ablate) {
      RunConfig base = config_or_default(abl_config);
      if (abl_iters > 0) {
        base.schedule.total_iters = abl_iters;
        base.schedule.warmup_iters = abl_iters / 6;
      }
      const fs::path rows_dir = fs::path(abl_out).concat(".runs");
      const nlohmann::json table =
          run_ablation(abl_suite, base, rows_dir, threads, [](const std::string& row) {
            std::fprintf(stderr, "ablate: %s\n", row.c_str());
          });
      write_json(abl_out, table);
      std::printf("%s\n", table.dump(2).c_str());
    } else if (*grad) {
      return print_checks(checks::gradcheck_suite(), grad_report);
    } else if (*self) {
      return print_checks(checks::selftest_suite(), self_report);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "load error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

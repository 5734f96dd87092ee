// xvage: featurize, pretrain, train, evaluate, infer, synth.
//
// Exit codes: 0 success, 1 validation/config error, 2 runtime error or NaN abort.

#include <cstdio>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "xvage/xvage.hpp"

namespace {

int default_threads() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

void print_stage(const xvage::StageResult& r) {
  for (const auto& e : r.epochs) std::cout << xvage::to_json(e, r.checkpoint.meta.value("stage", "")).dump() << "\n";
  std::cout << "checkpoint " << r.checkpoint_path.string() << " (selected epoch " << r.selected_epoch << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker age estimation and gender classification"};
  app.require_subcommand(1);
  app.allow_extras(false);

  std::string config_path, out_dir, checkpoint, manifest, format = "text";
  std::vector<std::string> stages, inputs;
  std::int64_t seed = -1;
  int threads = default_threads();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* featurize = app.add_subcommand("featurize", "Write one VPFM feature file per manifest record plus index.jsonl");
  featurize->add_option("--config", config_path, "Run config (features and preprocessing)");
  featurize->add_option("--manifest", manifest, "Manifest JSONL")->required();
  featurize->add_option("--out", out_dir, "Output directory")->required();
  featurize->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run config")->required();
    sub->add_option("--seed", seed, "Override the config seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--threads", threads, "Worker threads for preprocessing")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "Checkpoint directory (overrides paths.checkpoint_dir)");
    sub->add_option("--stage", stages, "Run only these stage ids (repeatable)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Run the pretraining stages of the config");
  add_train_flags(pretrain);
  auto* train = app.add_subcommand("train", "Run every stage of the config in order");
  add_train_flags(train);

  auto* evaluate = app.add_subcommand("evaluate", "Score a labelled manifest and write predictions and reports");
  evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--manifest", manifest, "Labelled manifest JSONL")->required();
  evaluate->add_option("--config", config_path, "Run config; its feature kind must match the checkpoint");
  evaluate->add_option("--out", out_dir, "Report directory (default: config report_dir or ./reports)");
  evaluate->add_option("--format", format, "Report printed to stdout")->check(CLI::IsMember({"text", "csv", "json"}));
  evaluate->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* infer = app.add_subcommand("infer", "Gender probability and age estimate per audio file");
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  infer->add_option("audio", inputs, "Audio files")->required();

  auto* synth = app.add_subcommand("synth", "Write a small synthetic corpus and a matching three-stage config");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--seed", seed, "Corpus seed")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_default_logger(spdlog::stderr_color_mt("xvage"));

  try {
    if (featurize->parsed()) {
      xvage::RunConfig cfg;
      if (!config_path.empty()) cfg = xvage::load_run_config(config_path);
      const auto sum = xvage::cmd_featurize(cfg, manifest, out_dir, threads);
      std::cout << "wrote " << sum.written << " feature files, skipped " << sum.skipped << "; index "
                << sum.index.string() << "\n";
      return 0;
    }
    if (pretrain->parsed() || train->parsed()) {
      xvage::RunConfig cfg = xvage::load_run_config(config_path);
      xvage::TrainOptions opt;
      if (seed >= 0) opt.seed = static_cast<std::uint64_t>(seed);
      if (!out_dir.empty()) opt.out_dir = out_dir;
      opt.threads = threads;
      opt.only_stages = stages;
      if (pretrain->parsed() && stages.empty()) {
        for (const auto& s : cfg.stages)
          if (s.kind != xvage::StageKind::kFinetune) opt.only_stages.push_back(s.id);
        if (opt.only_stages.empty()) throw xvage::ConfigError("config has no pretraining stages");
      }
      for (const auto& r : xvage::cmd_train(cfg, opt)) print_stage(r);
      return 0;
    }
    if (evaluate->parsed()) {
      xvage::EvaluateOptions opt;
      opt.threads = threads;
      if (!config_path.empty()) {
        const auto cfg = xvage::load_run_config(config_path);
        opt.expected_features = cfg.setup.features;
        opt.out_dir = cfg.report_dir;
      }
      if (!out_dir.empty()) opt.out_dir = out_dir;
      const auto report = xvage::cmd_evaluate(checkpoint, manifest, opt);
      std::cout << xvage::render_report(report, xvage::parse_report_format(format));
      return 0;
    }
    if (infer->parsed()) {
      bool failed = false;
      for (const auto& r : xvage::cmd_infer(checkpoint, inputs)) {
        std::cout << r.line() << "\n";
        failed = failed || r.error.has_value();
      }
      return failed ? 2 : 0;
    }
    if (synth->parsed()) {
      const auto path = xvage::cmd_synth(out_dir, seed >= 0 ? static_cast<std::uint64_t>(seed) : 7);
      std::cout << "wrote " << path.string() << "\n";
      return 0;
    }
  } catch (const xvage::ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const xvage::NanAbort& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}

#pragma once

// Subcommand implementations behind the `xvage` CLI.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xvage/checkpoint.hpp"
#include "xvage/config.hpp"
#include "xvage/evaluation.hpp"
#include "xvage/pipeline.hpp"
#include "xvage/synth.hpp"
#include "xvage/training.hpp"

namespace xvage {

namespace detail {

inline void ensure_writable_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto probe = dir / ".xvage_write_probe";
  std::ofstream out(probe);
  if (ec || !out) throw ValidationError("output directory " + dir.string() + " is not writable");
  out.close();
  std::filesystem::remove(probe, ec);
}

inline std::string feature_label(const nlohmann::json& features) {
  const auto kind = features.value("kind", std::string("mfcc"));
  return kind == "mel" ? "Mel" : "MFCC";
}

// "a>b>c" -> "a + b"; "-" when there is no parent stage.
inline std::string pretrained_label(const std::string& lineage) {
  const auto cut = lineage.rfind('>');
  if (cut == std::string::npos) return "-";
  std::string out = lineage.substr(0, cut);
  for (std::size_t p = out.find('>'); p != std::string::npos; p = out.find('>')) out.replace(p, 1, " + ");
  return out;
}

inline FeatureConfig features_of(const Checkpoint& ck) { return ck.meta.at("features").get<FeatureConfig>(); }
inline PreprocessConfig preprocess_of(const Checkpoint& ck) { return ck.meta.at("preprocess").get<PreprocessConfig>(); }

inline AgeBinTable bins_of(const Checkpoint& ck) {
  return ck.meta.contains("age_bins") ? AgeBinTable::from_vector(ck.meta["age_bins"].get<std::vector<double>>())
                                      : AgeBinTable();
}

}  // namespace detail

struct FeaturizeSummary {
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::filesystem::path index;
};

/// One VPFM file per record (full utterance, no crop) plus `index.jsonl`.
inline FeaturizeSummary cmd_featurize(const RunConfig& cfg, const std::filesystem::path& manifest,
                                      const std::filesystem::path& out_dir, int threads) {
  detail::ensure_writable_dir(out_dir);
  const auto records = load_manifest(manifest, LabelRequirement::kNone, cfg.setup.age_bins);
  const FeatureExtractor extract(cfg.setup.features);
  std::vector<nlohmann::json> entries(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto& r = records[i];
    nlohmann::json e{{"id", r.id()}, {"audio_path", r.audio_path}};
    try {
      const auto audio = load_utterance(r.audio_path, cfg.setup.preprocess);
      const auto fm = utterance_features(audio, cfg.setup.preprocess, extract, CropMode::kFull, 0);
      const std::string file = r.id() + ".vpfm";
      write_feature_file(out_dir / file, fm);
      e["feature_file"] = file;
      e["frames"] = fm.frames();
      e["dim"] = fm.dim();
      e["kind"] = to_string(fm.kind);
    } catch (const Error& err) {
      e["skipped"] = err.what();
    }
    entries[i] = std::move(e);
  });
  FeaturizeSummary sum;
  sum.index = out_dir / "index.jsonl";
  std::ofstream idx(sum.index, std::ios::trunc);
  for (const auto& e : entries) {
    if (e.contains("skipped")) {
      spdlog::warn("skipped record {}: {}", e["id"].get<std::string>(), e["skipped"].get<std::string>());
      ++sum.skipped;
    } else {
      ++sum.written;
    }
    idx << e.dump() << "\n";
  }
  return sum;
}

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;  // overrides paths.checkpoint_dir
  int threads = 1;
  std::vector<std::string> only_stages;  // empty: all stages
};

inline std::vector<StageResult> cmd_train(RunConfig cfg, const TrainOptions& opt = {}) {
  if (cfg.stages.empty()) throw ConfigError("run config has no stages");
  if (opt.seed) cfg.setup.seed = *opt.seed;
  if (opt.out_dir) cfg.setup.checkpoint_dir = *opt.out_dir;
  cfg.setup.threads = opt.threads;

  auto selected = [&opt](const StageConfig& s) {
    return opt.only_stages.empty() ||
           std::find(opt.only_stages.begin(), opt.only_stages.end(), s.id) != opt.only_stages.end();
  };
  for (const auto& id : opt.only_stages)
    if (!cfg.find_stage(id)) throw ConfigError("no stage with id '" + id + "' in config");

  std::vector<StageResult> results;
  std::map<std::string, Checkpoint> produced;
  for (const auto& stage : cfg.stages) {
    if (!selected(stage)) continue;
    std::optional<Checkpoint> parent;
    if (stage.init_from) {
      if (auto it = produced.find(*stage.init_from); it != produced.end()) {
        parent = it->second;
      } else {
        std::filesystem::path path = cfg.find_stage(*stage.init_from)
                                         ? cfg.setup.checkpoint_dir / (*stage.init_from + ".ckpt")
                                         : std::filesystem::path(*stage.init_from);
        if (!std::filesystem::exists(path))
          throw ValidationError("stage '" + stage.id + "': init_from checkpoint " + path.string() + " not found");
        parent = load_checkpoint(path);
      }
    }
    spdlog::info("stage '{}' ({}){}", stage.id, to_string(stage.kind),
                 stage.init_from ? " initialised from '" + *stage.init_from + "'" : std::string(" from scratch"));
    results.push_back(run_stage(stage, cfg.setup, parent ? &*parent : nullptr));
    produced[stage.id] = results.back().checkpoint;
  }
  return results;
}

struct EvaluateOptions {
  std::filesystem::path out_dir = "reports";
  int threads = 1;
  std::optional<FeatureConfig> expected_features;  // from --config, checked against the checkpoint
};

/// Scores every record of a labelled manifest with full-utterance inference
/// and writes predictions.jsonl and report.{txt,csv,json}.
inline EvalReport cmd_evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                               const EvaluateOptions& opt) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const FeatureConfig feat = detail::features_of(ck);
  if (opt.expected_features && opt.expected_features->kind != feat.kind)
    throw ValidationError("checkpoint was trained on " + to_string(feat.kind) + " features but the config selects " +
                          to_string(opt.expected_features->kind));
  const auto cfg = ck.meta.at("embedder").get<EmbedderConfig>();
  if (cfg.input_dim != feat.dim() || ck.config_hash() != config_hash(cfg))
    throw ValidationError("checkpoint config hash does not match its embedder/feature settings");

  const AgeBinTable bins = detail::bins_of(ck);
  std::vector<UtteranceRecord> records;
  try {
    records = load_manifest(manifest, LabelRequirement::kAgeGender, bins);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(e.what()) + "\n(evaluate needs gender and age labels; use `infer` for unlabelled audio)");
  }
  if (records.empty()) throw ValidationError("evaluation manifest " + manifest.string() + " is empty");

  detail::ensure_writable_dir(opt.out_dir);
  Model<float> model = model_from_checkpoint<float>(ck);
  BatchSource source(records, LabelRequirement::kAgeGender, detail::preprocess_of(ck), feat, bins, opt.threads);
  if (source.size() == 0) throw ValidationError("no evaluation record could be decoded");
  const auto preds = predict(model, source);
  EvalReport report = compute_metrics(preds);
  report.features = detail::feature_label(ck.meta["features"]);
  report.pretrained_on = detail::pretrained_label(ck.lineage());

  write_predictions(opt.out_dir / "predictions.jsonl", preds);
  for (auto [fmt, ext] : {std::pair{ReportFormat::kText, "txt"}, {ReportFormat::kCsv, "csv"}, {ReportFormat::kJson, "json"}}) {
    std::ofstream out(opt.out_dir / (std::string("report.") + ext), std::ios::trunc);
    out << render_report(report, fmt);
  }
  return report;
}

struct InferResult {
  std::string path;
  std::optional<std::string> error;
  double prob_male = 0.0;
  double age = 0.0;

  std::string line() const {
    if (error) return path + "\terror: " + *error;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "\t%s\t%.4f\t%.1f", prob_male >= 0.5 ? "male" : "female", prob_male, age);
    return path + buf;
  }
};

/// Gender probability and age for each audio file (full-utterance mode).
inline std::vector<InferResult> cmd_infer(const std::filesystem::path& checkpoint, const std::vector<std::string>& paths) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  Model<float> model = model_from_checkpoint<float>(ck);
  if (!model.heads().gender || !model.heads().age_regressor)
    throw ValidationError("checkpoint has no gender/age heads (speaker pretraining checkpoint?)");
  const FeatureExtractor extract(detail::features_of(ck));
  const PreprocessConfig pre = detail::preprocess_of(ck);
  std::vector<InferResult> out;
  for (const auto& p : paths) {
    InferResult r;
    r.path = p;
    try {
      const auto fm = utterance_features(load_utterance(p, pre), pre, extract, CropMode::kFull, 0);
      Offsets offsets{0, fm.frames()};
      const auto o = model.forward(fm.values.cast<float>(), offsets, Mode::kInfer);
      r.prob_male = 1.0 / (1.0 + std::exp(-static_cast<double>(o.gender_logit(0, 0))));
      r.age = o.age_years(0, 0);
    } catch (const Error& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Writes a small three-stage synthetic corpus (speaker-labelled,
/// group-labelled and exact-age manifests) and a desk-scale run config
/// chaining spkid_pretrain -> agegender_pretrain -> finetune.
inline std::filesystem::path cmd_synth(const std::filesystem::path& out_dir, std::uint64_t seed) {
  detail::ensure_writable_dir(out_dir);
  synth::CorpusSpec vox;
  vox.speakers = 6;
  vox.utterances_per_speaker = 4;
  vox.valid_per_speaker = 1;
  vox.seed = derive_seed(seed, {1});
  synth::write_corpus(out_dir, "vox", vox);

  synth::CorpusSpec cv = vox;
  cv.speakers = 8;
  cv.utterances_per_speaker = 3;
  cv.exact_ages = false;
  cv.with_speaker_ids = false;
  cv.seed = derive_seed(seed, {2});
  synth::write_corpus(out_dir, "cv", cv);

  synth::CorpusSpec timit = cv;
  timit.exact_ages = true;
  timit.with_speaker_ids = true;
  timit.min_age = 22;
  timit.max_age = 66;
  timit.seed = derive_seed(seed, {3});
  synth::write_corpus(out_dir, "timit", timit);

  const nlohmann::json config = {
      {"seed", seed},
      {"features", {{"kind", "mfcc"}}},
      {"preprocess", {{"crop_seconds", 1.0}}},
      {"embedder", {{"channels", 16}, {"final_channels", 32}, {"embedding_dim", 16}}},
      {"optimizer", {{"lr", 0.01}, {"warmup_steps", 2}, {"batch_size", 8}}},
      {"stages",
       {{{"name", "spkid_pretrain"}, {"manifest", "vox.jsonl"}, {"epochs", 4}},
        {{"name", "agegender_pretrain"}, {"manifest", "cv.jsonl"}, {"epochs", 4}, {"init_from", "spkid_pretrain"}},
        {{"name", "finetune"}, {"manifest", "timit.jsonl"}, {"epochs", 4}, {"init_from", "agegender_pretrain"}}}},
      {"paths", {{"checkpoint_dir", "checkpoints"}, {"report_dir", "reports"}}}};
  const auto path = out_dir / "config.json";
  std::ofstream(path, std::ios::trunc) << config.dump(2) << "\n";
  return path;
}

}  // namespace xvage

#pragma once

// Run configuration file (JSON).
//
// {
//   "seed": 1234,
//   "features":     { "kind": "mfcc" | "mel", "win_ms": 25, "hop_ms": 10, "n_mels": 64,
//                     "n_mfcc": 30, "f_low": 40, "f_high": 8000, "sample_rate": 16000,
//                     "fft_size": 512, "normalize_features": true },
//   "preprocess":   { "vad": true, "vad_threshold_db": 40, "target_dbfs": -30, "crop_seconds": 5 },
//   "embedder":     { "channels": 512, "final_channels": 1500, "embedding_dim": 512 }
//                   or { "blocks": [...], "dense": [...] },
//   "optimizer":    { "lr": 0.001, "weight_decay": 0.001, "beta1": 0.95, "beta2": 0.5,
//                     "warmup_steps": 10000, "batch_size": 16 },
//   "loss_weights": { "gender": 1.0, "age_group": 1.0, "age_mse": 0.001 },
//   "age_bins":     [10, 20, 30, 40, 50, 60, 70, 80, 90],
//   "stages": [ { "name": "spkid_pretrain", "id": "vox", "manifest": "vox.jsonl",
//                 "epochs": 10, "init_from": "<stage id or checkpoint path>" }, ... ],
//   "paths":        { "checkpoint_dir": "checkpoints", "report_dir": "reports" }
// }
//
// Every section is optional except "stages" (needed by train/pretrain).
// Relative paths resolve against the config file's directory. The embedder's
// input dimension always follows the feature kind.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvage/error.hpp"
#include "xvage/training.hpp"

namespace xvage {

inline constexpr int kDefaultSpeakerPretrainEpochs = 10;

struct RunConfig {
  TrainingSetup setup;
  std::vector<StageConfig> stages;
  std::filesystem::path report_dir = "reports";

  const StageConfig* find_stage(const std::string& id) const {
    for (const auto& s : stages)
      if (s.id == id) return &s;
    return nullptr;
  }
};

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  static const std::set<std::string> kSections = {"seed",     "features", "preprocess", "embedder", "optimizer",
                                                  "loss_weights", "age_bins", "stages", "paths"};
  for (const auto& [key, value] : j.items())
    if (!kSections.count(key)) throw ConfigError("unknown config section '" + key + "'");

  auto resolve = [&base_dir](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? (base_dir / path).lexically_normal() : path;
  };

  RunConfig rc;
  try {
    rc.setup.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("features")) rc.setup.features = j["features"].get<FeatureConfig>();
    if (j.contains("preprocess")) rc.setup.preprocess = j["preprocess"].get<PreprocessConfig>();
    rc.setup.embedder = j.contains("embedder") ? j["embedder"].get<EmbedderConfig>() : EmbedderConfig::standard(30);
    rc.setup.embedder.input_dim = rc.setup.features.dim();
    if (j.contains("optimizer")) rc.setup.optimizer = j["optimizer"].get<OptimizerConfig>();
    if (j.contains("loss_weights")) rc.setup.loss = j["loss_weights"].get<LossWeights>();
    if (j.contains("age_bins")) rc.setup.age_bins = AgeBinTable::from_vector(j["age_bins"].get<std::vector<double>>());
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      if (p.contains("checkpoint_dir")) rc.setup.checkpoint_dir = resolve(p["checkpoint_dir"].get<std::string>());
      if (p.contains("report_dir")) rc.report_dir = resolve(p["report_dir"].get<std::string>());
    } else {
      rc.setup.checkpoint_dir = resolve("checkpoints");
      rc.report_dir = resolve("reports");
    }

    std::set<std::string> seen;
    for (const auto& s : j.value("stages", nlohmann::json::array())) {
      StageConfig st;
      st.kind = parse_stage_kind(s.at("name").get<std::string>());
      st.id = s.value("id", to_string(st.kind));
      st.manifest = resolve(s.at("manifest").get<std::string>());
      st.epochs = s.value("epochs", st.kind == StageKind::kSpeakerPretrain ? kDefaultSpeakerPretrainEpochs
                                    : st.kind == StageKind::kAgeGenderPretrain ? 100 : 50);
      if (st.epochs <= 0) throw ConfigError("stage '" + st.id + "': epochs must be positive");
      if (s.contains("init_from") && !s["init_from"].is_null()) {
        const auto ref = s["init_from"].get<std::string>();
        if (seen.count(ref)) {
          st.init_from = ref;
        } else {
          bool later = false;
          for (const auto& other : j["stages"])
            if (other.value("id", other.value("name", std::string())) == ref) later = true;
          if (later) throw ConfigError("stage '" + st.id + "' initialises from '" + ref + "', which runs after it");
          st.init_from = resolve(ref).string();
        }
      }
      if (!seen.insert(st.id).second) throw ConfigError("duplicate stage id '" + st.id + "'");
      rc.stages.push_back(std::move(st));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace xvage

#pragma once

// Stage training: the epoch loop, model selection, checkpoint lineage and
// transfer of weights between stages.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xvage/checkpoint.hpp"
#include "xvage/data_ingest.hpp"
#include "xvage/evaluation.hpp"
#include "xvage/features.hpp"
#include "xvage/loss.hpp"
#include "xvage/network.hpp"
#include "xvage/optim.hpp"
#include "xvage/pipeline.hpp"

namespace xvage {

enum class StageKind { kSpeakerPretrain, kAgeGenderPretrain, kFinetune };

inline std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::kSpeakerPretrain: return "spkid_pretrain";
    case StageKind::kAgeGenderPretrain: return "agegender_pretrain";
    case StageKind::kFinetune: return "finetune";
  }
  return "?";
}

inline StageKind parse_stage_kind(const std::string& s) {
  if (s == "spkid_pretrain") return StageKind::kSpeakerPretrain;
  if (s == "agegender_pretrain") return StageKind::kAgeGenderPretrain;
  if (s == "finetune") return StageKind::kFinetune;
  throw ConfigError("unknown stage name '" + s + "' (expected spkid_pretrain, agegender_pretrain or finetune)");
}

struct StageConfig {
  std::string id;  // how later stages refer to this one; defaults to the kind name
  StageKind kind = StageKind::kFinetune;
  std::filesystem::path manifest;
  int epochs = 1;
  std::optional<std::string> init_from;  // id of an earlier stage, or a checkpoint path

  LabelRequirement requirement() const {
    return kind == StageKind::kSpeakerPretrain ? LabelRequirement::kSpeaker : LabelRequirement::kAgeGender;
  }
};

/// Everything shared by the stages of one run.
struct TrainingSetup {
  FeatureConfig features;
  PreprocessConfig preprocess;
  EmbedderConfig embedder = EmbedderConfig::standard(30);
  OptimizerConfig optimizer;
  LossWeights loss;
  AgeBinTable age_bins;
  std::uint64_t seed = 0;
  int threads = 1;
  std::filesystem::path checkpoint_dir = ".";
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  long step = 0;  // optimizer steps completed
  double lr = 0.0;
  LossBreakdown train;
  std::optional<LossBreakdown> valid;
  std::optional<GroupMetrics> valid_metrics;
};

inline nlohmann::json to_json(const EpochRecord& e, const std::string& stage) {
  nlohmann::json j{{"stage", stage}, {"epoch", e.epoch}, {"step", e.step}, {"lr", e.lr}, {"train", to_json(e.train)}};
  if (e.valid) j["valid"] = to_json(*e.valid);
  if (e.valid_metrics)
    j["valid_metrics"] = {{"gender_accuracy", e.valid_metrics->accuracy},
                          {"age_mae", e.valid_metrics->mae},
                          {"age_rmse", e.valid_metrics->rmse}};
  return j;
}

struct StageResult {
  std::filesystem::path checkpoint_path;
  Checkpoint checkpoint;
  std::vector<EpochRecord> epochs;
  int selected_epoch = 0;
  std::size_t skipped_records = 0;
  std::vector<std::string> loaded_from_parent;
};

struct PreparedModel {
  Model<float> model;
  std::vector<std::string> loaded_from_parent;
};

/// Builds the stage's model. With a parent checkpoint the embedder (including
/// batch-norm statistics) is always copied, and age/gender heads are copied
/// when the parent has them; the speaker head is never carried over.
inline PreparedModel prepare_stage_model(const StageConfig& stage, const TrainingSetup& setup, const Checkpoint* parent,
                                         int n_speakers) {
  const HeadSet heads =
      stage.kind == StageKind::kSpeakerPretrain ? HeadSet::speaker(n_speakers) : HeadSet::age_gender();
  PreparedModel pm{Model<float>(setup.embedder, heads), {}};
  pm.model.init(derive_seed(setup.seed, {hash_name(stage.id)}));
  if (!parent) return pm;

  if (parent->meta.contains("features")) {
    const auto parent_kind = parent->meta["features"].value("kind", std::string());
    if (parent_kind != to_string(setup.features.kind))
      throw ConfigError("stage '" + stage.id + "': parent checkpoint uses " + parent_kind + " features, run uses " +
                        to_string(setup.features.kind));
  }
  if (parent->config_hash() != config_hash(setup.embedder)) {
    std::string msg = "stage '" + stage.id + "': parent checkpoint embedder config hash " + parent->config_hash() +
                      " does not match " + config_hash(setup.embedder) + "; mismatched arrays:";
    for (const auto* p : pm.model.embedder_params()) {
      const auto* a = parent->find(p->name);
      if (!a) {
        msg += "\n  " + p->name + ": absent in parent";
      } else if (a->shape != p->shape()) {
        std::string got, want;
        for (auto d : a->shape) got += std::to_string(d) + " ";
        for (auto d : p->shape()) want += std::to_string(d) + " ";
        msg += "\n  " + p->name + ": parent [" + got + "] vs model [" + want + "]";
      }
    }
    throw ShapeError(msg);
  }
  pm.loaded_from_parent = restore_params(pm.model, *parent, is_embedder_param);
  for (HeadKind k : {HeadKind::kGender, HeadKind::kAgeGroup, HeadKind::kAgeRegressor}) {
    if (!heads.has(k)) continue;
    const bool parent_has = parent->find("heads." + to_string(k) + ".out.weight") != nullptr;
    if (!parent_has) continue;
    auto names = restore_params(pm.model, *parent, [k](const std::string& n) { return is_head_param(n, k); });
    pm.loaded_from_parent.insert(pm.loaded_from_parent.end(), names.begin(), names.end());
  }
  return pm;
}

/// Runs `source` through the model in inference mode on full (uncropped)
/// utterances, in packed batches.
template <class T, class Fn>
void for_each_inference_batch(Model<T>& model, const BatchSource& source, int batch_size, Fn&& fn) {
  std::vector<std::size_t> idx;
  auto flush = [&] {
    if (idx.empty()) return;
    Batch b = source.materialize(idx, 0, 0, CropMode::kFull);
    auto [x, offsets] = pack_sequences<T>(b.features);
    fn(b, model.forward(x, offsets, Mode::kInfer));
    idx.clear();
  };
  for (std::size_t i = 0; i < source.size(); ++i) {
    idx.push_back(i);
    if (static_cast<int>(idx.size()) == batch_size) flush();
  }
  flush();
}

/// Per-record predictions from the gender and age-regressor heads.
template <class T>
std::vector<PredictionRecord> predict(Model<T>& model, const BatchSource& source, int batch_size = 16) {
  if (!model.heads().gender || !model.heads().age_regressor)
    throw ValidationError("model has no gender/age heads; cannot predict");
  std::vector<PredictionRecord> out;
  for_each_inference_batch(model, source, batch_size, [&](const Batch& b, const HeadOutputs<T>& o) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      const auto& r = source.records()[b.records[j]];
      PredictionRecord p;
      p.id = r.id();
      p.true_gender = b.targets.gender[j] ? Gender::kMale : Gender::kFemale;
      const double z = o.gender_logit(static_cast<Eigen::Index>(j), 0);
      p.pred_gender_prob = 1.0 / (1.0 + std::exp(-z));
      p.true_age = b.targets.age_years[j];
      p.pred_age = o.age_years(static_cast<Eigen::Index>(j), 0);
      out.push_back(std::move(p));
    }
  });
  return out;
}

/// Mean loss over a data set in inference mode.
template <class T>
LossBreakdown evaluate_loss(Model<T>& model, const BatchSource& source, const LossWeights& w, int batch_size) {
  LossBreakdown acc;
  double n = 0;
  auto add = [](std::optional<double>& dst, const std::optional<double>& v, double k) {
    if (v) dst = dst.value_or(0.0) + *v * k;
  };
  for_each_inference_batch(model, source, batch_size, [&](const Batch& b, const HeadOutputs<T>& o) {
    const auto l = joint_loss(o, b.targets, w);
    const auto k = static_cast<double>(b.size());
    acc.total += l.total * k;
    add(acc.gender_bce, l.gender_bce, k);
    add(acc.age_group_ce, l.age_group_ce, k);
    add(acc.age_mse, l.age_mse, k);
    add(acc.speaker_ce, l.speaker_ce, k);
    n += k;
  });
  if (n > 0) {
    acc.total /= n;
    for (auto* v : {&acc.gender_bce, &acc.age_group_ce, &acc.age_mse, &acc.speaker_ce})
      if (*v) **v /= n;
  }
  return acc;
}

inline nlohmann::json base_meta(const TrainingSetup& setup) {
  std::vector<double> bins(setup.age_bins.boundaries().begin(), setup.age_bins.boundaries().end());
  return {{"features", setup.features}, {"preprocess", setup.preprocess}, {"age_bins", bins}};
}

/// Trains one stage and writes `<checkpoint_dir>/<id>.ckpt` plus the epoch log
/// `<checkpoint_dir>/<id>.log.jsonl`. The saved weights are those of the epoch
/// with the lowest validation loss, or of the last epoch when the manifest
/// has no validation split.
inline StageResult run_stage(const StageConfig& stage, const TrainingSetup& setup, const Checkpoint* parent = nullptr) {
  if (setup.embedder.input_dim != setup.features.dim())
    throw ConfigError("embedder input_dim " + std::to_string(setup.embedder.input_dim) + " != feature dim " +
                      std::to_string(setup.features.dim()));
  if (stage.epochs <= 0) throw ConfigError("stage '" + stage.id + "': epochs must be positive");

  const auto all = load_manifest(stage.manifest, stage.requirement(), setup.age_bins);
  const auto train_records = filter_split(all, Split::kTrain);
  const auto valid_records = filter_split(all, Split::kValid);
  if (train_records.empty()) throw ValidationError("stage '" + stage.id + "': manifest has no train records");

  const auto req = stage.requirement();
  BatchSource train(train_records, req, setup.preprocess, setup.features, setup.age_bins, setup.threads);
  std::optional<BatchSource> valid;
  if (!valid_records.empty())
    valid.emplace(valid_records, req, setup.preprocess, setup.features, setup.age_bins, setup.threads,
                  req == LabelRequirement::kSpeaker ? std::optional(train.speaker_index()) : std::nullopt);
  if (train.size() == 0) throw ValidationError("stage '" + stage.id + "': no usable train records");

  const int n_speakers = static_cast<int>(train.speaker_index().size());
  PreparedModel prepared = prepare_stage_model(stage, setup, parent, n_speakers);
  Model<float>& model = prepared.model;

  const std::uint64_t stage_seed = derive_seed(setup.seed, {hash_name(stage.id), 1});
  const int bs = setup.optimizer.batch_size;
  const long steps_per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
  const long total_steps = steps_per_epoch * stage.epochs;
  lr_at(0, total_steps, setup.optimizer);  // validates warmup < total up front

  std::filesystem::create_directories(setup.checkpoint_dir);
  const auto log_path = setup.checkpoint_dir / (stage.id + ".log.jsonl");
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot write " + log_path.string());

  nlohmann::json meta = base_meta(setup);
  const std::string parent_lineage = parent ? parent->lineage() : std::string();
  meta["lineage"] = parent_lineage.empty() ? stage.id : parent_lineage + ">" + stage.id;
  meta["stage"] = stage.id;
  meta["stage_kind"] = to_string(stage.kind);
  if (req == LabelRequirement::kSpeaker) {
    std::vector<std::string> speakers;
    for (const auto& [id, idx] : train.speaker_index()) speakers.push_back(id);
    meta["speakers"] = speakers;
  }

  NovoGrad<float> opt(setup.optimizer);
  StageResult res;
  res.skipped_records = train.skipped() + (valid ? valid->skipped() : 0);
  res.loaded_from_parent = prepared.loaded_from_parent;
  double best = std::numeric_limits<double>::infinity();
  long step = 0;
  const auto params = model.params();

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double seen = 0;
    LossBreakdown sum;
    for (const auto& batch : train.epoch_batches(bs, stage_seed, epoch, CropMode::kRandom)) {
      auto [x, offsets] = pack_sequences<float>(batch.features);
      model.zero_grad();
      HeadOutputs<float> out = model.forward(x, offsets, Mode::kTrain);
      HeadOutputs<float> grads;
      const LossBreakdown l = joint_loss(out, batch.targets, setup.loss, &grads);
      model.backward(grads);
      rec.lr = lr_at(step, total_steps, setup.optimizer);
      opt.step(params, rec.lr);
      ++step;
      const auto k = static_cast<double>(batch.size());
      seen += k;
      sum.total += l.total * k;
      auto add = [k](std::optional<double>& dst, const std::optional<double>& v) {
        if (v) dst = dst.value_or(0.0) + *v * k;
      };
      add(sum.gender_bce, l.gender_bce);
      add(sum.age_group_ce, l.age_group_ce);
      add(sum.age_mse, l.age_mse);
      add(sum.speaker_ce, l.speaker_ce);
    }
    sum.total /= seen;
    for (auto* v : {&sum.gender_bce, &sum.age_group_ce, &sum.age_mse, &sum.speaker_ce})
      if (*v) **v /= seen;
    rec.train = sum;
    rec.step = step;

    if (valid && valid->size() > 0) {
      rec.valid = evaluate_loss(model, *valid, setup.loss, bs);
      if (req == LabelRequirement::kAgeGender) rec.valid_metrics = compute_metrics(predict(model, *valid, bs))[Group::kAll];
    }
    const bool last = epoch + 1 == stage.epochs;
    const bool improved = rec.valid && rec.valid->total < best;
    if (improved) best = rec.valid->total;
    if (improved || (!rec.valid && last) || (last && res.checkpoint.arrays.empty())) {
      res.checkpoint = capture_checkpoint(model, meta);
      res.checkpoint.meta["epoch"] = rec.epoch;
      res.selected_epoch = rec.epoch;
    }

    spdlog::info("[{}] epoch {}/{} train loss {:.5f}{}", stage.id, rec.epoch, stage.epochs, rec.train.total,
                 rec.valid ? fmt::format(" valid loss {:.5f}", rec.valid->total) : std::string());
    log << to_json(rec, stage.id).dump() << "\n" << std::flush;
    res.epochs.push_back(std::move(rec));
  }

  res.checkpoint_path = setup.checkpoint_dir / (stage.id + ".ckpt");
  save_checkpoint(res.checkpoint_path, res.checkpoint);
  return res;
}

}  // namespace xvage

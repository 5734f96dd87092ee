#pragma once

// Per-utterance preprocessing chain and mini-batch production.
//
//   decode -> resample(16 kHz) -> VAD          (once per record, cached)
//   crop -> normalize to -30 dBFS -> features  (per epoch)

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xvage/audio.hpp"
#include "xvage/data_ingest.hpp"
#include "xvage/features.hpp"
#include "xvage/loss.hpp"
#include "xvage/random.hpp"

namespace xvage {

struct PreprocessConfig {
  int sample_rate = kTargetSampleRate;
  bool vad = true;
  VadConfig vad_config;
  double target_dbfs = -30.0;
  double crop_seconds = 5.0;
};

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"sample_rate", c.sample_rate},
       {"vad", c.vad},
       {"vad_threshold_db", c.vad_config.threshold_db},
       {"target_dbfs", c.target_dbfs},
       {"crop_seconds", c.crop_seconds}};
}
inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  c = PreprocessConfig{};
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.vad = j.value("vad", c.vad);
  c.vad_config.threshold_db = j.value("vad_threshold_db", c.vad_config.threshold_db);
  c.target_dbfs = j.value("target_dbfs", c.target_dbfs);
  c.crop_seconds = j.value("crop_seconds", c.crop_seconds);
  if (c.crop_seconds <= 0) throw ConfigError("preprocess: crop_seconds must be positive");
}

/// Decode, resample and remove non-speech.
inline AudioBuffer load_utterance(const std::string& path, const PreprocessConfig& cfg) {
  AudioBuffer buf = resample(decode_wav(path), cfg.sample_rate);
  if (buf.empty()) throw DecodeError(path + ": no samples");
  if (!cfg.vad) return buf;
  VadResult v = apply_vad(buf, cfg.vad_config);
  if (v.all_rejected) spdlog::warn("{}: VAD rejected every frame, keeping the whole utterance", path);
  return std::move(v.audio);
}

/// Crop, loudness-normalise and featurise a VAD-trimmed utterance.
inline FeatureMatrix utterance_features(const AudioBuffer& trimmed, const PreprocessConfig& cfg,
                                        const FeatureExtractor& extract, CropMode mode, std::uint64_t seed) {
  AudioBuffer a = crop(trimmed, cfg.crop_seconds, seed, mode);
  if (rms(a) > 0.0) a = normalize_dbfs(a, cfg.target_dbfs);
  return extract(a);
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots so the outcome does not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

/// Seeded shuffle of [0, n) partitioned into consecutive batches; the last
/// batch may be short.
inline std::vector<std::vector<std::size_t>> plan_batches(std::size_t n, int batch_size, std::uint64_t seed) {
  if (n == 0) throw ValidationError("cannot batch an empty record list");
  if (batch_size <= 0) throw ValidationError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return batches;
}

struct Batch {
  std::vector<Eigen::MatrixXd> features;  // each T x F
  Targets targets;
  std::vector<std::size_t> records;  // indices into BatchSource::records()
  std::size_t size() const { return features.size(); }
};

/// Owns the decoded, VAD-trimmed audio of a record list and produces
/// featurised batches. Records that fail to decode, or whose labels fall
/// outside the age table, are skipped and counted.
class BatchSource {
 public:
  BatchSource(const std::vector<UtteranceRecord>& records, LabelRequirement req, PreprocessConfig pre,
              const FeatureConfig& feat, AgeBinTable bins = {}, int threads = 1,
              std::optional<std::map<std::string, int>> speaker_index = std::nullopt)
      : pre_(pre), extract_(feat), bins_(bins), req_(req), threads_(threads) {
    std::vector<std::optional<AudioBuffer>> audio(records.size());
    std::vector<std::string> errors(records.size());
    parallel_for(records.size(), threads, [&](std::size_t i) {
      try {
        audio[i] = load_utterance(records[i].audio_path, pre_);
        if (audio[i]->size() < static_cast<std::size_t>(feat.win_length()))
          throw DecodeError("utterance shorter than one analysis window");
      } catch (const Error& e) {
        audio[i].reset();
        errors[i] = e.what();
      }
    });
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!audio[i]) {
        spdlog::warn("skipping record {} ({}): {}", r.id(), r.audio_path, errors[i]);
        ++skipped_;
        continue;
      }
      if (req == LabelRequirement::kAgeGender && r.age_years && !r.age_bin && !bins_.contains(*r.age_years)) {
        spdlog::warn("skipping record {}: age {} outside the age-group table", r.id(), *r.age_years);
        ++skipped_;
        continue;
      }
      records_.push_back(r);
      audio_.push_back(std::move(*audio[i]));
    }
    if (req == LabelRequirement::kSpeaker) {
      if (speaker_index) {
        speakers_ = *speaker_index;
      } else {
        for (const auto& r : records_) speakers_.emplace(*r.speaker_id, 0);
        int k = 0;
        for (auto& [id, idx] : speakers_) idx = k++;
      }
    }
  }

  const std::vector<UtteranceRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t skipped() const { return skipped_; }
  const std::map<std::string, int>& speaker_index() const { return speakers_; }
  const FeatureExtractor& extractor() const { return extract_; }
  const PreprocessConfig& preprocess() const { return pre_; }

  /// Random crops are re-drawn per (seed, epoch, record).
  Batch materialize(const std::vector<std::size_t>& indices, std::uint64_t seed, int epoch, CropMode mode) const {
    Batch b;
    b.records = indices;
    b.features.resize(indices.size());
    parallel_for(indices.size(), threads_, [&](std::size_t j) {
      const std::size_t i = indices[j];
      const auto crop_seed = derive_seed(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(i)});
      b.features[j] = utterance_features(audio_[i], pre_, extract_, mode, crop_seed).values;
    });
    for (std::size_t i : indices) {
      const auto& r = records_[i];
      if (req_ == LabelRequirement::kAgeGender) {
        b.targets.gender.push_back(*r.gender == Gender::kMale ? 1 : 0);
        b.targets.age_group.push_back(age_group_target(r, bins_));
        b.targets.age_years.push_back(regression_target(r, bins_));
      } else if (req_ == LabelRequirement::kSpeaker) {
        auto it = speakers_.find(*r.speaker_id);
        if (it == speakers_.end())
          throw ValidationError("record " + r.id() + ": speaker '" + *r.speaker_id + "' unknown to the speaker head");
        b.targets.speaker.push_back(it->second);
      }
    }
    return b;
  }

  std::vector<Batch> epoch_batches(int batch_size, std::uint64_t seed, int epoch, CropMode mode) const {
    std::vector<Batch> out;
    for (const auto& idx : plan_batches(size(), batch_size, derive_seed(seed, {0x5348ULL, static_cast<std::uint64_t>(epoch)})))
      out.push_back(materialize(idx, seed, epoch, mode));
    return out;
  }

 private:
  PreprocessConfig pre_;
  FeatureExtractor extract_;
  AgeBinTable bins_;
  LabelRequirement req_;
  int threads_;
  std::vector<UtteranceRecord> records_;
  std::vector<AudioBuffer> audio_;
  std::map<std::string, int> speakers_;
  std::size_t skipped_ = 0;
};

/// Convenience: every batch of one epoch under `seed`.
inline std::vector<Batch> make_batches(const BatchSource& source, int batch_size, std::uint64_t seed, int epoch = 0,
                                       CropMode mode = CropMode::kRandom) {
  return source.epoch_batches(batch_size, seed, epoch, mode);
}

}  // namespace xvage

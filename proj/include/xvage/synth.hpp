#pragma once

// Deterministic synthetic speech-like corpora for tests and smoke runs.
//
// Each utterance is a harmonic tone whose fundamental and formant depend on
// the speaker's gender, plus a partial whose frequency encodes the age, a
// syllable-rate amplitude envelope, light noise and silent margins.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "xvage/audio.hpp"
#include "xvage/data_ingest.hpp"
#include "xvage/random.hpp"

namespace xvage::synth {

struct Speaker {
  std::string id;
  Gender gender = Gender::kMale;
  double age = 30.0;
};

struct UtteranceOptions {
  double seconds = 1.5;
  double margin_seconds = 0.2;  // leading and trailing silence
  int sample_rate = kTargetSampleRate;
  double noise = 0.002;
};

inline std::uint64_t hash_speaker(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return splitmix64(h);
}

inline AudioBuffer utterance(const Speaker& spk, std::uint64_t seed, const UtteranceOptions& opt = {}) {
  const double pi = std::numbers::pi;
  std::mt19937_64 rng(derive_seed(seed, {hash_speaker(spk.id)}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  const bool male = spk.gender == Gender::kMale;
  const std::uint64_t sid = hash_speaker(spk.id);
  const double jitter = static_cast<double>(sid % 1000) / 1000.0;  // speaker-specific, stable
  const double f0 = (male ? 105.0 : 200.0) + 30.0 * jitter + 2.0 * (uni(rng) - 0.5);
  const double formant = (male ? 600.0 : 1000.0) + 300.0 * static_cast<double>((sid / 1000) % 100) / 100.0;
  const double age_freq = 1500.0 + 40.0 * (spk.age - 20.0);
  const double syllable_rate = 3.0 + 2.0 * uni(rng);
  const double phase0 = 2.0 * pi * uni(rng);

  const auto voiced = static_cast<std::size_t>(opt.seconds * opt.sample_rate);
  const auto margin = static_cast<std::size_t>(opt.margin_seconds * opt.sample_rate);
  AudioBuffer buf;
  buf.sample_rate = opt.sample_rate;
  buf.samples.assign(voiced + 2 * margin, 0.0);
  for (std::size_t n = 0; n < voiced; ++n) {
    const double t = static_cast<double>(n) / opt.sample_rate;
    double s = 0.0;
    for (int h = 1; f0 * h < 4000.0; ++h) {
      const double f = f0 * h;
      const double env = std::exp(-0.5 * std::pow((f - formant) / 350.0, 2)) + 0.15 / h;
      s += env * std::sin(2.0 * pi * f * t + h * phase0);
    }
    s += 0.6 * std::sin(2.0 * pi * age_freq * t);
    const double am = 0.6 + 0.4 * std::sin(2.0 * pi * syllable_rate * t + phase0);
    buf.samples[margin + n] = 0.1 * am * s + opt.noise * gauss(rng);
  }
  return buf;
}

struct CorpusSpec {
  int speakers = 8;
  int utterances_per_speaker = 4;
  double min_age = 20.0;
  double max_age = 70.0;
  int valid_per_speaker = 0;  // trailing utterances of each speaker go to "valid"
  bool exact_ages = true;     // false: only age_bin labels (group-labelled corpus)
  bool with_speaker_ids = true;
  UtteranceOptions audio;
  std::uint64_t seed = 1;
};

/// Writes `<dir>/<name>_<spk>_<k>.wav` and a manifest `<dir>/<name>.jsonl`.
/// Genders alternate; ages are spread evenly over [min_age, max_age].
inline std::filesystem::path write_corpus(const std::filesystem::path& dir, const std::string& name,
                                          const CorpusSpec& spec, const AgeBinTable& bins = {}) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / (name + ".jsonl");
  std::ofstream out(manifest, std::ios::trunc);
  for (int s = 0; s < spec.speakers; ++s) {
    Speaker spk;
    spk.id = name + "_spk" + std::to_string(s);
    spk.gender = s % 2 == 0 ? Gender::kMale : Gender::kFemale;
    spk.age = spec.speakers == 1 ? spec.min_age
                                 : spec.min_age + (spec.max_age - spec.min_age) * s / (spec.speakers - 1);
    for (int u = 0; u < spec.utterances_per_speaker; ++u) {
      const std::string file = name + "_" + std::to_string(s) + "_" + std::to_string(u) + ".wav";
      write_wav16(dir / file, utterance(spk, derive_seed(spec.seed, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(u)}), spec.audio));
      UtteranceRecord r;
      r.audio_path = file;
      if (spec.with_speaker_ids) r.speaker_id = spk.id;
      r.gender = spk.gender;
      if (spec.exact_ages) r.age_years = spk.age;
      else r.age_bin = bins.bin_of(spk.age);
      r.split = u >= spec.utterances_per_speaker - spec.valid_per_speaker ? Split::kValid : Split::kTrain;
      out << to_json(r).dump() << "\n";
    }
  }
  return manifest;
}

}  // namespace xvage::synth

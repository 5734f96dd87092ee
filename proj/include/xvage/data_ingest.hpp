#pragma once

// Dataset manifests (JSON Lines) and label resolution.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xvage/error.hpp"

namespace xvage {

enum class Gender { kFemale = 0, kMale = 1 };
enum class Split { kTrain, kValid, kTest };

inline std::string_view to_string(Gender g) { return g == Gender::kMale ? "male" : "female"; }

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

inline std::optional<Gender> parse_gender(std::string_view s) {
  if (s == "male") return Gender::kMale;
  if (s == "female") return Gender::kFemale;
  return std::nullopt;
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

/// Eight half-open age groups [b_i, b_{i+1}) in years. The default table is
/// decades 10..90.
class AgeBinTable {
 public:
  static constexpr std::size_t kNumBins = 8;
  using Boundaries = std::array<double, kNumBins + 1>;

  AgeBinTable() : AgeBinTable(Boundaries{10, 20, 30, 40, 50, 60, 70, 80, 90}) {}

  explicit AgeBinTable(const Boundaries& boundaries) : boundaries_(boundaries) {
    for (std::size_t i = 0; i < kNumBins; ++i) {
      if (!(boundaries_[i] < boundaries_[i + 1]))
        throw ConfigError("age bin boundaries must be strictly ascending");
      midpoints_[i] = (boundaries_[i] + boundaries_[i + 1]) / 2.0;
    }
  }

  static AgeBinTable from_vector(const std::vector<double>& b) {
    if (b.size() != kNumBins + 1)
      throw ConfigError("age bin table needs exactly 9 boundaries, got " + std::to_string(b.size()));
    Boundaries arr{};
    std::copy(b.begin(), b.end(), arr.begin());
    return AgeBinTable(arr);
  }

  const Boundaries& boundaries() const { return boundaries_; }
  const std::array<double, kNumBins>& midpoints() const { return midpoints_; }

  bool contains(double age_years) const {
    return age_years >= boundaries_.front() && age_years < boundaries_.back();
  }

  int bin_of(double age_years) const {
    if (!std::isfinite(age_years) || !contains(age_years)) {
      std::ostringstream os;
      os << "age " << age_years << " outside bin table range [" << boundaries_.front() << ", "
         << boundaries_.back() << ")";
      throw OutOfRangeError(os.str());
    }
    int i = 0;
    while (age_years >= boundaries_[i + 1]) ++i;
    return i;
  }

  double midpoint_age(int age_bin) const {
    if (age_bin < 0 || age_bin >= static_cast<int>(kNumBins))
      throw OutOfRangeError("age bin " + std::to_string(age_bin) + " outside 0..7");
    return midpoints_[age_bin];
  }

 private:
  Boundaries boundaries_;
  std::array<double, kNumBins> midpoints_{};
};

struct UtteranceRecord {
  std::string audio_path;
  std::optional<std::string> speaker_id;
  std::optional<Gender> gender;
  std::optional<double> age_years;
  std::optional<int> age_bin;
  Split split = Split::kTrain;
  std::size_t line = 0;  // 1-based manifest line, used as record id

  std::string id() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06zu", line);
    return buf;
  }
};

// What a stage needs from each record.
enum class LabelRequirement { kNone, kSpeaker, kAgeGender };

/// Regression target in years: the exact age when known, otherwise the
/// midpoint of the labelled age group.
inline double regression_target(const UtteranceRecord& r, const AgeBinTable& bins) {
  if (r.age_years) return *r.age_years;
  if (r.age_bin) return bins.midpoint_age(*r.age_bin);
  throw ValidationError("record " + r.id() + " has neither age_years nor age_bin");
}

inline int age_group_target(const UtteranceRecord& r, const AgeBinTable& bins) {
  if (r.age_bin) return *r.age_bin;
  if (r.age_years) return bins.bin_of(*r.age_years);
  throw ValidationError("record " + r.id() + " has neither age_years nor age_bin");
}

namespace detail {

inline UtteranceRecord parse_record(const nlohmann::json& j, std::size_t line,
                                    const AgeBinTable& bins) {
  static constexpr std::array<std::string_view, 6> kKeys = {
      "audio_path", "speaker_id", "gender", "age_years", "age_bin", "split"};
  if (!j.is_object()) throw ValidationError("not a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end())
      throw ValidationError("unknown key '" + key + "'");
    if (value.is_null()) throw ValidationError("key '" + key + "' is null; omit optional keys instead");
  }

  UtteranceRecord r;
  r.line = line;
  if (!j.contains("audio_path") || !j["audio_path"].is_string())
    throw ValidationError("missing required string 'audio_path'");
  r.audio_path = j["audio_path"].get<std::string>();
  if (!j.contains("split") || !j["split"].is_string())
    throw ValidationError("missing required string 'split'");
  auto split = parse_split(j["split"].get<std::string>());
  if (!split) throw ValidationError("split must be train|valid|test");
  r.split = *split;

  if (j.contains("speaker_id")) {
    if (!j["speaker_id"].is_string()) throw ValidationError("speaker_id must be a string");
    r.speaker_id = j["speaker_id"].get<std::string>();
  }
  if (j.contains("gender")) {
    auto g = j["gender"].is_string() ? parse_gender(j["gender"].get<std::string>()) : std::nullopt;
    if (!g) throw ValidationError("gender must be \"male\" or \"female\"");
    r.gender = *g;
  }
  if (j.contains("age_years")) {
    if (!j["age_years"].is_number()) throw ValidationError("age_years must be a number");
    double a = j["age_years"].get<double>();
    if (!std::isfinite(a) || a < 0) throw ValidationError("age_years must be finite and >= 0");
    r.age_years = a;
  }
  if (j.contains("age_bin")) {
    if (!j["age_bin"].is_number_integer()) throw ValidationError("age_bin must be an integer");
    int b = j["age_bin"].get<int>();
    if (b < 0 || b >= static_cast<int>(AgeBinTable::kNumBins))
      throw ValidationError("age_bin must be in 0..7");
    r.age_bin = b;
  }
  if (r.age_years && r.age_bin && bins.contains(*r.age_years)) {
    int expected = bins.bin_of(*r.age_years);
    if (expected != *r.age_bin) {
      std::ostringstream os;
      os << "age_bin " << *r.age_bin << " inconsistent with age_years " << *r.age_years
         << " (bin " << expected << ")";
      throw ValidationError(os.str());
    }
  }
  return r;
}

inline void check_requirement(const UtteranceRecord& r, LabelRequirement req) {
  switch (req) {
    case LabelRequirement::kNone:
      break;
    case LabelRequirement::kSpeaker:
      if (!r.speaker_id) throw ValidationError("missing speaker_id required by speaker stage");
      break;
    case LabelRequirement::kAgeGender:
      if (!r.gender) throw ValidationError("missing gender required by age/gender stage");
      if (!r.age_years && !r.age_bin)
        throw ValidationError("missing age_years/age_bin required by age/gender stage");
      break;
  }
}

}  // namespace detail

/// Parses a JSON Lines manifest. Relative audio paths resolve against the
/// manifest's directory. All problems are collected and reported together
/// with their line numbers.
inline std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path,
                                                  LabelRequirement req = LabelRequirement::kNone,
                                                  const AgeBinTable& bins = AgeBinTable()) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read manifest " + path.string());

  std::vector<UtteranceRecord> records;
  std::vector<std::string> problems;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      UtteranceRecord r = detail::parse_record(j, lineno, bins);
      detail::check_requirement(r, req);
      std::filesystem::path ap(r.audio_path);
      if (ap.is_relative()) r.audio_path = (path.parent_path() / ap).lexically_normal().string();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      problems.push_back("line " + std::to_string(lineno) + ": unparseable JSON (" + e.what() + ")");
    } catch (const ValidationError& e) {
      problems.push_back("line " + std::to_string(lineno) + " (record " +
                         UtteranceRecord{.line = lineno}.id() + "): " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid manifest " + path.string() + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  if (records.empty()) spdlog::warn("manifest {} contains no records", path.string());
  return records;
}

inline std::vector<UtteranceRecord> filter_split(const std::vector<UtteranceRecord>& records,
                                                 Split split) {
  std::vector<UtteranceRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

inline nlohmann::json to_json(const UtteranceRecord& r) {
  nlohmann::json j;
  j["audio_path"] = r.audio_path;
  if (r.speaker_id) j["speaker_id"] = *r.speaker_id;
  if (r.gender) j["gender"] = std::string(to_string(*r.gender));
  if (r.age_years) j["age_years"] = *r.age_years;
  if (r.age_bin) j["age_bin"] = *r.age_bin;
  j["split"] = std::string(to_string(r.split));
  return j;
}

}  // namespace xvage

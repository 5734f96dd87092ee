#pragma once

// Age MAE/RMSE and gender accuracy per speaker group, and report rendering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvage/data_ingest.hpp"
#include "xvage/error.hpp"

namespace xvage {

struct PredictionRecord {
  std::string id;
  Gender true_gender = Gender::kFemale;
  double pred_gender_prob = 0.5;  // probability of "male"
  double true_age = 0.0;
  double pred_age = 0.0;
};

/// Male iff p >= 0.5.
inline Gender gender_decision(double prob_male) { return prob_male >= 0.5 ? Gender::kMale : Gender::kFemale; }

struct GroupMetrics {
  std::size_t count = 0;
  double accuracy = 0.0;  // fraction in [0, 1]
  double mae = 0.0;
  double rmse = 0.0;
};

enum class Group { kAll, kFemale, kMale };
inline constexpr std::array<Group, 3> kGroups = {Group::kAll, Group::kFemale, Group::kMale};

inline std::string to_string(Group g) {
  switch (g) {
    case Group::kAll: return "all";
    case Group::kFemale: return "female";
    case Group::kMale: return "male";
  }
  return "all";
}

struct EvalReport {
  std::string features = "-";
  std::string pretrained_on = "-";
  std::array<std::optional<GroupMetrics>, 3> groups;

  const std::optional<GroupMetrics>& operator[](Group g) const { return groups[static_cast<std::size_t>(g)]; }
  std::optional<GroupMetrics>& operator[](Group g) { return groups[static_cast<std::size_t>(g)]; }
};

/// Utterance-level metrics. Groups without records are left empty.
inline EvalReport compute_metrics(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw ValidationError("compute_metrics: no prediction records");
  struct Acc {
    std::size_t n = 0, correct = 0;
    double abs = 0.0, sq = 0.0;
  };
  std::array<Acc, 3> acc{};
  for (const auto& r : records) {
    if (!(r.pred_gender_prob >= 0.0 && r.pred_gender_prob <= 1.0))
      throw ValidationError("prediction " + r.id + ": gender probability outside [0, 1]");
    if (!std::isfinite(r.true_age) || !std::isfinite(r.pred_age))
      throw ValidationError("prediction " + r.id + ": non-finite age");
    const double err = r.pred_age - r.true_age;
    const bool ok = gender_decision(r.pred_gender_prob) == r.true_gender;
    for (Group g : {Group::kAll, r.true_gender == Gender::kMale ? Group::kMale : Group::kFemale}) {
      auto& a = acc[static_cast<std::size_t>(g)];
      ++a.n;
      a.correct += ok ? 1 : 0;
      a.abs += std::abs(err);
      a.sq += err * err;
    }
  }
  EvalReport rep;
  for (Group g : kGroups) {
    const auto& a = acc[static_cast<std::size_t>(g)];
    if (a.n == 0) continue;
    const auto n = static_cast<double>(a.n);
    rep[g] = GroupMetrics{a.n, static_cast<double>(a.correct) / n, a.abs / n, std::sqrt(a.sq / n)};
  }
  return rep;
}

enum class ReportFormat { kText, kCsv, kJson };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "text") return ReportFormat::kText;
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "json") return ReportFormat::kJson;
  throw ValidationError("report format must be text, csv or json");
}

namespace detail {

inline std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["features"] = r.features;
  j["pretrained_on"] = r.pretrained_on;
  j["groups"] = nlohmann::json::object();
  for (Group g : kGroups) {
    const auto& m = r[g];
    if (!m) {
      j["groups"][to_string(g)] = nullptr;
      continue;
    }
    j["groups"][to_string(g)] = {{"count", m->count}, {"accuracy", m->accuracy}, {"mae", m->mae}, {"rmse", m->rmse}};
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.features = j.value("features", std::string("-"));
  r.pretrained_on = j.value("pretrained_on", std::string("-"));
  for (Group g : kGroups) {
    const auto& v = j.at("groups").at(to_string(g));
    if (v.is_null()) continue;
    r[g] = GroupMetrics{v.at("count").get<std::size_t>(), v.at("accuracy").get<double>(), v.at("mae").get<double>(),
                        v.at("rmse").get<double>()};
  }
  return r;
}

/// text: gender-accuracy and age-error tables (percent with one decimal,
/// years with two). csv/json: full precision.
inline std::string render_report(const EvalReport& r, ReportFormat format) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::kJson:
      os << report_to_json(r).dump(2) << "\n";
      break;
    case ReportFormat::kCsv:
      os << "features,pretrained_on,group,count,accuracy,mae,rmse\n";
      for (Group g : kGroups) {
        const auto& m = r[g];
        os << r.features << "," << r.pretrained_on << "," << to_string(g) << ",";
        if (m)
          os << m->count << "," << detail::fmt_full(m->accuracy) << "," << detail::fmt_full(m->mae) << ","
             << detail::fmt_full(m->rmse);
        else
          os << "0,,,";
        os << "\n";
      }
      break;
    case ReportFormat::kText: {
      using detail::pad;
      const std::size_t wf = std::max<std::size_t>(8, r.features.size());
      const std::size_t wp = std::max<std::size_t>(13, r.pretrained_on.size());
      auto prefix = [&](const std::string& a, const std::string& b, const std::string& c) {
        return pad(a, wf) + " | " + pad(b, wp) + " | " + pad(c, 6) + " | ";
      };
      os << "Gender classification\n" << prefix("Features", "Pretrained on", "Group") << "Accuracy\n";
      for (Group g : kGroups) {
        const auto& m = r[g];
        os << prefix(r.features, r.pretrained_on, to_string(g))
           << (m ? detail::fmt_fixed(100.0 * m->accuracy, 1) + "%" : std::string("-")) << "\n";
      }
      os << "\nAge estimation\n" << prefix("Features", "Pretrained on", "Group") << "MAE   | RMSE\n";
      for (Group g : kGroups) {
        const auto& m = r[g];
        os << prefix(r.features, r.pretrained_on, to_string(g));
        if (m)
          os << pad(detail::fmt_fixed(m->mae, 2), 5) << " | " << detail::fmt_fixed(m->rmse, 2);
        else
          os << "-     | -";
        os << "\n";
      }
      break;
    }
  }
  return os.str();
}

inline nlohmann::json to_json(const PredictionRecord& p) {
  return {{"id", p.id},
          {"true_gender", std::string(to_string(p.true_gender))},
          {"pred_gender_prob", p.pred_gender_prob},
          {"true_age", p.true_age},
          {"pred_age", p.pred_age}};
}

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
  PredictionRecord p;
  p.id = j.at("id").get<std::string>();
  auto g = parse_gender(j.at("true_gender").get<std::string>());
  if (!g) throw ValidationError("prediction " + p.id + ": bad true_gender");
  p.true_gender = *g;
  p.pred_gender_prob = j.at("pred_gender_prob").get<double>();
  p.true_age = j.at("true_age").get<double>();
  p.pred_age = j.at("pred_age").get<double>();
  return p;
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& preds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : preds) out << to_json(p).dump() << "\n";
}

inline std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(prediction_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace xvage

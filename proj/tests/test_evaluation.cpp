#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace xvage;
using xvage::test::ScratchDir;

namespace {

PredictionRecord pred(Gender g, double p, double true_age, double pred_age) {
  static int n = 0;
  return {std::to_string(n++), g, p, true_age, pred_age};
}

}  // namespace

TEST(Metrics, WorkedExample) {
  const std::vector<PredictionRecord> preds = {
      pred(Gender::kMale, 0.9, 30, 33),    // correct, err +3
      pred(Gender::kMale, 0.4, 40, 36),    // wrong, err -4
      pred(Gender::kFemale, 0.2, 25, 25),  // correct, err 0
      pred(Gender::kFemale, 0.5, 50, 62),  // 0.5 counts as male: wrong, err +12
  };
  const EvalReport r = compute_metrics(preds);
  EXPECT_EQ(r[Group::kAll]->count, 4u);
  EXPECT_DOUBLE_EQ(r[Group::kAll]->accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r[Group::kAll]->mae, 19.0 / 4.0);
  EXPECT_DOUBLE_EQ(r[Group::kAll]->rmse, std::sqrt((9.0 + 16.0 + 0.0 + 144.0) / 4.0));
  EXPECT_DOUBLE_EQ(r[Group::kMale]->mae, 3.5);
  EXPECT_DOUBLE_EQ(r[Group::kMale]->accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r[Group::kFemale]->rmse, std::sqrt(72.0));
}

TEST(Metrics, PerfectPredictions) {
  const EvalReport r = compute_metrics({pred(Gender::kMale, 1.0, 30, 30), pred(Gender::kFemale, 0.0, 45, 45)});
  EXPECT_DOUBLE_EQ(r[Group::kAll]->accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r[Group::kAll]->mae, 0.0);
  EXPECT_DOUBLE_EQ(r[Group::kAll]->rmse, 0.0);
}

TEST(Metrics, MissingGroupAndInvalidInputs) {
  const EvalReport r = compute_metrics({pred(Gender::kMale, 0.7, 30, 31)});
  EXPECT_FALSE(r[Group::kFemale]);
  EXPECT_TRUE(r[Group::kMale]);
  EXPECT_THROW(compute_metrics({}), ValidationError);
  EXPECT_THROW(compute_metrics({pred(Gender::kMale, 1.5, 30, 31)}), ValidationError);
  EXPECT_THROW(compute_metrics({pred(Gender::kMale, 0.5, 30, std::nan(""))}), ValidationError);
}

TEST(Metrics, GroupDecompositionOnRandomSets) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1), age(18, 80), err(-15, 15);
  for (int set = 0; set < 200; ++set) {
    std::vector<PredictionRecord> preds;
    const int n = 2 + set % 40;
    for (int i = 0; i < n; ++i) {
      const double a = age(rng);
      preds.push_back(pred(u(rng) < 0.5 ? Gender::kMale : Gender::kFemale, u(rng), a, a + err(rng)));
    }
    const EvalReport r = compute_metrics(preds);
    double correct = 0, abs = 0, sq = 0;
    std::size_t count = 0;
    for (Group g : {Group::kFemale, Group::kMale})
      if (r[g]) {
        const auto k = static_cast<double>(r[g]->count);
        correct += r[g]->accuracy * k;
        abs += r[g]->mae * k;
        sq += r[g]->rmse * r[g]->rmse * k;
        count += r[g]->count;
      }
    EXPECT_EQ(count, r[Group::kAll]->count);
    EXPECT_NEAR(correct / count, r[Group::kAll]->accuracy, 1e-12);
    EXPECT_NEAR(abs / count, r[Group::kAll]->mae, 1e-9);
    EXPECT_NEAR(std::sqrt(sq / count), r[Group::kAll]->rmse, 1e-9);
    EXPECT_GE(r[Group::kAll]->rmse + 1e-12, r[Group::kAll]->mae);
  }
}

TEST(Report, TextLayout) {
  EvalReport r;
  r.features = "Mel";
  r.pretrained_on = "-";
  r[Group::kAll] = GroupMetrics{10, 0.9, 7.456, 8.0};
  r[Group::kFemale] = GroupMetrics{4, 0.75, 6.0, 6.5};
  const std::string text = render_report(r, ReportFormat::kText);
  EXPECT_NE(text.find("Features | Pretrained on | Group  | Accuracy"), std::string::npos) << text;
  EXPECT_NE(text.find("Mel      | -             | all    | 90.0%"), std::string::npos) << text;
  EXPECT_NE(text.find("Mel      | -             | female | 75.0%"), std::string::npos) << text;
  EXPECT_NE(text.find("Mel      | -             | male   | -"), std::string::npos) << text;
  EXPECT_NE(text.find("| all    | 7.46  | 8.00"), std::string::npos) << text;
}

TEST(Report, CsvAndJsonKeepFullPrecision) {
  EvalReport r;
  r.features = "MFCC";
  r.pretrained_on = "a + b";
  r[Group::kAll] = GroupMetrics{3, 2.0 / 3.0, 1.0 / 7.0, 0.3};
  const std::string csv = render_report(r, ReportFormat::kCsv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "features,pretrained_on,group,count,accuracy,mae,rmse");
  EXPECT_NE(csv.find("MFCC,a + b,all,3,0.66666666666666663,0.14285714285714285,0.29999999999999999"), std::string::npos)
      << csv;
  EXPECT_NE(csv.find("MFCC,a + b,male,0,,,"), std::string::npos) << csv;

  const EvalReport back = report_from_json(nlohmann::json::parse(render_report(r, ReportFormat::kJson)));
  EXPECT_EQ(back.features, "MFCC");
  EXPECT_EQ(back[Group::kAll]->mae, r[Group::kAll]->mae);
  EXPECT_EQ(back[Group::kAll]->accuracy, r[Group::kAll]->accuracy);
  EXPECT_FALSE(back[Group::kMale]);
  EXPECT_THROW(parse_report_format("xml"), ValidationError);
}

TEST(Predictions, JsonlRoundTrip) {
  ScratchDir dir("preds");
  const std::vector<PredictionRecord> preds = {pred(Gender::kMale, 0.123456789, 30.5, 29.25),
                                               pred(Gender::kFemale, 0.9, 61, 55.5)};
  write_predictions(dir / "p.jsonl", preds);
  const auto back = read_predictions(dir / "p.jsonl");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].id, preds[i].id);
    EXPECT_EQ(back[i].true_gender, preds[i].true_gender);
    EXPECT_EQ(back[i].pred_gender_prob, preds[i].pred_gender_prob);
    EXPECT_EQ(back[i].pred_age, preds[i].pred_age);
  }
}

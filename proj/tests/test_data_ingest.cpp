#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace xvage;
using xvage::test::ScratchDir;

namespace {

std::filesystem::path write_lines(const ScratchDir& dir, const std::string& name, const std::vector<std::string>& lines) {
  const auto p = dir / name;
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
  return p;
}

}  // namespace

TEST(AgeBins, BinOfHalfOpenIntervals) {
  const AgeBinTable bins;
  EXPECT_EQ(bins.bin_of(15.0), 0);
  EXPECT_EQ(bins.bin_of(10.0), 0);
  EXPECT_EQ(bins.bin_of(20.0), 1);
  EXPECT_EQ(bins.bin_of(19.999), 0);
  EXPECT_EQ(bins.bin_of(89.9), 7);
  EXPECT_THROW(bins.bin_of(90.0), OutOfRangeError);
  EXPECT_THROW(bins.bin_of(9.99), OutOfRangeError);
  EXPECT_THROW(bins.bin_of(std::nan("")), OutOfRangeError);
}

TEST(AgeBins, Midpoints) {
  const AgeBinTable bins;
  EXPECT_DOUBLE_EQ(bins.midpoint_age(0), 15.0);
  EXPECT_DOUBLE_EQ(bins.midpoint_age(7), 85.0);
  EXPECT_THROW(bins.midpoint_age(8), OutOfRangeError);
  EXPECT_THROW(bins.midpoint_age(-1), OutOfRangeError);
}

TEST(AgeBins, MidpointFallsInItsOwnBin) {
  const AgeBinTable bins = AgeBinTable::from_vector({0, 18, 25, 33, 41, 50, 62, 75, 100});
  for (int b = 0; b < 8; ++b) EXPECT_EQ(bins.bin_of(bins.midpoint_age(b)), b);
}

TEST(AgeBins, RejectsBadTables) {
  EXPECT_THROW(AgeBinTable::from_vector({10, 20, 30}), ConfigError);
  EXPECT_THROW(AgeBinTable::from_vector({10, 20, 30, 40, 40, 60, 70, 80, 90}), ConfigError);
}

TEST(RegressionTarget, ExactAgeWinsOverBin) {
  const AgeBinTable bins;
  UtteranceRecord r;
  r.age_bin = 2;
  EXPECT_DOUBLE_EQ(regression_target(r, bins), 35.0);
  r.age_years = 33.0;
  EXPECT_DOUBLE_EQ(regression_target(r, bins), 33.0);
  EXPECT_EQ(age_group_target(r, bins), 2);
  UtteranceRecord none;
  EXPECT_THROW(regression_target(none, bins), ValidationError);
}

TEST(Manifest, LoadsRecordsAndResolvesPaths) {
  ScratchDir dir("manifest");
  const auto p = write_lines(dir, "m.jsonl",
                             {R"({"audio_path":"a.wav","speaker_id":"s1","gender":"male","age_years":31.5,"split":"train"})",
                              R"({"audio_path":"/abs/b.wav","gender":"female","age_bin":3,"split":"valid"})",
                              "",
                              R"({"audio_path":"sub/c.wav","split":"test"})"});
  const auto recs = load_manifest(p);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].audio_path, (dir.path() / "a.wav").string());
  EXPECT_EQ(recs[1].audio_path, "/abs/b.wav");
  EXPECT_EQ(recs[2].audio_path, (dir.path() / "sub/c.wav").string());
  EXPECT_EQ(*recs[0].speaker_id, "s1");
  EXPECT_EQ(*recs[0].gender, Gender::kMale);
  EXPECT_DOUBLE_EQ(*recs[0].age_years, 31.5);
  EXPECT_EQ(*recs[1].age_bin, 3);
  EXPECT_EQ(recs[1].split, Split::kValid);
  EXPECT_EQ(recs[2].split, Split::kTest);
  EXPECT_EQ(recs[2].id(), "000004");
  EXPECT_EQ(filter_split(recs, Split::kTrain).size(), 1u);
}

TEST(Manifest, InconsistentBinIsRejectedWithLineNumber) {
  ScratchDir dir("manifest_bad");
  const auto p = write_lines(dir, "m.jsonl",
                             {R"({"audio_path":"a.wav","split":"train"})",
                              R"({"audio_path":"b.wav","age_years":25,"age_bin":5,"split":"train"})"});
  try {
    load_manifest(p);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("inconsistent"), std::string::npos) << msg;
  }
}

TEST(Manifest, AggregatesAllProblems) {
  ScratchDir dir("manifest_multi");
  const auto p = write_lines(dir, "m.jsonl",
                             {R"({"audio_path":"a.wav","split":"nope"})", R"(not json)",
                              R"({"audio_path":"c.wav","split":"train","extra":1})",
                              R"({"audio_path":"d.wav","split":"train","gender":null})"});
  try {
    load_manifest(p);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    for (const char* l : {"line 1", "line 2", "line 3", "line 4"}) EXPECT_NE(msg.find(l), std::string::npos) << msg;
  }
}

TEST(Manifest, LabelRequirements) {
  ScratchDir dir("manifest_req");
  const auto p = write_lines(dir, "m.jsonl", {R"({"audio_path":"a.wav","gender":"male","split":"train"})"});
  EXPECT_NO_THROW(load_manifest(p, LabelRequirement::kNone));
  EXPECT_THROW(load_manifest(p, LabelRequirement::kSpeaker), ValidationError);
  EXPECT_THROW(load_manifest(p, LabelRequirement::kAgeGender), ValidationError);
}

TEST(Manifest, EmptyManifestYieldsNoRecords) {
  ScratchDir dir("manifest_empty");
  const auto p = write_lines(dir, "m.jsonl", {});
  EXPECT_TRUE(load_manifest(p).empty());
  EXPECT_THROW(load_manifest(dir / "missing.jsonl"), ValidationError);
}

TEST(Manifest, JsonRoundTrip) {
  UtteranceRecord r;
  r.audio_path = "x.wav";
  r.speaker_id = "spk";
  r.gender = Gender::kFemale;
  r.age_years = 44.0;
  r.age_bin = 3;
  r.split = Split::kTest;
  const auto back = detail::parse_record(to_json(r), 1, AgeBinTable());
  EXPECT_EQ(back.audio_path, r.audio_path);
  EXPECT_EQ(back.speaker_id, r.speaker_id);
  EXPECT_EQ(back.gender, r.gender);
  EXPECT_EQ(back.age_years, r.age_years);
  EXPECT_EQ(back.age_bin, r.age_bin);
  EXPECT_EQ(back.split, r.split);
}

TEST(Batching, PartitionSizes) {
  const auto b = plan_batches(33, 16, 1);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 16u);
  EXPECT_EQ(b[1].size(), 16u);
  EXPECT_EQ(b[2].size(), 1u);
  std::set<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 33u);
  EXPECT_EQ(*seen.rbegin(), 32u);
}

TEST(Batching, SeedDeterminism) {
  EXPECT_EQ(plan_batches(100, 7, 42), plan_batches(100, 7, 42));
  EXPECT_NE(plan_batches(100, 7, 42), plan_batches(100, 7, 43));
}

TEST(Batching, EmptyAndInvalid) {
  EXPECT_THROW(plan_batches(0, 16, 1), ValidationError);
  EXPECT_THROW(plan_batches(5, 0, 1), ValidationError);
}

TEST(Batching, BatchSourceTargetsAndSkips) {
  ScratchDir dir("source");
  synth::CorpusSpec spec;
  spec.speakers = 3;
  spec.utterances_per_speaker = 2;
  spec.audio.seconds = 0.5;
  const auto manifest = synth::write_corpus(dir.path(), "c", spec);
  {
    std::ofstream(dir / "broken.wav") << "not audio";
    std::ofstream out(manifest, std::ios::app);
    out << R"({"audio_path":"broken.wav","speaker_id":"x","gender":"male","age_years":30,"split":"train"})" << "\n";
    out << R"({"audio_path":"c_0_0.wav","speaker_id":"y","gender":"male","age_years":95,"split":"train"})" << "\n";
  }
  const auto recs = load_manifest(manifest, LabelRequirement::kAgeGender);
  ASSERT_EQ(recs.size(), 8u);
  PreprocessConfig pre;
  pre.crop_seconds = 0.3;
  BatchSource src(recs, LabelRequirement::kAgeGender, pre, FeatureConfig{}, AgeBinTable(), 2);
  EXPECT_EQ(src.size(), 6u);
  EXPECT_EQ(src.skipped(), 2u);

  const auto batches = src.epoch_batches(4, 9, 0, CropMode::kRandom);
  ASSERT_EQ(batches.size(), 2u);
  for (const auto& b : batches)
    for (std::size_t j = 0; j < b.size(); ++j) {
      EXPECT_EQ(b.features[j].rows(), 28);  // 0.3 s -> (4800 - 400) / 160 + 1
      const auto& r = src.records()[b.records[j]];
      EXPECT_EQ(b.targets.gender[j], *r.gender == Gender::kMale ? 1 : 0);
      EXPECT_DOUBLE_EQ(b.targets.age_years[j], *r.age_years);
    }

  // Same seed and epoch -> identical features; different epoch -> new crops.
  const auto again = src.epoch_batches(4, 9, 0, CropMode::kRandom);
  const auto other = src.epoch_batches(4, 9, 1, CropMode::kRandom);
  EXPECT_EQ(batches[0].records, again[0].records);
  EXPECT_TRUE(batches[0].features[0] == again[0].features[0]);
  bool differs = false;
  for (std::size_t b = 0; b < other.size(); ++b)
    differs = differs || other[b].records != batches[b].records ||
              !(other[b].features[0] == batches[b].features[0]);
  EXPECT_TRUE(differs);
}

TEST(Batching, ThreadCountDoesNotChangeFeatures) {
  ScratchDir dir("threads");
  synth::CorpusSpec spec;
  spec.speakers = 4;
  spec.utterances_per_speaker = 2;
  spec.audio.seconds = 0.5;
  const auto recs = load_manifest(synth::write_corpus(dir.path(), "c", spec), LabelRequirement::kSpeaker);
  PreprocessConfig pre;
  pre.crop_seconds = 0.4;
  BatchSource one(recs, LabelRequirement::kSpeaker, pre, FeatureConfig{}, AgeBinTable(), 1);
  BatchSource four(recs, LabelRequirement::kSpeaker, pre, FeatureConfig{}, AgeBinTable(), 4);
  EXPECT_EQ(one.speaker_index().size(), 4u);
  const auto a = one.epoch_batches(3, 5, 2, CropMode::kRandom);
  const auto b = four.epoch_batches(3, 5, 2, CropMode::kRandom);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].targets.speaker, b[i].targets.speaker);
    for (std::size_t j = 0; j < a[i].size(); ++j) EXPECT_TRUE(a[i].features[j] == b[i].features[j]);
  }
}

#include <sys/wait.h>

#include <cstdlib>

#include <gtest/gtest.h>

#include "test_support.hpp"

using xvage::test::ScratchDir;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout+stderr.
CliRun cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(XVAGE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.out.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  ScratchDir dir("cli_usage");
  const auto log = dir / "log.txt";
  EXPECT_EQ(cli("--help", log).code, 0);
  const CliRun bad = cli("train --no-such-flag", log);
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(cli("evaluate", log).code, 1);  // required options missing
  EXPECT_EQ(cli("frobnicate", log).code, 1);
}

TEST(Cli, MissingConfigIsAConfigError) {
  ScratchDir dir("cli_cfg");
  const CliRun r = cli("train --config " + q(dir / "absent.json"), dir / "log.txt");
  EXPECT_EQ(r.code, 1) << r.out;
}

TEST(Cli, SynthTrainEvaluateInfer) {
  ScratchDir dir("cli_e2e");
  const auto log = dir / "log.txt";
  CliRun r = cli("synth --out " + q(dir.path()) + " --seed 3", log);
  ASSERT_EQ(r.code, 0) << r.out;
  ASSERT_TRUE(std::filesystem::exists(dir / "config.json"));

  r = cli("train --config " + q(dir / "config.json"), log);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"stage\":\"finetune\""), std::string::npos) << r.out;
  const auto ckpt = dir / "checkpoints" / "finetune.ckpt";
  ASSERT_TRUE(std::filesystem::exists(ckpt));
  for (const char* s : {"spkid_pretrain", "agegender_pretrain", "finetune"})
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / (std::string(s) + ".log.jsonl"))) << s;

  r = cli("evaluate --checkpoint " + q(ckpt) + " --manifest " + q(dir / "timit.jsonl") + " --out " + q(dir / "rep"),
          log);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Features | Pretrained on"), std::string::npos) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir / "rep"));

  r = cli("evaluate --checkpoint " + q(ckpt) + " --manifest " + q(dir / "timit.jsonl") + " --out " +
              q(dir / "rep_json") + " --format json",
          log);
  ASSERT_EQ(r.code, 0) << r.out;

  const auto wav = dir / "timit_0_0.wav";
  r = cli("infer --checkpoint " + q(ckpt) + " " + q(wav), log);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("timit_0_0.wav"), std::string::npos) << r.out;

  r = cli("infer --checkpoint " + q(ckpt) + " " + q(wav) + " " + q(dir / "missing.wav"), log);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("missing.wav"), std::string::npos) << r.out;

  // Manifest without gender/age labels cannot be evaluated.
  {
    std::ofstream m(dir / "unlabelled.jsonl");
    m << R"({"audio_path": "timit_0_0.wav", "split": "test"})" << "\n";
  }
  r = cli("evaluate --checkpoint " + q(ckpt) + " --manifest " + q(dir / "unlabelled.jsonl") + " --out " +
              q(dir / "rep2"),
          log);
  EXPECT_EQ(r.code, 1) << r.out;
}

TEST(Cli, FeaturizeWritesFilesAndSkipsBadAudio) {
  ScratchDir dir("cli_feat");
  xvage::synth::CorpusSpec spec;
  spec.speakers = 3;
  spec.utterances_per_speaker = 1;
  spec.audio.seconds = 0.5;
  const auto manifest = xvage::synth::write_corpus(dir.path(), "c", spec);
  {
    std::ofstream bad(dir / "broken.wav");
    bad << "not a wav file";
    std::ofstream m(manifest, std::ios::app);
    m << R"({"audio_path": "broken.wav", "split": "train"})" << "\n";
  }
  const CliRun r = cli("featurize --manifest " + q(manifest) + " --out " + q(dir / "feats"), dir / "log.txt");
  ASSERT_EQ(r.code, 0) << r.out;
  int vpfm = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "feats")) vpfm += e.path().extension() == ".vpfm";
  EXPECT_EQ(vpfm, 3);
  std::ifstream idx(dir / "feats" / "index.jsonl");
  int lines = 0, skipped = 0;
  for (std::string l; std::getline(idx, l); ++lines) skipped += nlohmann::json::parse(l).contains("skipped");
  EXPECT_EQ(lines, 4);
  EXPECT_EQ(skipped, 1);
  for (const auto& e : std::filesystem::directory_iterator(dir / "feats"))
    if (e.path().extension() == ".vpfm") EXPECT_EQ(xvage::read_feature_file(e.path()).dim(), 30);
}

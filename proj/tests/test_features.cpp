#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace xvage;
using namespace xvage::test;

TEST(Framing, FrameCountFormula) {
  const FeatureConfig cfg;
  EXPECT_EQ(cfg.win_length(), 400);
  EXPECT_EQ(cfg.hop_length(), 160);
  for (std::size_t len : {400u, 559u, 560u, 16000u, 80000u}) {
    AudioBuffer b;
    b.sample_rate = 16000;
    b.samples.assign(len, 0.1);
    EXPECT_EQ(frame_signal(b, cfg).rows(), static_cast<Eigen::Index>((len - 400) / 160 + 1)) << len;
  }
  AudioBuffer shorty;
  shorty.sample_rate = 16000;
  shorty.samples.assign(399, 0.1);
  EXPECT_THROW(frame_signal(shorty, cfg), ValidationError);
}

TEST(Framing, HammingWindowIsApplied) {
  const Eigen::VectorXd w = hamming_window(400);
  EXPECT_NEAR(w[0], 0.08, 1e-12);
  EXPECT_NEAR(w[399], 0.08, 1e-12);
  EXPECT_NEAR(w[200], 0.54 + 0.46 * std::cos(std::numbers::pi / 399.0), 1e-12);
  AudioBuffer ones;
  ones.sample_rate = 16000;
  ones.samples.assign(720, 1.0);
  const Eigen::MatrixXd f = frame_signal(ones, FeatureConfig{});
  ASSERT_EQ(f.rows(), 3);
  for (int i = 0; i < 400; ++i) EXPECT_DOUBLE_EQ(f(2, i), w[i]);
}

TEST(Spectrum, MatchesBruteForceDft) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Eigen::MatrixXd frames(5, 400);
  for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = g(rng);
  const Eigen::MatrixXd p = power_spectrum(frames, 512);
  ASSERT_EQ(p.cols(), 257);
  for (Eigen::Index t = 0; t < 5; ++t) {
    std::vector<double> x(400);
    for (int i = 0; i < 400; ++i) x[i] = frames(t, i);
    const auto ref = dft_power(x, 512);
    for (int k = 0; k < 257; ++k) EXPECT_NEAR(p(t, k), ref[k], 1e-8 * (1.0 + ref[k]));
  }
}

TEST(Spectrum, ParsevalHolds) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Eigen::MatrixXd frame(1, 512);
  for (int i = 0; i < 512; ++i) frame(0, i) = g(rng);
  const Eigen::MatrixXd p = power_spectrum(frame, 512);
  // Full-spectrum energy from the one-sided bins.
  double spec = p(0, 0) + p(0, 256);
  for (int k = 1; k < 256; ++k) spec += 2.0 * p(0, k);
  EXPECT_NEAR(spec / 512.0, frame.squaredNorm(), 1e-8 * frame.squaredNorm());
}

TEST(Spectrum, PureToneLandsInItsBin) {
  // 1000 Hz at 16 kHz with N=512 -> bin 32 exactly.
  const AudioBuffer tone = sine(1000.0, 0.05);
  FeatureConfig cfg;
  const Eigen::MatrixXd p = power_spectrum(frame_signal(tone, cfg), cfg.fft_size);
  Eigen::Index arg;
  p.row(0).maxCoeff(&arg);
  EXPECT_EQ(arg, 32);
}

TEST(Mel, ScaleFormulaAndInverse) {
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-9);
  EXPECT_NEAR(hz_to_mel(1000.0), mel_of(1000.0), 1e-3);
  for (double hz : {0.0, 40.0, 440.0, 4000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
}

TEST(Mel, FilterbankRows) {
  const FeatureConfig cfg;
  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  ASSERT_EQ(fb.rows(), 64);
  ASSERT_EQ(fb.cols(), 257);
  const auto pts = mel_points_hz(cfg);
  const double bin_hz = 16000.0 / 512.0;
  for (int m = 0; m < 64; ++m) {
    EXPECT_GE(fb.row(m).minCoeff(), 0.0);
    EXPECT_LE(fb.row(m).maxCoeff(), 1.0 + 1e-12);
    // Peak within one bin of the filter centre.
    Eigen::Index arg;
    fb.row(m).maxCoeff(&arg);
    EXPECT_LE(std::abs(arg * bin_hz - pts[static_cast<std::size_t>(m + 1)]), bin_hz) << m;
    // Support strictly inside (left, right).
    for (int k = 0; k < 257; ++k)
      if (fb(m, k) > 0) {
        EXPECT_GT(k * bin_hz, pts[static_cast<std::size_t>(m)]);
        EXPECT_LT(k * bin_hz, pts[static_cast<std::size_t>(m + 2)]);
      }
  }
  // First filter starts near 40 Hz (bins 1-2), last ends near 8000 Hz (bins 255-256).
  Eigen::Index first = 0;
  while (fb(0, first) == 0.0) ++first;
  EXPECT_GE(first, 1);
  EXPECT_LE(first, 2);
  Eigen::Index last = 256;
  while (fb(63, last) == 0.0) --last;
  EXPECT_GE(last, 254);
  EXPECT_LE(last, 256);
}

TEST(Mel, LogMelHomogeneity) {
  // Scaling the power by 4 shifts every log-mel value by log 4.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  Eigen::MatrixXd p(3, 257);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  const Eigen::MatrixXd fb = mel_filterbank(FeatureConfig{});
  const FeatureMatrix a = log_mel(p, fb, 0.0);
  const FeatureMatrix b = log_mel(4.0 * p, fb, 0.0);
  EXPECT_LT(((b.values - a.values).array() - std::log(4.0)).abs().maxCoeff(), 1e-12);
  EXPECT_THROW(log_mel(Eigen::MatrixXd::Ones(2, 10), fb), ShapeError);
}

TEST(Mel, SilenceHitsTheLogFloor) {
  const FeatureMatrix z = log_mel(Eigen::MatrixXd::Zero(2, 257), mel_filterbank(FeatureConfig{}));
  EXPECT_LT((z.values.array() - std::log(1e-10)).abs().maxCoeff(), 1e-12);
}

TEST(Dct, OrthonormalBasis) {
  const Eigen::MatrixXd d = dct2_matrix(64, 64);
  EXPECT_LT((d * d.transpose() - Eigen::MatrixXd::Identity(64, 64)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dct, ConstantInputOnlyFillsC0) {
  FeatureMatrix lm;
  lm.kind = FeatureKind::kMel;
  lm.values = Eigen::MatrixXd::Constant(1, 64, 2.5);
  const FeatureMatrix c = mfcc(lm, 30);
  EXPECT_NEAR(c.values(0, 0), 2.5 * std::sqrt(64.0), 1e-12);
  for (int k = 1; k < 30; ++k) EXPECT_NEAR(c.values(0, k), 0.0, 1e-12);
  EXPECT_EQ(c.kind, FeatureKind::kMfcc);
  EXPECT_THROW(mfcc(lm, 65), ValidationError);
}

TEST(Dct, MatchesDefinition) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  FeatureMatrix lm;
  lm.values.resize(4, 64);
  for (Eigen::Index i = 0; i < lm.values.size(); ++i) lm.values.data()[i] = g(rng);
  const FeatureMatrix c = mfcc(lm, 30);
  for (Eigen::Index t = 0; t < 4; ++t) {
    std::vector<double> v(64);
    for (int i = 0; i < 64; ++i) v[i] = lm.values(t, i);
    const auto ref = dct2(v, 30);
    for (int k = 0; k < 30; ++k) EXPECT_NEAR(c.values(t, k), ref[k], 1e-12);
  }
}

TEST(Normalize, ZeroMeanPerDimension) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(3.0, 2.0);
  FeatureMatrix fm;
  fm.values.resize(50, 7);
  for (Eigen::Index i = 0; i < fm.values.size(); ++i) fm.values.data()[i] = g(rng);
  const FeatureMatrix n = normalize_features(fm);
  EXPECT_LT(n.values.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
  // Differences between frames are untouched.
  EXPECT_LT(((n.values.row(3) - n.values.row(9)) - (fm.values.row(3) - fm.values.row(9))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(normalize_features(fm, false).values == fm.values);
}

TEST(Extractor, ShapesAndGainInvariance) {
  const AudioBuffer tone = sine(440.0, 1.0, 0.2);
  AudioBuffer louder = tone;
  for (double& s : louder.samples) s *= 3.0;
  FeatureConfig cfg;
  const FeatureMatrix a = FeatureExtractor(cfg)(tone);
  const FeatureMatrix b = FeatureExtractor(cfg)(louder);
  EXPECT_EQ(a.frames(), 98);
  EXPECT_EQ(a.dim(), 30);
  // A constant gain only moves c0, which mean normalisation removes; the log floor leaves a small residue.
  EXPECT_LT((a.values - b.values).cwiseAbs().maxCoeff(), 1e-4);

  cfg.kind = FeatureKind::kMel;
  const FeatureMatrix m = FeatureExtractor(cfg)(tone);
  EXPECT_EQ(m.dim(), 64);
  EXPECT_EQ(m.kind, FeatureKind::kMel);
  AudioBuffer wrong_rate = tone;
  wrong_rate.sample_rate = 8000;
  EXPECT_THROW(FeatureExtractor{cfg}(wrong_rate), ValidationError);
}

TEST(Extractor, MatchesStepByStepPipeline) {
  const AudioBuffer tone = sine(523.0, 0.3, 0.3);
  FeatureConfig cfg;
  cfg.normalize_features = false;
  const FeatureMatrix lm = log_mel(power_spectrum(frame_signal(tone, cfg), 512), mel_filterbank(cfg));
  const FeatureMatrix ref = mfcc(lm, 30);
  const FeatureMatrix got = FeatureExtractor(cfg)(tone);
  EXPECT_LT((got.values - ref.values).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FeatureConfig, ValidationAndJson) {
  FeatureConfig cfg;
  cfg.n_mfcc = 80;
  EXPECT_THROW(cfg.validate(), ConfigError);
  FeatureConfig mel;
  mel.kind = FeatureKind::kMel;
  const FeatureConfig back = nlohmann::json(mel).get<FeatureConfig>();
  EXPECT_EQ(back.kind, FeatureKind::kMel);
  EXPECT_EQ(back.dim(), 64);
  EXPECT_THROW(parse_feature_kind("fbank"), ConfigError);
}

TEST(Vpfm, RoundTripAndHeader) {
  ScratchDir dir("vpfm");
  FeatureMatrix fm;
  fm.kind = FeatureKind::kMel;
  fm.values.resize(3, 2);
  fm.values << 1.5, -2.0, 0.25, 3.0, 1e-3, -7.0;
  write_feature_file(dir / "f.vpfm", fm);
  const std::string bytes = read_bytes(dir / "f.vpfm");
  ASSERT_EQ(bytes.size(), 16u + 3 * 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "VPFM");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 1);
  float second;
  std::memcpy(&second, bytes.data() + 20, 4);
  EXPECT_EQ(second, -2.0f);  // row-major
  const FeatureMatrix back = read_feature_file(dir / "f.vpfm");
  EXPECT_EQ(back.kind, FeatureKind::kMel);
  EXPECT_TRUE(back.values == fm.values.cast<float>().cast<double>());
}

TEST(Vpfm, RejectsCorruptFiles) {
  EXPECT_THROW(decode_feature_file("VPFX0000000000000000"), DecodeError);
  FeatureMatrix fm;
  fm.values = Eigen::MatrixXd::Ones(2, 2);
  std::string bytes = encode_feature_file(fm);
  EXPECT_THROW(decode_feature_file(bytes.substr(0, bytes.size() - 1)), DecodeError);
  bytes[12] = 9;
  EXPECT_THROW(decode_feature_file(bytes), DecodeError);
}

#pragma once

// Framing, power spectra, mel filterbank, log-mel and MFCC features, and the
// VPFM feature file format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>
#include <nlohmann/json.hpp>

#include "xvage/audio.hpp"
#include "xvage/error.hpp"

namespace xvage {

enum class FeatureKind : std::uint32_t { kMfcc = 0, kMel = 1 };

inline std::string to_string(FeatureKind k) { return k == FeatureKind::kMfcc ? "mfcc" : "mel"; }

inline FeatureKind parse_feature_kind(const std::string& s) {
  if (s == "mfcc") return FeatureKind::kMfcc;
  if (s == "mel") return FeatureKind::kMel;
  throw ConfigError("feature kind must be \"mfcc\" or \"mel\", got \"" + s + "\"");
}

struct FeatureConfig {
  FeatureKind kind = FeatureKind::kMfcc;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int n_mels = 64;
  int n_mfcc = 30;
  double f_low = 40.0;
  double f_high = 8000.0;
  int sample_rate = kTargetSampleRate;
  int fft_size = 512;
  bool normalize_features = true;
  double log_floor = 1e-10;

  int win_length() const { return static_cast<int>(std::lround(win_ms * sample_rate / 1000.0)); }
  int hop_length() const { return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0)); }
  int num_bins() const { return fft_size / 2 + 1; }
  int dim() const { return kind == FeatureKind::kMfcc ? n_mfcc : n_mels; }

  void validate() const {
    if (!(f_low >= 0 && f_low < f_high)) throw ConfigError("feature config: need 0 <= f_low < f_high");
    if (f_high > sample_rate / 2.0) throw ConfigError("feature config: f_high exceeds Nyquist");
    if (n_mels <= 0 || n_mfcc <= 0 || n_mfcc > n_mels)
      throw ConfigError("feature config: need 0 < n_mfcc <= n_mels");
    if (win_length() <= 0 || hop_length() <= 0) throw ConfigError("feature config: bad framing");
    if (fft_size < win_length() || (fft_size & (fft_size - 1)) != 0)
      throw ConfigError("feature config: fft_size must be a power of two >= window length");
  }
};

inline void to_json(nlohmann::json& j, const FeatureConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},      {"win_ms", c.win_ms},
                     {"hop_ms", c.hop_ms},             {"n_mels", c.n_mels},
                     {"n_mfcc", c.n_mfcc},             {"f_low", c.f_low},
                     {"f_high", c.f_high},             {"sample_rate", c.sample_rate},
                     {"fft_size", c.fft_size},         {"normalize_features", c.normalize_features},
                     {"log_floor", c.log_floor}};
}

inline void from_json(const nlohmann::json& j, FeatureConfig& c) {
  c = FeatureConfig{};
  if (j.contains("kind")) c.kind = parse_feature_kind(j.at("kind").get<std::string>());
  c.win_ms = j.value("win_ms", c.win_ms);
  c.hop_ms = j.value("hop_ms", c.hop_ms);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.n_mfcc = j.value("n_mfcc", c.n_mfcc);
  c.f_low = j.value("f_low", c.f_low);
  c.f_high = j.value("f_high", c.f_high);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.normalize_features = j.value("normalize_features", c.normalize_features);
  c.log_floor = j.value("log_floor", c.log_floor);
  c.validate();
}

// T x F, frames along rows.
struct FeatureMatrix {
  Eigen::MatrixXd values;
  FeatureKind kind = FeatureKind::kMfcc;

  Eigen::Index frames() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
};

inline Eigen::VectorXd hamming_window(int n) {
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

/// Splits the signal into complete windows (T = floor((L - N) / hop) + 1) and
/// applies a Hamming window. Rows are frames.
inline Eigen::MatrixXd frame_signal(const AudioBuffer& buf, const FeatureConfig& cfg) {
  const int n = cfg.win_length();
  const int hop = cfg.hop_length();
  if (buf.size() < static_cast<std::size_t>(n))
    throw ValidationError("frame_signal: buffer of " + std::to_string(buf.size()) +
                          " samples is shorter than one " + std::to_string(n) + "-sample window");
  const auto frames = static_cast<Eigen::Index>((buf.size() - n) / hop + 1);
  const Eigen::VectorXd w = hamming_window(n);
  Eigen::MatrixXd out(frames, n);
  for (Eigen::Index t = 0; t < frames; ++t)
    for (int i = 0; i < n; ++i) out(t, i) = buf.samples[static_cast<std::size_t>(t * hop + i)] * w[i];
  return out;
}

/// |DFT|^2 of each zero-padded frame, bins 0..fft_size/2.
inline Eigen::MatrixXd power_spectrum(const Eigen::MatrixXd& frames, int fft_size) {
  if (frames.cols() > fft_size) throw ValidationError("power_spectrum: fft_size smaller than frame");
  const int bins = fft_size / 2 + 1;
  Eigen::FFT<double> fft;
  std::vector<double> in(static_cast<std::size_t>(fft_size));
  std::vector<std::complex<double>> spec;
  Eigen::MatrixXd out(frames.rows(), bins);
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    std::fill(in.begin(), in.end(), 0.0);
    for (Eigen::Index i = 0; i < frames.cols(); ++i) in[static_cast<std::size_t>(i)] = frames(t, i);
    fft.fwd(spec, in);
    for (int k = 0; k < bins; ++k) out(t, k) = std::norm(spec[static_cast<std::size_t>(k)]);
  }
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_mels + 2 edge/center frequencies in Hz, uniformly spaced in mel between
/// f_low and f_high. Filter m spans points m..m+2 and peaks at m+1.
inline std::vector<double> mel_points_hz(const FeatureConfig& cfg) {
  const double lo = hz_to_mel(cfg.f_low);
  const double hi = hz_to_mel(cfg.f_high);
  std::vector<double> pts(static_cast<std::size_t>(cfg.n_mels + 2));
  for (int i = 0; i < cfg.n_mels + 2; ++i) pts[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));
  pts.front() = cfg.f_low;
  pts.back() = cfg.f_high;
  return pts;
}

/// Triangular filters with unit peak, evaluated at the FFT bin frequencies.
inline Eigen::MatrixXd mel_filterbank(const FeatureConfig& cfg) {
  const auto pts = mel_points_hz(cfg);
  const int bins = cfg.num_bins();
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = pts[m], center = pts[m + 1], right = pts[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      double w = 0.0;
      if (f > left && f <= center)
        w = (f - left) / (center - left);
      else if (f > center && f < right)
        w = (right - f) / (right - center);
      fb(m, k) = w;
    }
  }
  return fb;
}

/// log(filterbank * power + floor) per frame; result is T x n_mels.
inline FeatureMatrix log_mel(const Eigen::MatrixXd& power_spec, const Eigen::MatrixXd& filterbank,
                             double floor = 1e-10) {
  if (power_spec.cols() != filterbank.cols())
    throw ShapeError("log_mel: spectrum has " + std::to_string(power_spec.cols()) +
                     " bins, filterbank expects " + std::to_string(filterbank.cols()));
  FeatureMatrix fm;
  fm.kind = FeatureKind::kMel;
  fm.values = ((power_spec * filterbank.transpose()).array() + floor).log().matrix();
  return fm;
}

/// Orthonormal DCT-II basis, rows are coefficients: n_out x n_in.
inline Eigen::MatrixXd dct2_matrix(int n_in, int n_out) {
  Eigen::MatrixXd d(n_out, n_in);
  for (int k = 0; k < n_out; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / n_in) : std::sqrt(2.0 / n_in);
    for (int n = 0; n < n_in; ++n) d(k, n) = s * std::cos(std::numbers::pi * k * (2 * n + 1) / (2.0 * n_in));
  }
  return d;
}

/// Keeps the first `n_mfcc` DCT-II coefficients (0th included) of each
/// log-mel frame.
inline FeatureMatrix mfcc(const FeatureMatrix& log_mel_matrix, int n_mfcc) {
  const auto bands = static_cast<int>(log_mel_matrix.dim());
  if (n_mfcc <= 0 || n_mfcc > bands) throw ValidationError("mfcc: need 0 < n_mfcc <= bands");
  FeatureMatrix fm;
  fm.kind = FeatureKind::kMfcc;
  fm.values = log_mel_matrix.values * dct2_matrix(bands, n_mfcc).transpose();
  return fm;
}

/// Subtracts the per-dimension mean over time.
inline FeatureMatrix normalize_features(const FeatureMatrix& fm, bool enabled = true) {
  if (!enabled || fm.frames() == 0) return fm;
  FeatureMatrix out = fm;
  out.values.rowwise() -= fm.values.colwise().mean();
  return out;
}

/// Feature extraction with a cached filterbank and DCT basis.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const FeatureConfig& cfg)
      : cfg_(cfg), filterbank_((cfg.validate(), mel_filterbank(cfg))), dct_(dct2_matrix(cfg.n_mels, cfg.n_mfcc)) {}

  const FeatureConfig& config() const { return cfg_; }

  FeatureMatrix operator()(const AudioBuffer& buf) const {
    if (buf.sample_rate != cfg_.sample_rate)
      throw ValidationError("feature extractor expects " + std::to_string(cfg_.sample_rate) +
                            " Hz audio, got " + std::to_string(buf.sample_rate));
    const Eigen::MatrixXd frames = frame_signal(buf, cfg_);
    FeatureMatrix fm = log_mel(power_spectrum(frames, cfg_.fft_size), filterbank_, cfg_.log_floor);
    if (cfg_.kind == FeatureKind::kMfcc) {
      fm.values = fm.values * dct_.transpose();
      fm.kind = FeatureKind::kMfcc;
    }
    return normalize_features(fm, cfg_.normalize_features);
  }

 private:
  FeatureConfig cfg_;
  Eigen::MatrixXd filterbank_;
  Eigen::MatrixXd dct_;
};

// ---------------------------------------------------------------------------
// VPFM feature files: "VPFM", u32 T, u32 F, u32 kind, then T*F float32,
// row-major, all little-endian.

inline std::string encode_feature_file(const FeatureMatrix& fm) {
  static_assert(std::endian::native == std::endian::little, "VPFM writer assumes a little-endian host");
  std::string out = "VPFM";
  auto put = [&out](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put(static_cast<std::uint32_t>(fm.frames()));
  put(static_cast<std::uint32_t>(fm.dim()));
  put(static_cast<std::uint32_t>(fm.kind));
  for (Eigen::Index t = 0; t < fm.frames(); ++t)
    for (Eigen::Index f = 0; f < fm.dim(); ++f) {
      const auto v = static_cast<float>(fm.values(t, f));
      out.append(reinterpret_cast<const char*>(&v), 4);
    }
  return out;
}

inline FeatureMatrix decode_feature_file(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "VPFM") != 0) throw DecodeError("not a VPFM feature file");
  auto get = [&bytes](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  const std::uint32_t frames = get(4), dim = get(8), kind = get(12);
  if (kind > 1) throw DecodeError("VPFM: unknown kind code " + std::to_string(kind));
  if (bytes.size() != 16 + std::size_t(frames) * dim * 4) throw DecodeError("VPFM: payload size mismatch");
  FeatureMatrix fm;
  fm.kind = static_cast<FeatureKind>(kind);
  fm.values.resize(frames, dim);
  for (std::uint32_t t = 0; t < frames; ++t)
    for (std::uint32_t f = 0; f < dim; ++f) {
      float v;
      std::memcpy(&v, bytes.data() + 16 + (std::size_t(t) * dim + f) * 4, 4);
      fm.values(t, f) = v;
    }
  return fm;
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& fm) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const auto bytes = encode_feature_file(fm);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_feature_file(bytes);
}

}  // namespace xvage

#pragma once

// Waveform I/O and preprocessing: WAV decode, resampling, energy VAD,
// dBFS normalisation and fixed-length cropping.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "xvage/error.hpp"

namespace xvage {

inline constexpr int kTargetSampleRate = 16000;

struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = kTargetSampleRate;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16le(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

/// Decodes an in-memory RIFF/WAVE image. Accepts 16-bit integer PCM and 32-bit
/// IEEE float, mono or stereo; stereo is averaged to mono.
inline AudioBuffer decode_wav_bytes(const std::vector<unsigned char>& bytes) {
  using detail::read_u16le;
  using detail::read_u32le;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    std::string found = bytes.size() >= 4 ? std::string(bytes.begin(), bytes.begin() + 4) : "";
    for (char& c : found)
      if (!std::isprint(static_cast<unsigned char>(c))) c = '?';
    throw DecodeError("not a RIFF/WAVE file (leading bytes '" + found + "')");
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    std::uint32_t len = read_u32le(chunk + 4);
    std::size_t body = pos + 8;
    std::size_t avail = std::min<std::size_t>(len, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw DecodeError("truncated fmt chunk");
      format = read_u16le(chunk + 8);
      channels = read_u16le(chunk + 10);
      rate = read_u32le(chunk + 12);
      bits = read_u16le(chunk + 22);
      if (format == 0xFFFE && avail >= 26) format = read_u16le(chunk + 32);  // extensible subformat
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = avail;
    }
    pos = body + len + (len & 1u);
  }
  if (format == 0) throw DecodeError("WAV file has no fmt chunk");
  if (!data) throw DecodeError("WAV file has no data chunk");
  if (channels != 1 && channels != 2)
    throw DecodeError("unsupported channel count " + std::to_string(channels));
  if (rate == 0) throw DecodeError("WAV sample rate is zero");

  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32)
    throw DecodeError("unsupported WAV encoding: format tag " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits");

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frames = data_len / frame_bytes;
  AudioBuffer buf;
  buf.sample_rate = static_cast<int>(rate);
  buf.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame_bytes + c * bytes_per_sample;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16le(p)) / 32768.0;
      } else {
        float v = std::bit_cast<float>(read_u32le(p));
        acc += v;
      }
    }
    double v = acc / channels;
    if (!std::isfinite(v)) throw DecodeError("non-finite sample in WAV data");
    buf.samples[f] = v;
  }
  return buf;
}

inline AudioBuffer decode_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open audio file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav_bytes(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

/// Encodes mono 16-bit PCM. Samples are clipped to [-1, 1).
inline std::string encode_wav16(const AudioBuffer& buf) {
  std::string out;
  const auto n = static_cast<std::uint32_t>(buf.samples.size());
  out += "RIFF";
  detail::put_u32le(out, 36 + 2 * n);
  out += "WAVEfmt ";
  detail::put_u32le(out, 16);
  detail::put_u16le(out, 1);
  detail::put_u16le(out, 1);
  detail::put_u32le(out, static_cast<std::uint32_t>(buf.sample_rate));
  detail::put_u32le(out, static_cast<std::uint32_t>(buf.sample_rate) * 2);
  detail::put_u16le(out, 2);
  detail::put_u16le(out, 16);
  out += "data";
  detail::put_u32le(out, 2 * n);
  for (double s : buf.samples) {
    double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    detail::put_u16le(out, static_cast<std::uint16_t>(v));
  }
  return out;
}

inline void write_wav16(const std::filesystem::path& path, const AudioBuffer& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string bytes = encode_wav16(buf);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Resampling

struct ResamplerOptions {
  double rolloff = 0.95;  // passband edge as a fraction of the output Nyquist
  double zero_crossings = 32;
  double kaiser_beta = 8.6;
};

/// Band-limited downsampling with a Kaiser-windowed sinc kernel evaluated at
/// each output instant. Taps are renormalised per output sample so DC gain is
/// exactly one.
inline AudioBuffer resample(const AudioBuffer& in, int target_hz, const ResamplerOptions& opt = {}) {
  if (target_hz <= 0) throw ValidationError("target sample rate must be positive");
  if (in.sample_rate == target_hz) return in;
  if (target_hz > in.sample_rate)
    throw ValidationError("upsampling from " + std::to_string(in.sample_rate) + " Hz to " +
                          std::to_string(target_hz) + " Hz is not supported");

  const double ratio = static_cast<double>(target_hz) / in.sample_rate;
  const double cutoff = 0.5 * ratio * opt.rolloff;  // cycles per input sample
  const double half_width = opt.zero_crossings / (2.0 * cutoff);
  const double i0_beta = std::cyl_bessel_i(0.0, opt.kaiser_beta);
  const auto in_len = static_cast<long>(in.samples.size());
  const auto out_len = static_cast<long>(std::llround(in_len * ratio));

  AudioBuffer out;
  out.sample_rate = target_hz;
  out.samples.resize(static_cast<std::size_t>(out_len));
  for (long n = 0; n < out_len; ++n) {
    const double t = n / ratio;
    const long lo = std::max(0L, static_cast<long>(std::ceil(t - half_width)));
    const long hi = std::min(in_len - 1, static_cast<long>(std::floor(t + half_width)));
    double acc = 0.0, wsum = 0.0;
    for (long k = lo; k <= hi; ++k) {
      const double x = k - t;
      const double r = x / half_width;
      if (r <= -1.0 || r >= 1.0) continue;
      const double arg = 2.0 * cutoff * x;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double win = std::cyl_bessel_i(0.0, opt.kaiser_beta * std::sqrt(1.0 - r * r)) / i0_beta;
      const double h = sinc * win;
      acc += h * in.samples[static_cast<std::size_t>(k)];
      wsum += h;
    }
    out.samples[static_cast<std::size_t>(n)] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Voice activity detection

struct VadConfig {
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  double threshold_db = 40.0;  // frames more than this below the loudest frame are non-speech
  double floor_db = -120.0;    // frames at or below this absolute level are never speech
};

struct VadDecision {
  std::size_t frame_length = 0;
  std::size_t frame_hop = 0;
  std::vector<bool> keep_mask;
};

struct VadResult {
  AudioBuffer audio;
  VadDecision decision;
  bool all_rejected = false;
};

/// Per-frame mean-square energy in dB; frames are complete windows only.
inline std::vector<double> frame_energies_db(const AudioBuffer& buf, std::size_t len, std::size_t hop) {
  std::vector<double> out;
  if (buf.size() < len) return out;
  const std::size_t frames = (buf.size() - len) / hop + 1;
  out.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    double e = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double s = buf.samples[t * hop + i];
      e += s * s;
    }
    e /= static_cast<double>(len);
    out.push_back(e > 0.0 ? 10.0 * std::log10(e) : -std::numeric_limits<double>::infinity());
  }
  return out;
}

inline VadDecision vad_decide(const AudioBuffer& buf, const VadConfig& cfg = {}) {
  VadDecision d;
  d.frame_length = static_cast<std::size_t>(std::lround(cfg.frame_ms * buf.sample_rate / 1000.0));
  d.frame_hop = static_cast<std::size_t>(std::lround(cfg.hop_ms * buf.sample_rate / 1000.0));
  const auto energies = frame_energies_db(buf, d.frame_length, d.frame_hop);
  const double peak = energies.empty() ? 0.0 : *std::max_element(energies.begin(), energies.end());
  d.keep_mask.reserve(energies.size());
  for (double e : energies) d.keep_mask.push_back(e > peak - cfg.threshold_db && e > cfg.floor_db);
  return d;
}

/// Removes non-speech frames. Each input sample belongs to the frame whose hop
/// interval contains it (trailing samples belong to the last frame), so an
/// all-speech mask reproduces the input exactly. If every frame is rejected the
/// input is returned unchanged with `all_rejected` set.
inline VadResult apply_vad(const AudioBuffer& buf, const VadConfig& cfg = {}) {
  if (buf.empty()) throw ValidationError("apply_vad: empty audio buffer");
  VadResult res;
  res.decision = vad_decide(buf, cfg);
  const auto& mask = res.decision.keep_mask;
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    res.audio = buf;
    res.all_rejected = true;
    return res;
  }
  res.audio.sample_rate = buf.sample_rate;
  res.audio.samples.reserve(buf.size());
  const std::size_t hop = res.decision.frame_hop;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const std::size_t owner = std::min(i / hop, mask.size() - 1);
    if (mask[owner]) res.audio.samples.push_back(buf.samples[i]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Loudness and cropping

inline double rms(const AudioBuffer& buf) {
  if (buf.empty()) return 0.0;
  double acc = 0.0;
  for (double s : buf.samples) acc += s * s;
  return std::sqrt(acc / static_cast<double>(buf.size()));
}

inline double dbfs(const AudioBuffer& buf) { return 20.0 * std::log10(rms(buf)); }

/// Scales the buffer so its RMS level equals `target_dbfs` (full scale 1.0).
inline AudioBuffer normalize_dbfs(const AudioBuffer& buf, double target_dbfs = -30.0) {
  const double level = rms(buf);
  if (!(level > 0.0)) throw ValidationError("normalize_dbfs: cannot normalise a silent buffer");
  const double gain = std::pow(10.0, target_dbfs / 20.0) / level;
  AudioBuffer out = buf;
  for (double& s : out.samples) s *= gain;
  return out;
}

enum class CropMode { kRandom, kFull };

/// kRandom: exactly `seconds` long, uniform random start; inputs shorter than
/// that are tiled cyclically from their first sample. kFull: identity.
inline AudioBuffer crop(const AudioBuffer& buf, double seconds, std::uint64_t seed, CropMode mode) {
  if (buf.empty()) throw ValidationError("crop: empty audio buffer");
  if (mode == CropMode::kFull) return buf;
  const auto want = static_cast<std::size_t>(std::llround(seconds * buf.sample_rate));
  AudioBuffer out;
  out.sample_rate = buf.sample_rate;
  out.samples.resize(want);
  if (buf.size() >= want) {
    std::mt19937_64 rng(seed);
    const std::size_t max_start = buf.size() - want;
    const std::size_t start = max_start == 0 ? 0 : static_cast<std::size_t>(rng() % (max_start + 1));
    std::copy_n(buf.samples.begin() + static_cast<std::ptrdiff_t>(start), want, out.samples.begin());
  } else {
    for (std::size_t i = 0; i < want; ++i) out.samples[i] = buf.samples[i % buf.size()];
  }
  return out;
}

}  // namespace xvage

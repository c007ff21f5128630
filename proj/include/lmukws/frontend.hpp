#pragma once

// Audio ingestion and log-mel features: 16 kHz PCM16 mono WAV, 40 ms Hann
// windows every 20 ms, 1024-point FFT, HTK mel filterbank, natural log.

#include <openssl/evp.h>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lmukws/error.hpp"

namespace lmukws {

struct FeatureConfig {
  int sample_rate = 16000;
  double window_s = 0.040;
  double hop_s = 0.020;
  int mel_bins = 40;
  int fft_size = 1024;
  double fmin_hz = 20.0;
  double fmax_hz = 7600.0;
  double log_eps = 1e-6;

  int window_samples() const { return static_cast<int>(std::lround(window_s * sample_rate)); }
  int hop_samples() const { return static_cast<int>(std::lround(hop_s * sample_rate)); }

  void validate() const {
    detail::require(sample_rate > 0 && mel_bins > 0, "feature config: invalid rate or mel bins");
    const double w = window_s * sample_rate, h = hop_s * sample_rate;
    detail::require(std::fabs(w - std::round(w)) < 1e-9 && std::fabs(h - std::round(h)) < 1e-9,
                    "feature config: window and hop must be whole samples");
    detail::require(hop_samples() > 0 && hop_samples() <= window_samples(),
                    "feature config: hop must be in (0, window]");
    detail::require(fft_size >= window_samples() && (fft_size & (fft_size - 1)) == 0,
                    "feature config: fft_size must be a power of two >= window");
    detail::require(fmin_hz >= 0.0 && fmax_hz > fmin_hz && fmax_hz <= sample_rate / 2.0,
                    "feature config: invalid mel frequency range");
    detail::require(log_eps > 0.0, "feature config: log floor must be positive");
  }

  /// Canonical text used for the config hash.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "sample_rate=" << sample_rate << ";window_s=" << window_s << ";hop_s=" << hop_s
       << ";mel_bins=" << mel_bins << ";fft_size=" << fft_size << ";fmin_hz=" << fmin_hz
       << ";fmax_hz=" << fmax_hz << ";log_eps=" << log_eps << ";window=hann;mel=htk;log=ln";
    return os.str();
  }
};

using Sha256 = std::array<std::uint8_t, 32>;

inline Sha256 sha256(std::span<const std::uint8_t> data) {
  Sha256 out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  return out;
}

inline Sha256 sha256(const std::string& s) {
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (auto b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xF]);
  }
  return out;
}

inline Sha256 config_hash(const FeatureConfig& cfg) { return sha256(cfg.canonical()); }

// ---- WAV ---------------------------------------------------------------

namespace detail {

inline std::uint32_t le32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}
inline std::uint16_t le16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

}  // namespace detail

/// Decode a RIFF/WAVE PCM16 mono buffer at `expected_rate`. Samples are
/// scaled by 1/32768.
inline std::vector<double> decode_wav(std::span<const std::uint8_t> b, int expected_rate = 16000) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
      std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw DataError("not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::vector<double> samples;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = detail::le32(b.data() + pos + 4);
    const std::uint8_t* body = b.data() + pos + 8;
    const std::size_t avail = b.size() - pos - 8;
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) throw DataError("truncated fmt chunk");
      const auto format = detail::le16(body);
      const auto channels = detail::le16(body + 2);
      const auto rate = detail::le32(body + 4);
      const auto bits = detail::le16(body + 14);
      if (format != 1 || bits != 16) throw DataError("unsupported WAV encoding (need PCM16)");
      if (channels != 1) throw DataError("unsupported WAV channel count (need mono)");
      if (static_cast<int>(rate) != expected_rate) {
        throw DataError("unsupported sample rate " + std::to_string(rate) + " (need " +
                        std::to_string(expected_rate) + ")");
      }
      have_fmt = true;
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw DataError("WAV data chunk before fmt chunk");
      const std::size_t n = std::min<std::size_t>(size, avail) / 2;
      samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = static_cast<std::int16_t>(detail::le16(body + 2 * i));
        samples[i] = static_cast<double>(v) / 32768.0;
      }
      return samples;
    }
    pos += 8 + size + (size & 1);
  }
  throw DataError(have_fmt ? "WAV file has no data chunk" : "WAV file has no fmt chunk");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::vector<double> load_wav(const std::string& path, int expected_rate = 16000) {
  try {
    return decode_wav(read_file_bytes(path), expected_rate);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// PCM16 mono writer; samples are clipped to [-1, 1) and rounded.
inline std::vector<std::uint8_t> encode_wav(std::span<const double> samples, int rate = 16000) {
  std::vector<std::uint8_t> out;
  auto put32 = [&out](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto put16 = [&out](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  auto tag = [&out](const char* t) { out.insert(out.end(), t, t + 4); };
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  tag("RIFF");
  put32(36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  put32(16);
  put16(1);
  put16(1);
  put32(static_cast<std::uint32_t>(rate));
  put32(static_cast<std::uint32_t>(rate * 2));
  put16(2);
  put16(16);
  tag("data");
  put32(data_bytes);
  for (double s : samples) {
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
  }
  return out;
}

inline void write_wav(const std::string& path, std::span<const double> samples, int rate = 16000) {
  const auto bytes = encode_wav(samples, rate);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- spectral features ---------------------------------------------------

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Stateless pieces of the log-mel computation, built once per config.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(const FeatureConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int w = cfg_.window_samples();
    window_.resize(static_cast<std::size_t>(w));
    for (int i = 0; i < w; ++i) window_[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / w);
    build_filterbank();
    fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  }

  const FeatureConfig& config() const { return cfg_; }
  int num_spectrum_bins() const { return cfg_.fft_size / 2 + 1; }

  /// Center frequency (Hz) of each mel filter.
  const std::vector<double>& centers_hz() const { return centers_hz_; }

  /// One-sided power spectrum of the Hann-windowed frame, scaled so that
  /// its sum equals the windowed frame's energy.
  std::vector<double> power_spectrum(std::span<const double> frame) const {
    detail::require_shape(frame.size() == window_.size(), "log_mel_frame: wrong window length");
    std::vector<double> padded(static_cast<std::size_t>(cfg_.fft_size), 0.0);
    for (std::size_t i = 0; i < frame.size(); ++i) padded[i] = frame[i] * window_[i];
    std::vector<std::complex<double>> spec;
    fft_.fwd(spec, padded);
    const int half = cfg_.fft_size / 2;
    std::vector<double> power(static_cast<std::size_t>(half + 1));
    const double n = cfg_.fft_size;
    for (int k = 0; k <= half; ++k) {
      const double p = std::norm(spec[static_cast<std::size_t>(k)]) / n;
      power[static_cast<std::size_t>(k)] = (k == 0 || k == half) ? p : 2.0 * p;
    }
    return power;
  }

  std::vector<double> log_mel(std::span<const double> frame) const {
    const auto power = power_spectrum(frame);
    std::vector<double> out(static_cast<std::size_t>(cfg_.mel_bins));
    for (int m = 0; m < cfg_.mel_bins; ++m) {
      double e = 0.0;
      for (const auto& [k, w] : filters_[static_cast<std::size_t>(m)]) e += w * power[k];
      out[static_cast<std::size_t>(m)] = std::log(e + cfg_.log_eps);
    }
    return out;
  }

 private:
  void build_filterbank() {
    const int bins = cfg_.mel_bins;
    const double lo = hz_to_mel(cfg_.fmin_hz), hi = hz_to_mel(cfg_.fmax_hz);
    std::vector<double> edges(static_cast<std::size_t>(bins + 2));
    for (int i = 0; i < bins + 2; ++i) edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (bins + 1);
    filters_.assign(static_cast<std::size_t>(bins), {});
    centers_hz_.resize(static_cast<std::size_t>(bins));
    for (int m = 0; m < bins; ++m) {
      centers_hz_[static_cast<std::size_t>(m)] = mel_to_hz(edges[static_cast<std::size_t>(m + 1)]);
    }
    for (int k = 1; k < num_spectrum_bins(); ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * cfg_.sample_rate / cfg_.fft_size);
      for (int m = 0; m < bins; ++m) {
        const double l = edges[static_cast<std::size_t>(m)], c = edges[static_cast<std::size_t>(m + 1)],
                     r = edges[static_cast<std::size_t>(m + 2)];
        double w = 0.0;
        if (mel > l && mel <= c) w = (mel - l) / (c - l);
        else if (mel > c && mel < r) w = (r - mel) / (r - c);
        if (w > 0.0) filters_[static_cast<std::size_t>(m)].push_back({static_cast<std::size_t>(k), w});
      }
    }
  }

  FeatureConfig cfg_;
  std::vector<double> window_;
  std::vector<std::vector<std::pair<std::size_t, double>>> filters_;
  std::vector<double> centers_hz_;
  mutable Eigen::FFT<double> fft_;  // caches twiddles; one owner at a time
};

inline std::vector<double> log_mel_frame(std::span<const double> window, const FeatureConfig& cfg) {
  return LogMelExtractor(cfg).log_mel(window);
}

/// Push-based streaming featurizer: emits one frame per hop once a full
/// window has been seen. Output equals offline framing of the same signal.
class StreamFeaturizer {
 public:
  explicit StreamFeaturizer(const FeatureConfig& cfg)
      : extractor_(cfg),
        ring_(static_cast<std::size_t>(cfg.window_samples()), 0.0),
        hop_(cfg.hop_samples()) {}

  /// Feed samples; returns the frames completed by this chunk.
  std::vector<std::vector<double>> push(std::span<const double> samples) {
    std::vector<std::vector<double>> frames;
    const auto w = ring_.size();
    for (double s : samples) {
      ring_[head_] = s;
      head_ = (head_ + 1) % w;
      ++seen_;
      if (seen_ >= w && (seen_ - w) % static_cast<std::size_t>(hop_) == 0) {
        linear_.resize(w);
        for (std::size_t i = 0; i < w; ++i) linear_[i] = ring_[(head_ + i) % w];
        frames.push_back(extractor_.log_mel(linear_));
      }
    }
    return frames;
  }

  void reset() {
    std::fill(ring_.begin(), ring_.end(), 0.0);
    head_ = 0;
    seen_ = 0;
  }

  const FeatureConfig& config() const { return extractor_.config(); }

 private:
  LogMelExtractor extractor_;
  std::vector<double> ring_;
  std::vector<double> linear_;
  int hop_;
  std::size_t head_ = 0;
  std::size_t seen_ = 0;
};

/// Offline framing of an arbitrary-length signal: frames x mel_bins.
inline Eigen::MatrixXd featurize_signal(std::span<const double> samples, const LogMelExtractor& ex) {
  const auto& cfg = ex.config();
  const auto w = static_cast<std::size_t>(cfg.window_samples());
  const auto h = static_cast<std::size_t>(cfg.hop_samples());
  const std::size_t frames = samples.size() < w ? 0 : (samples.size() - w) / h + 1;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(frames), cfg.mel_bins);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto v = ex.log_mel(samples.subspan(t * h, w));
    for (int m = 0; m < cfg.mel_bins; ++m) out(static_cast<Eigen::Index>(t), m) = v[static_cast<std::size_t>(m)];
  }
  return out;
}

/// Features of exactly one second of audio (49 frames at the defaults).
inline Eigen::MatrixXd featurize_utterance(std::span<const double> pcm, const LogMelExtractor& ex) {
  detail::require_shape(pcm.size() == static_cast<std::size_t>(ex.config().sample_rate),
                        "featurize_utterance: need exactly one second of samples");
  return featurize_signal(pcm, ex);
}

/// Pad at the front or crop at the front to exactly `length` samples, so
/// the end of the clip is kept.
inline std::vector<double> fit_length(std::span<const double> pcm, std::size_t length) {
  std::vector<double> out(length, 0.0);
  if (pcm.size() >= length) {
    std::copy(pcm.end() - static_cast<std::ptrdiff_t>(length), pcm.end(), out.begin());
  } else {
    std::copy(pcm.begin(), pcm.end(), out.end() - static_cast<std::ptrdiff_t>(pcm.size()));
  }
  return out;
}

/// Per-bin normalization (x - mean) * inv_std.
struct FeatureNormalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd inv_std;

  bool empty() const { return mean.size() == 0; }

  void apply(Eigen::MatrixXd& features) const {
    if (empty()) return;
    detail::require_shape(features.cols() == mean.size(), "normalizer width mismatch");
    for (Eigen::Index t = 0; t < features.rows(); ++t)
      for (Eigen::Index j = 0; j < features.cols(); ++j)
        features(t, j) = (features(t, j) - mean(j)) * inv_std(j);
  }

  void apply(std::vector<double>& frame) const {
    if (empty()) return;
    for (std::size_t j = 0; j < frame.size(); ++j)
      frame[j] = (frame[j] - mean(static_cast<Eigen::Index>(j))) * inv_std(static_cast<Eigen::Index>(j));
  }
};

}  // namespace lmukws

#include <gtest/gtest.h>

#include <complex>
#include <filesystem>

#include "lmukws/frontend.hpp"
#include "lmukws/rng.hpp"

using namespace lmukws;

namespace {

std::vector<double> tone(double hz, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2 * M_PI * hz * i / 16000.0);
  return x;
}

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform(-0.5, 0.5);
  return x;
}

}  // namespace

TEST(Wav, RoundTripSixteenSamples) {
  std::vector<double> x;
  for (int i = 0; i < 16; ++i) x.push_back((i - 8) / 16.0);
  const auto back = decode_wav(encode_wav(x));
  EXPECT_EQ(back, x);
}

TEST(Wav, NormalizedByFullScale) {
  const auto back = decode_wav(encode_wav(std::vector<double>{-1.0, 0.999969482421875}));
  EXPECT_EQ(back[0], -1.0);
  EXPECT_EQ(back[1], 32767.0 / 32768.0);
}

TEST(Wav, AllZero) {
  const auto back = decode_wav(encode_wav(std::vector<double>(100, 0.0)));
  EXPECT_EQ(back, std::vector<double>(100, 0.0));
}

TEST(Wav, WrongRateRejected) {
  const auto bytes = encode_wav(std::vector<double>(10, 0.1), 8000);
  EXPECT_THROW(decode_wav(bytes), DataError);
}

TEST(Wav, WrongChannelsOrEncodingRejected) {
  auto bytes = encode_wav(std::vector<double>(10, 0.1));
  auto stereo = bytes;
  stereo[22] = 2;  // channel count
  EXPECT_THROW(decode_wav(stereo), DataError);
  auto floaty = bytes;
  floaty[20] = 3;  // format tag
  EXPECT_THROW(decode_wav(floaty), DataError);
  EXPECT_THROW(decode_wav(std::vector<std::uint8_t>{'R', 'I', 'F', 'F'}), DataError);
}

TEST(Wav, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "lmukws_fe.wav").string();
  const std::vector<double> x{0.25, -0.5, 0.0};
  write_wav(path, x);
  EXPECT_EQ(load_wav(path), x);
  std::filesystem::remove(path);
  EXPECT_THROW(load_wav(path), DataError);
}

TEST(LogMel, ZeroInputIsLogFloor) {
  const FeatureConfig cfg;
  const auto v = log_mel_frame(std::vector<double>(640, 0.0), cfg);
  ASSERT_EQ(v.size(), 40u);
  for (double x : v) EXPECT_EQ(x, std::log(cfg.log_eps));
}

TEST(LogMel, ToneLandsInNearestFilter) {
  const FeatureConfig cfg;
  const LogMelExtractor ex(cfg);
  for (double hz : {300.0, 1000.0, 3000.0}) {
    const auto v = ex.log_mel(tone(hz, 640));
    const auto arg = std::max_element(v.begin(), v.end()) - v.begin();
    const auto& c = ex.centers_hz();
    std::size_t nearest = 0;
    for (std::size_t m = 1; m < c.size(); ++m)
      if (std::fabs(c[m] - hz) < std::fabs(c[nearest] - hz)) nearest = m;
    EXPECT_LE(std::abs(static_cast<long>(arg) - static_cast<long>(nearest)), 0) << hz;
  }
}

TEST(LogMel, PowerSpectrumMatchesDirectDft) {
  const FeatureConfig cfg;
  const LogMelExtractor ex(cfg);
  const auto x = noise(640, 4);
  const auto p = ex.power_spectrum(x);
  std::vector<double> w(640);
  for (int i = 0; i < 640; ++i) w[i] = x[i] * (0.5 - 0.5 * std::cos(2 * M_PI * i / 640));
  for (int k : {0, 1, 37, 200, 511, 512}) {
    std::complex<double> acc = 0;
    for (int n = 0; n < 640; ++n) acc += w[n] * std::polar(1.0, -2 * M_PI * k * n / 1024.0);
    const double ref = std::norm(acc) / 1024.0 * ((k == 0 || k == 512) ? 1 : 2);
    EXPECT_NEAR(p[k], ref, 1e-9 * std::max(1.0, ref)) << k;
  }
}

TEST(LogMel, Parseval) {
  const LogMelExtractor ex(FeatureConfig{});
  const auto x = noise(640, 8);
  const auto p = ex.power_spectrum(x);
  double energy = 0;
  for (int i = 0; i < 640; ++i) {
    const double v = x[i] * (0.5 - 0.5 * std::cos(2 * M_PI * i / 640));
    energy += v * v;
  }
  double sum = 0;
  for (double v : p) sum += v;
  EXPECT_NEAR(sum / energy, 1.0, 1e-6);
}

TEST(LogMel, WrongWindowLength) {
  const LogMelExtractor ex(FeatureConfig{});
  EXPECT_THROW(ex.log_mel(std::vector<double>(639, 0.0)), StructuralError);
}

TEST(Featurize, FortyNineFramesPerSecond) {
  const LogMelExtractor ex(FeatureConfig{});
  const auto f = featurize_utterance(noise(16000, 1), ex);
  EXPECT_EQ(f.rows(), 49);
  EXPECT_EQ(f.cols(), 40);
  EXPECT_THROW(featurize_utterance(noise(15999, 1), ex), StructuralError);
}

TEST(Featurize, SilenceIsFlatAtFloor) {
  const FeatureConfig cfg;
  const LogMelExtractor ex(cfg);
  const auto f = featurize_utterance(std::vector<double>(16000, 0.0), ex);
  EXPECT_LT((f.array() - std::log(cfg.log_eps)).abs().maxCoeff(), 1e-9);
}

TEST(Featurize, StreamingEqualsOfflineForAnyChunking) {
  const FeatureConfig cfg;
  const LogMelExtractor ex(cfg);
  const auto x = noise(16000, 3);
  const auto offline = featurize_utterance(x, ex);
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    StreamFeaturizer sf(cfg);
    std::vector<std::vector<double>> frames;
    std::size_t pos = 0;
    while (pos < x.size()) {
      const std::size_t n = std::min<std::size_t>(x.size() - pos, 1 + rng.below(trial % 2 ? 50 : 2000));
      for (auto& fr : sf.push(std::span(x).subspan(pos, n))) frames.push_back(fr);
      pos += n;
    }
    ASSERT_EQ(frames.size(), 49u);
    for (std::size_t t = 0; t < 49; ++t)
      for (int m = 0; m < 40; ++m) ASSERT_EQ(frames[t][m], offline(static_cast<Eigen::Index>(t), m));
  }
}

TEST(Featurize, FitLengthPadsAtFront) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_EQ(fit_length(x, 5), (std::vector<double>{0, 0, 1, 2, 3}));
  EXPECT_EQ(fit_length(x, 2), (std::vector<double>{2, 3}));
}

TEST(FeatureConfigTest, ValidationAndHash) {
  FeatureConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.window_samples(), 640);
  EXPECT_EQ(cfg.hop_samples(), 320);
  const auto h1 = config_hash(cfg);
  EXPECT_EQ(h1, config_hash(FeatureConfig{}));
  cfg.mel_bins = 32;
  EXPECT_NE(h1, config_hash(cfg));
  cfg.fft_size = 512;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  FeatureConfig odd;
  odd.window_s = 0.04003;
  EXPECT_THROW(odd.validate(), ArgumentError);
}

TEST(Sha256Test, KnownVector) {
  EXPECT_EQ(to_hex(sha256(std::string("abc"))),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#pragma once

// SpeechCommands-style dataset handling: hash-based speaker splits, the
// 12-label manifest (keywords + silence + unknown), clip loading and a
// synthetic corpus generator that writes the same directory layout.

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lmukws/frontend.hpp"
#include "lmukws/lmu.hpp"
#include "lmukws/rng.hpp"

namespace lmukws {

enum class Split { kTrain, kValidation, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val" || s == "validation") return Split::kValidation;
  if (s == "test") return Split::kTest;
  throw ArgumentError("unknown split '" + s + "'");
}

inline constexpr std::uint32_t kMaxWavsPerClass = (1u << 27) - 1;

/// Speaker part of a SpeechCommands file name ("<speaker>_nohash_<n>.wav").
inline std::string speaker_id(const std::string& filename) {
  const std::string base = std::filesystem::path(filename).filename().string();
  const auto pos = base.find("_nohash_");
  if (pos == std::string::npos || pos == 0) {
    throw DataError("cannot assign split: no speaker id in '" + filename + "'");
  }
  return base.substr(0, pos);
}

/// Stable split assignment: SHA-1 of the speaker id, bucketed into
/// percentages, so every clip of a speaker lands in the same split.
inline Split which_set(const std::string& filename, double val_pct = 10.0, double test_pct = 10.0) {
  const std::string id = speaker_id(filename);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(id.data(), id.size(), digest, &len, EVP_sha1(), nullptr) != 1 || len != 20) {
    throw std::runtime_error("SHA-1 computation failed");
  }
  // int(hex, 16) % 2^27 only depends on the low 27 bits of the digest.
  const std::uint32_t low = std::uint32_t{digest[16]} << 24 | std::uint32_t{digest[17]} << 16 |
                            std::uint32_t{digest[18]} << 8 | std::uint32_t{digest[19]};
  const double pct =
      static_cast<double>(low & kMaxWavsPerClass) * (100.0 / static_cast<double>(kMaxWavsPerClass));
  if (pct < val_pct) return Split::kValidation;
  if (pct < val_pct + test_pct) return Split::kTest;
  return Split::kTrain;
}

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int label = 0;
  Split split = Split::kTrain;
  std::int64_t offset = -1;  // crop start in samples (silence crops only)
  double gain = 1.0;
};

using Manifest = std::vector<ManifestEntry>;

inline void write_manifest(const Manifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write manifest " + path);
  f << "path\tlabel\tsplit\toffset\tgain\n";
  for (const auto& e : m) {
    char gain[32];
    std::snprintf(gain, sizeof gain, "%.6f", e.gain);
    f << e.path << '\t' << e.label << '\t' << split_name(e.split) << '\t' << e.offset << '\t'
      << gain << '\n';
  }
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path);
  Manifest m;
  std::string line;
  std::getline(f, line);
  if (line.rfind("path\t", 0) != 0) throw DataError("manifest has no header: " + path);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    ManifestEntry e;
    std::string label, split, offset, gain;
    if (!std::getline(is, e.path, '\t') || !std::getline(is, label, '\t') ||
        !std::getline(is, split, '\t') || !std::getline(is, offset, '\t') ||
        !std::getline(is, gain)) {
      throw DataError("malformed manifest line: " + line);
    }
    try {
      e.label = std::stoi(label);
      e.split = parse_split(split);
      e.offset = std::stoll(offset);
      e.gain = std::stod(gain);
    } catch (const std::exception&) {
      throw DataError("malformed manifest line: " + line);
    }
    if (e.label < 0 || e.label >= kNumLabels) throw DataError("manifest label out of range");
    m.push_back(std::move(e));
  }
  return m;
}

struct DatasetOptions {
  std::vector<std::string> keywords = standard_keywords();
  double silence_pct = 10.0;
  double unknown_pct = 10.0;
  double val_pct = 10.0;
  double test_pct = 10.0;
  double silence_max_gain = 1.0;
  std::uint64_t seed = 59185;
};

/// Label index of a keyword: its position in the standard ten when it is
/// one of them, otherwise its position in the keyword list.
inline int keyword_label(const std::vector<std::string>& keywords, const std::string& word) {
  const auto& std_words = standard_keywords();
  const bool all_standard = std::all_of(keywords.begin(), keywords.end(), [&](const auto& k) {
    return std::find(std_words.begin(), std_words.end(), k) != std_words.end();
  });
  const auto& ref = all_standard ? std_words : keywords;
  const auto it = std::find(ref.begin(), ref.end(), word);
  return it == ref.end() ? -1 : static_cast<int>(it - ref.begin());
}

inline std::vector<std::string> label_names_for(const std::vector<std::string>& keywords) {
  const auto& std_words = standard_keywords();
  const bool all_standard = std::all_of(keywords.begin(), keywords.end(), [&](const auto& k) {
    return std::find(std_words.begin(), std_words.end(), k) != std_words.end();
  });
  if (all_standard) return standard_labels();
  std::vector<std::string> names = keywords;
  while (names.size() < 10) names.push_back("_unused" + std::to_string(names.size()) + "_");
  names.push_back("_silence_");
  names.push_back("_unknown_");
  return names;
}

inline constexpr const char* kBackgroundDir = "_background_noise_";

/// Scan a SpeechCommands-layout directory into a labeled manifest.
inline Manifest build_dataset(const std::string& root, const DatasetOptions& opt) {
  namespace fs = std::filesystem;
  detail::require(!opt.keywords.empty() && opt.keywords.size() <= 10,
                  "build_dataset: need 1..10 keywords");
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root);
  std::vector<std::string> words;
  for (const auto& d : fs::directory_iterator(root)) {
    if (!d.is_directory()) continue;
    const auto name = d.path().filename().string();
    if (!name.empty() && name[0] != '_' && name[0] != '.') words.push_back(name);
  }
  std::sort(words.begin(), words.end());
  for (const auto& k : opt.keywords) {
    if (std::find(words.begin(), words.end(), k) == words.end()) {
      throw DataError("keyword folder missing: " + (fs::path(root) / k).string());
    }
  }

  Manifest keyword_items;
  std::map<Split, Manifest> unknown_pool;
  for (const auto& w : words) {
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(fs::path(root) / w)) {
      if (f.is_regular_file() && f.path().extension() == ".wav") files.push_back(f.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    const int label = keyword_label(opt.keywords, w);
    const bool is_keyword =
        std::find(opt.keywords.begin(), opt.keywords.end(), w) != opt.keywords.end();
    for (const auto& f : files) {
      ManifestEntry e;
      e.path = w + "/" + f;
      e.split = which_set(f, opt.val_pct, opt.test_pct);
      if (is_keyword) {
        e.label = label;
        keyword_items.push_back(e);
      } else {
        e.label = kUnknownLabel;
        unknown_pool[e.split].push_back(e);
      }
    }
  }

  std::vector<std::string> noise_files;
  if (opt.silence_pct > 0.0) {
    const auto bg = fs::path(root) / kBackgroundDir;
    if (!fs::is_directory(bg)) throw DataError("background noise folder missing: " + bg.string());
    for (const auto& f : fs::directory_iterator(bg)) {
      if (f.is_regular_file() && f.path().extension() == ".wav") noise_files.push_back(f.path().filename().string());
    }
    std::sort(noise_files.begin(), noise_files.end());
    if (noise_files.empty()) throw DataError("no background noise files in " + bg.string());
  }
  std::vector<std::size_t> noise_lengths;
  for (const auto& f : noise_files) {
    noise_lengths.push_back(load_wav((fs::path(root) / kBackgroundDir / f).string()).size());
  }

  Manifest out;
  Rng rng(opt.seed);
  for (Split split : {Split::kTrain, Split::kValidation, Split::kTest}) {
    std::size_t count = 0;
    for (const auto& e : keyword_items) {
      if (e.split == split) {
        out.push_back(e);
        ++count;
      }
    }
    const auto silence_n = static_cast<std::size_t>(std::ceil(count * opt.silence_pct / 100.0));
    for (std::size_t i = 0; i < silence_n && !noise_files.empty(); ++i) {
      const auto which = rng.below(noise_files.size());
      const auto len = noise_lengths[which];
      if (len < 16000) throw DataError("background noise file shorter than one second");
      ManifestEntry e;
      e.path = std::string(kBackgroundDir) + "/" + noise_files[which];
      e.label = kSilenceLabel;
      e.split = split;
      e.offset = static_cast<std::int64_t>(rng.below(len - 16000 + 1));
      e.gain = rng.uniform() * opt.silence_max_gain;
      out.push_back(e);
    }
    auto& pool = unknown_pool[split];
    rng.shuffle(pool);
    const auto unknown_n = std::min(
        pool.size(), static_cast<std::size_t>(std::ceil(count * opt.unknown_pct / 100.0)));
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(unknown_n));
  }
  return out;
}

/// One second of audio for a manifest entry (front zero-padding for short
/// clips, gain-scaled crop for silence).
inline std::vector<double> load_clip(const std::string& root, const ManifestEntry& e,
                                     int sample_rate = 16000) {
  const auto path = (std::filesystem::path(root) / e.path).string();
  auto pcm = load_wav(path, sample_rate);
  if (e.offset >= 0) {
    const auto start = static_cast<std::size_t>(e.offset);
    if (start + static_cast<std::size_t>(sample_rate) > pcm.size()) {
      throw DataError("silence crop outside " + path);
    }
    std::vector<double> crop(pcm.begin() + static_cast<std::ptrdiff_t>(start),
                             pcm.begin() + static_cast<std::ptrdiff_t>(start + sample_rate));
    for (auto& s : crop) s *= e.gain;
    return crop;
  }
  return fit_length(pcm, static_cast<std::size_t>(sample_rate));
}

// ---- synthetic corpus ------------------------------------------------------

struct SyntheticOptions {
  std::vector<std::string> keywords = {"yes", "no"};
  std::vector<std::string> other_words = {"bed", "cat", "house", "tree"};
  int keyword_clips = 500;  // per keyword
  int other_clips = 120;    // per non-keyword word
  int max_takes = 3;        // clips per speaker are 1..max_takes
  int noise_files = 3;
  double noise_seconds = 20.0;
  std::uint64_t seed = 1234;
};

namespace detail {

struct Segment {
  double f1, f2, duration;
  bool voiced;
};

// Word "pronunciation": a fixed sequence of formant segments derived from
// the word text, so every run produces the same template.
inline std::vector<Segment> word_template(const std::string& word) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : word) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  Rng rng(h);
  const int n = 2 + static_cast<int>(rng.below(2));
  std::vector<Segment> segs;
  for (int i = 0; i < n; ++i) {
    Segment s;
    s.voiced = i == 0 ? rng.uniform() < 0.8 : rng.uniform() < 0.85;
    s.f1 = rng.uniform(280.0, 850.0);
    s.f2 = rng.uniform(850.0, 2600.0);
    s.duration = rng.uniform(0.09, 0.22);
    segs.push_back(s);
  }
  return segs;
}

inline std::vector<double> synthesize_word(const std::string& word, double f0, double formant_scale,
                                           double speed, Rng& rng, int rate) {
  const auto segs = word_template(word);
  std::vector<double> out;
  double phase = 0.0;
  for (const auto& s : segs) {
    const auto n = static_cast<std::size_t>(s.duration / speed * rate);
    const double f1 = s.f1 * formant_scale, f2 = s.f2 * formant_scale;
    double prev = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(n);
      const double env = std::sin(M_PI * t);
      double v = 0.0;
      if (s.voiced) {
        phase += 2.0 * M_PI * f0 * (1.0 + 0.05 * (t - 0.5)) / rate;
        for (int k = 1; f0 * k < 4000.0; ++k) {
          const double fk = f0 * k;
          const double a = std::exp(-std::pow((fk - f1) / 120.0, 2.0)) +
                           0.7 * std::exp(-std::pow((fk - f2) / 160.0, 2.0));
          v += a * std::sin(k * phase);
        }
        v *= 0.35;
      } else {
        const double white = rng.normal();
        v = 0.25 * (white - 0.85 * prev);  // tilted toward high frequencies
        prev = white;
      }
      out.push_back(env * v);
    }
  }
  return out;
}

inline std::vector<double> colored_noise(std::size_t n, double tilt, Rng& rng) {
  std::vector<double> out(n);
  double state = 0.0;
  for (auto& s : out) {
    state = tilt * state + (1.0 - tilt) * rng.normal();
    s = state;
  }
  double peak = 0.0;
  for (double s : out) peak = std::max(peak, std::fabs(s));
  for (auto& s : out) s *= 0.3 / std::max(peak, 1e-12);
  return out;
}

inline std::string hex8(std::uint64_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(v & 0xffffffffu));
  return buf;
}

}  // namespace detail

/// Write a synthetic corpus in the SpeechCommands layout under `root`:
/// <word>/<speaker>_nohash_<k>.wav plus _background_noise_/*.wav.
inline void generate_synthetic_corpus(const std::string& root, const SyntheticOptions& opt,
                                      int rate = 16000) {
  namespace fs = std::filesystem;
  Rng rng(opt.seed);
  fs::create_directories(fs::path(root) / kBackgroundDir);
  for (int i = 0; i < opt.noise_files; ++i) {
    const double tilt = 0.2 + 0.35 * i;
    auto noise = detail::colored_noise(static_cast<std::size_t>(opt.noise_seconds * rate), tilt, rng);
    write_wav((fs::path(root) / kBackgroundDir / ("noise_" + std::to_string(i) + ".wav")).string(), noise, rate);
  }
  auto emit_word = [&](const std::string& word, int clips) {
    fs::create_directories(fs::path(root) / word);
    int written = 0;
    while (written < clips) {
      const std::string speaker = detail::hex8(rng.next_u64());
      const double f0 = rng.uniform(95.0, 240.0);
      const double fscale = rng.uniform(0.9, 1.12);
      const double speed = rng.uniform(0.85, 1.15);
      const int takes = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_takes)));
      for (int k = 0; k < takes && written < clips; ++k, ++written) {
        auto voice = detail::synthesize_word(word, f0 * rng.uniform(0.97, 1.03), fscale,
                                             speed * rng.uniform(0.95, 1.05), rng, rate);
        std::vector<double> clip(static_cast<std::size_t>(rate), 0.0);
        const double gain = rng.uniform(0.25, 0.8);
        const std::size_t room = clip.size() > voice.size() ? clip.size() - voice.size() : 0;
        const auto start = static_cast<std::size_t>(rng.below(room + 1));
        for (std::size_t i = 0; i < voice.size() && start + i < clip.size(); ++i) {
          clip[start + i] = gain * voice[i];
        }
        const double noise_level = rng.uniform(0.002, 0.02);
        for (auto& s : clip) s += noise_level * rng.normal();
        const auto name = speaker + "_nohash_" + std::to_string(k) + ".wav";
        write_wav((fs::path(root) / word / name).string(), clip, rate);
      }
    }
  };
  for (const auto& w : opt.keywords) emit_word(w, opt.keyword_clips);
  for (const auto& w : opt.other_words) emit_word(w, opt.other_clips);
}

/// Features (raw log-mel, un-normalized) and labels for a manifest.
struct FeatureSet {
  std::vector<Eigen::MatrixXd> features;
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return labels.size(); }
};

inline FeatureSet featurize_manifest(const std::string& root, const Manifest& manifest,
                                     const FeatureConfig& cfg) {
  LogMelExtractor ex(cfg);
  FeatureSet fs;
  for (const auto& e : manifest) {
    const auto pcm = load_clip(root, e, cfg.sample_rate);
    fs.features.push_back(featurize_utterance(pcm, ex));
    fs.labels.push_back(e.label);
    fs.splits.push_back(e.split);
  }
  return fs;
}

}  // namespace lmukws

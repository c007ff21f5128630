// lmukws: data fetching, training, evaluation, streaming detection and
// size / hardware reports for LMU keyword-spotting models.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime error.

#include <curl/curl.h>
#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lmukws/lmukws.hpp"

namespace fs = std::filesystem;
using namespace lmukws;

namespace {

constexpr const char* kDefaultUrl =
    "http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz";
constexpr const char* kFetchMarker = ".lmukws_fetched";

struct Globals {
  std::uint64_t seed = 1;
  std::string out_dir = "lmukws_out";
};

void log_line(const std::string& msg) { std::cerr << "lmukws: " << msg << '\n'; }

std::string out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / name).string();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

std::string file_sha256(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  Sha256 out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), out.data(), &len);
  return to_hex(out);
}

std::size_t write_to_file(void* data, std::size_t size, std::size_t n, void* stream) {
  return std::fwrite(data, size, n, static_cast<std::FILE*>(stream));
}

void download(const std::string& url, const std::string& dest) {
  std::FILE* f = std::fopen(dest.c_str(), "wb");
  if (!f) throw DataError("cannot write " + dest);
  CURL* curl = curl_easy_init();
  if (!curl) {
    std::fclose(f);
    throw std::runtime_error("curl init failed");
  }
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, write_to_file);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, f);
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  const CURLcode rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  std::fclose(f);
  if (rc != CURLE_OK) {
    fs::remove(dest);
    throw DataError("download failed: " + url + ": " + curl_easy_strerror(rc));
  }
}

std::optional<std::string> read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) return std::nullopt;
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << text;
}

// ---- fetch-data ------------------------------------------------------------

struct FetchOpts {
  std::string root;
  std::string url = kDefaultUrl;
  std::string sha256;
  std::string archive;
  bool synthetic = false;
  bool toy = false;
  std::string keywords = "yes,no";
  std::string unknown_words = "bed,cat,house,tree";
  int synthetic_keyword_clips = 500;
  int synthetic_other_clips = 120;
};

int cmd_fetch(const FetchOpts& o, const Globals& g) {
  std::string request = o.synthetic ? "synthetic seed=" + std::to_string(g.seed) + " clips=" +
                                          std::to_string(o.synthetic_keyword_clips) + "/" +
                                          std::to_string(o.synthetic_other_clips)
                                    : "archive sha256=" + o.sha256;
  if (o.toy) request += " subset=" + o.keywords + ";" + o.unknown_words;
  const auto marker = (fs::path(o.root) / kFetchMarker).string();
  if (const auto prev = read_text(marker); prev && prev->rfind(request, 0) == 0) {
    log_line("dataset already present in " + o.root);
    return 0;
  }
  fs::create_directories(o.root);

  if (o.synthetic) {
    SyntheticOptions so;
    so.seed = g.seed;
    so.keyword_clips = o.synthetic_keyword_clips;
    so.other_clips = o.synthetic_other_clips;
    if (o.toy) {
      so.keywords = split_list(o.keywords);
      so.other_words = split_list(o.unknown_words);
    }
    log_line("generating synthetic corpus in " + o.root);
    generate_synthetic_corpus(o.root, so);
    write_text(marker, request + "\n");
    return 0;
  }

  std::string archive = o.archive;
  bool downloaded = false;
  if (archive.empty()) {
    archive = (fs::path(o.root) / "download.tar.gz.partial").string();
    log_line("downloading " + o.url);
    download(o.url, archive);
    downloaded = true;
  }
  const auto digest = file_sha256(archive);
  log_line("sha256 " + digest);
  if (!o.sha256.empty() && digest != o.sha256) {
    if (downloaded) fs::remove(archive);
    throw DataError("checksum mismatch: expected " + o.sha256 + ", got " + digest);
  }
  if (o.sha256.empty()) log_line("no --sha256 given; checksum recorded but not verified");

  std::string cmd = "tar -xzf " + shell_quote(archive) + " -C " + shell_quote(o.root);
  if (o.toy) {
    cmd += " --wildcards --no-anchored";
    std::vector<std::string> dirs = split_list(o.keywords);
    for (const auto& w : split_list(o.unknown_words)) dirs.push_back(w);
    dirs.push_back(kBackgroundDir);
    for (const auto& d : dirs) cmd += " " + shell_quote(d + "/*");
  }
  const int rc = std::system(cmd.c_str());
  if (downloaded) fs::remove(archive);
  if (rc != 0) throw DataError("extracting " + archive + " failed");
  write_text(marker, request + "\nsha256=" + digest + "\n");
  log_line("dataset ready in " + o.root);
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainOpts {
  std::string data;
  std::string keywords;
  std::string manifest;
  std::string preset = "toy";
  TrainConfig cfg;
  int weight_bits = 0;        // 0: preset default
  double sparsity = -1.0;     // < 0: preset default
  double silence_pct = 10.0;
  double unknown_pct = 10.0;
  std::uint64_t data_seed = DatasetOptions{}.seed;
  std::string model;
  std::string checkpoint;
  std::int64_t checkpoint_every = 100;
  bool resume = false;
  std::string log;
};

std::vector<std::string> keyword_list(const std::string& s) {
  return s.empty() ? standard_keywords() : split_list(s);
}

Manifest resolve_manifest(const std::string& data, const std::string& manifest_path,
                          const DatasetOptions& dopt) {
  if (!manifest_path.empty()) return read_manifest(manifest_path);
  return build_dataset(data, dopt);
}

int cmd_train(TrainOpts o, const Globals& g) {
  const auto& preset = find_preset(o.preset);
  TrainConfig cfg = o.cfg;
  cfg.seed = g.seed;
  cfg.weight_bits = o.weight_bits ? o.weight_bits : preset.weight_bits;
  cfg.target_sparsity = o.sparsity >= 0.0 ? o.sparsity : preset.sparsity;
  if (cfg.target_sparsity > 0.0 && cfg.prune_end == 0) {
    cfg.prune_start = std::max<std::int64_t>(cfg.quant_on_step, 0);
    cfg.prune_end = cfg.steps - std::max<std::int64_t>(cfg.steps / 10, 1);
  }
  cfg.validate();

  DatasetOptions dopt;
  dopt.keywords = keyword_list(o.keywords);
  dopt.silence_pct = o.silence_pct;
  dopt.unknown_pct = o.unknown_pct;
  dopt.seed = o.data_seed;
  const auto manifest = resolve_manifest(o.data, o.manifest, dopt);
  write_manifest(manifest, out_path(g, "manifest.tsv"));
  log_line("manifest: " + std::to_string(manifest.size()) + " clips");

  const FeatureConfig fcfg;
  auto data = prepare_training_data(featurize_manifest(o.data, manifest, fcfg));
  log_line("features: train " + std::to_string(data.train.size()) + ", val " +
           std::to_string(data.val.size()) + ", test " + std::to_string(data.test.size()));

  const auto ckpt = o.checkpoint.empty() ? out_path(g, "train.ckpt") : o.checkpoint;
  const auto log_path = o.log.empty() ? out_path(g, "train_log.jsonl") : o.log;
  const auto model_path = o.model.empty() ? out_path(g, "model.lmu") : o.model;

  TrainState st;
  if (o.resume && fs::exists(ckpt)) {
    st = load_state(ckpt);
    if (st.model.label_names != label_names_for(dopt.keywords) ||
        parameter_count(st.arch) != parameter_count(preset.arch)) {
      throw ArgumentError("checkpoint " + ckpt + " does not match the requested model");
    }
    log_line("resuming from step " + std::to_string(st.step));
  } else {
    st = init_train_state(preset.arch, label_names_for(dopt.keywords), cfg);
  }
  {
    std::ofstream lf(log_path, std::ios::trunc);
    for (const auto& r : st.log) lf << r.to_json() << '\n';
  }
  std::ofstream lf(log_path, std::ios::app);
  const auto on_log = [&](const TrainLogRecord& r) {
    lf << r.to_json() << '\n';
    lf.flush();
    char buf[160];
    std::snprintf(buf, sizeof buf, "step %lld loss %.4f val_acc %.4f sparsity %.3f%s",
                  static_cast<long long>(r.step), r.loss, r.val_acc, r.sparsity,
                  r.quant_on ? " (quantized)" : "");
    log_line(buf);
  };
  while (st.step < cfg.steps) {
    train_steps(st, data, cfg, st.step + o.checkpoint_every, on_log);
    save_state(st, ckpt);
  }
  auto qm = finalize(st, data, cfg, fcfg);
  save_model(qm, model_path);
  log_line("model written to " + model_path);

  const auto rep = size_report(qm);
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "size: %lld params, %lld nonzero (sparsity %.4f), %d-bit weights, %.3f kbits",
                static_cast<long long>(rep.total_params), static_cast<long long>(rep.nonzero_params),
                rep.sparsity(), qm.weight_bits, rep.kbits);
  std::cout << buf << '\n';
  if (st.float_val_acc >= 0.0) std::printf("float val_acc at quantization: %.4f\n", st.float_val_acc);
  if (!data.val.empty()) {
    std::printf("final val_acc: %.4f\n",
                accuracy(predict_deployed(qm, data.feature_ptrs(data.val)), data.label_list(data.val)));
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalOpts {
  std::string model;
  std::string data;
  std::string manifest;
  std::string split = "test";
  std::string mode = "both";
};

std::vector<std::string> keywords_of(const QuantizedModel& qm) {
  std::vector<std::string> kw;
  for (int k = 0; k < kSilenceLabel; ++k) {
    const auto& n = qm.label_names[static_cast<std::size_t>(k)];
    if (!(n.size() > 1 && n.front() == '_' && n.back() == '_')) kw.push_back(n);
  }
  return kw;
}

void check_frontend(const QuantizedModel& qm, const FeatureConfig& fcfg) {
  if (qm.frontend_hash != config_hash(fcfg)) {
    throw ArgumentError("model was trained with a different frontend configuration");
  }
}

int cmd_eval(const EvalOpts& o, const Globals& g) {
  const auto qm = load_model(o.model);
  const FeatureConfig fcfg;
  check_frontend(qm, fcfg);
  const Split split = parse_split(o.split);
  DatasetOptions dopt;
  dopt.keywords = keywords_of(qm);
  std::string manifest_path = o.manifest;
  if (manifest_path.empty() && fs::exists(fs::path(g.out_dir) / "manifest.tsv")) {
    manifest_path = (fs::path(g.out_dir) / "manifest.tsv").string();
  }
  Manifest subset;
  for (const auto& e : resolve_manifest(o.data, manifest_path, dopt))
    if (e.split == split) subset.push_back(e);
  if (subset.empty()) throw DataError(std::string("split '") + split_name(split) + "' is empty");

  auto fs_ = featurize_manifest(o.data, subset, fcfg);
  const auto norm = normalizer_from_model(qm);
  std::vector<const Eigen::MatrixXd*> ptrs;
  for (auto& f : fs_.features) {
    norm.apply(f);
    ptrs.push_back(&f);
  }
  std::printf("split %s: %zu clips\n", split_name(split), subset.size());
  if (o.mode == "offline" || o.mode == "both") {
    std::printf("offline accuracy: %.4f\n",
                accuracy(predict_deployed(qm, ptrs, EvalMode::kOffline), fs_.labels));
  }
  if (o.mode == "streaming" || o.mode == "both") {
    std::printf("streaming accuracy: %.4f\n",
                accuracy(predict_deployed(qm, ptrs, EvalMode::kStreaming), fs_.labels));
  }
  return 0;
}

// ---- stream ----------------------------------------------------------------

struct StreamOpts {
  std::string model;
  std::string wav;
  int chunk = 320;
  DetectorConfig detector;
  bool posteriors = false;
};

int cmd_stream(const StreamOpts& o, const Globals&) {
  const auto qm = load_model(o.model);
  const FeatureConfig fcfg;
  const auto audio = load_wav(o.wav, fcfg.sample_rate);
  KeywordStream stream(qm, fcfg, o.detector);
  detail::require(o.chunk >= 1, "--chunk must be >= 1");
  if (o.posteriors) {
    std::printf("frame");
    for (const auto& n : qm.label_names) std::printf(",%s", n.c_str());
    std::printf("\n");
  }
  int detections = 0;
  for (std::size_t pos = 0; pos < audio.size(); pos += static_cast<std::size_t>(o.chunk)) {
    const auto n = std::min(audio.size() - pos, static_cast<std::size_t>(o.chunk));
    for (const auto& f : stream.push(std::span<const double>(audio).subspan(pos, n))) {
      if (o.posteriors) {
        std::printf("%lld", static_cast<long long>(f.frame));
        for (double p : f.smoothed) std::printf(",%.6f", p);
        std::printf("\n");
      }
      if (f.detection) {
        ++detections;
        const auto& d = *f.detection;
        std::printf("detection frame=%lld time_s=%.2f label=%s score=%.4f\n",
                    static_cast<long long>(d.frame),
                    fcfg.window_s + static_cast<double>(d.frame) * fcfg.hop_s,
                    qm.label_names[static_cast<std::size_t>(d.label)].c_str(), d.score);
      }
    }
  }
  std::printf("detections: %d\n", detections);
  return 0;
}

// ---- size-report -----------------------------------------------------------

struct SizeOpts {
  std::string model;
  std::string preset;
  bool tensors = false;
};

void print_size_row(const std::string& name, int bits, const SizeReport& r) {
  std::printf("%-10s %4d %10lld %10lld %8.4f %10.3f\n", name.c_str(), bits,
              static_cast<long long>(r.total_params), static_cast<long long>(r.nonzero_params),
              r.sparsity(), r.kbits);
}

int cmd_size(const SizeOpts& o, const Globals&) {
  std::printf("%-10s %4s %10s %10s %8s %10s\n", "model", "bits", "params", "nonzero", "sparsity",
              "kbits");
  if (!o.model.empty()) {
    const auto qm = load_model(o.model);
    const auto rep = size_report(qm);
    print_size_row(fs::path(o.model).filename().string(), qm.weight_bits, rep);
    if (o.tensors) {
      for (const auto& row : rep.rows) {
        std::printf("  %-22s %4d %10lld %10lld\n", row.name.c_str(), row.bits,
                    static_cast<long long>(row.params), static_cast<long long>(row.nonzero));
      }
    }
    return 0;
  }
  for (const auto& p : presets()) {
    if (!o.preset.empty() && p.name != o.preset) continue;
    print_size_row(p.name, p.weight_bits, preset_size(p));
  }
  if (!o.preset.empty()) (void)find_preset(o.preset);
  return 0;
}

// ---- hw-report / hw-sweep --------------------------------------------------

struct WorkloadOpts {
  std::string model;
  std::string preset = "lmu2";
  std::string coefficients;
};

WorkloadProfile workload_of(const WorkloadOpts& o) {
  if (!o.model.empty()) return profile_workload(load_model(o.model));
  const auto& p = find_preset(o.preset);
  return profile_workload(p.arch, p.weight_bits);
}

CoefficientTable coefficients_of(const WorkloadOpts& o) {
  return o.coefficients.empty() ? CoefficientTable{} : load_coefficients(o.coefficients);
}

struct HwReportOpts {
  WorkloadOpts w;
  double clock_hz = 92e3;
  std::int64_t lanes = 112;
  double mcu_cycles = 17.24e6;
  double mcu_uw_per_mhz = 12.26;
  double mcu_ideal_uw_per_mhz = 6.88;
  double npu_energy_uj = 3.4;
};

int cmd_hw_report(const HwReportOpts& o, const Globals&) {
  const auto w = workload_of(o.w);
  const auto c = coefficients_of(o.w);
  const auto p = estimate_power(w, make_design(w, o.clock_hz, o.lanes), c);
  std::printf("workload: %lld MACs/frame, %lld bits accessed/frame, %lld bits stored\n",
              static_cast<long long>(w.macs), static_cast<long long>(w.accessed_bits()),
              static_cast<long long>(w.stored_bits()));
  std::printf("design: %.0f Hz, %lld lanes, %lld cycles/frame\n", p.clock_hz,
              static_cast<long long>(p.lanes), static_cast<long long>(p.cycles));
  std::printf("  mac dynamic     %10.4f uW\n", p.mac_dynamic_uW);
  std::printf("  sram dynamic    %10.4f uW\n", p.sram_dynamic_uW);
  std::printf("  sram static     %10.4f uW\n", p.sram_static_uW);
  std::printf("  other dynamic   %10.4f uW\n", p.other_dynamic_uW);
  std::printf("  total           %10.4f uW\n", p.total_uW);
  std::printf("  transistors     %10.0f\n", p.transistor_count);
  std::printf("  throughput      %10.2f ms (budget %.0f)\n", p.throughput_ms, kFrameBudgetMs);
  std::printf("  latency         %10.2f ms (budget %.0f)\n", p.latency_ms, kLatencyBudgetMs);
  std::printf("  realtime        %10s\n", p.realtime ? "yes" : "no");
  std::printf("\n%-24s %10s  %s\n", "device", "power_uW", "source");
  std::printf("%-24s %10.2f  %s\n", "LMU accelerator", p.total_uW, "modeled: coefficient table");
  std::printf("%-24s %10.2f  measured: %.2f Mcycles/s x %.2f uW/MHz\n", "Cortex-M4F",
              mcu_power(o.mcu_cycles, o.mcu_uw_per_mhz), o.mcu_cycles / 1e6, o.mcu_uw_per_mhz);
  std::printf("%-24s %10.2f  idealized: %.2f Mcycles/s x %.2f uW/MHz\n", "Cortex-M4F (ideal)",
              mcu_power(o.mcu_cycles, o.mcu_ideal_uw_per_mhz), o.mcu_cycles / 1e6,
              o.mcu_ideal_uw_per_mhz);
  std::printf("%-24s %10.2f  vendor-reported: %.2f uJ/frame x %.0f fps\n", "Syntiant NDP120",
              energy_per_frame_power(o.npu_energy_uj, c.frame_rate_hz), o.npu_energy_uj,
              c.frame_rate_hz);
  return 0;
}

struct HwSweepOpts {
  WorkloadOpts w;
  double clock_min = 1e3;
  double clock_max = 1e8;
  int clock_points = 20;
  std::vector<std::int64_t> lanes = {1, 2, 4, 8, 16, 32, 64, 128, 256, 512};
  std::string out;
};

int cmd_hw_sweep(const HwSweepOpts& o, const Globals& g) {
  const auto w = workload_of(o.w);
  const auto c = coefficients_of(o.w);
  const auto pts = sweep(w, {log_space(o.clock_min, o.clock_max, o.clock_points), o.lanes}, c);
  const auto path = o.out.empty() ? out_path(g, "hw_sweep.csv") : o.out;
  write_text(path, sweep_csv(pts));
  std::size_t feasible = 0, frontier = 0;
  for (const auto& p : pts) {
    feasible += p.realtime;
    frontier += p.pareto;
  }
  std::printf("%zu designs, %zu real-time, %zu on the Pareto frontier -> %s\n", pts.size(),
              feasible, frontier, path.c_str());
  if (feasible == 0) log_line("no real-time design in the grid; frontier is empty");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LMU keyword spotting: training, deployment and hardware reports"};
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "Read options from an INI/TOML file");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for outputs")->capture_default_str();

  FetchOpts fo;
  auto* fetch = app.add_subcommand("fetch-data", "Download, verify and extract the dataset");
  fetch->add_option("--root", fo.root, "Dataset directory")->required();
  fetch->add_option("--url", fo.url, "Archive URL")->capture_default_str();
  fetch->add_option("--sha256", fo.sha256, "Expected archive SHA-256 (hex)");
  fetch->add_option("--archive", fo.archive, "Use a local archive instead of downloading")
      ->check(CLI::ExistingFile);
  fetch->add_flag("--synthetic", fo.synthetic, "Generate a synthetic corpus instead");
  fetch->add_flag("--toy", fo.toy, "Only the configured keywords, unknown words and noise");
  fetch->add_option("--keywords", fo.keywords, "Keywords for --toy")->capture_default_str();
  fetch->add_option("--unknown-words", fo.unknown_words, "Unknown words for --toy")->capture_default_str();
  fetch->add_option("--synthetic-keyword-clips", fo.synthetic_keyword_clips)->capture_default_str();
  fetch->add_option("--synthetic-other-clips", fo.synthetic_other_clips)->capture_default_str();

  TrainOpts to;
  auto* train_cmd = app.add_subcommand("train", "Train and freeze a model");
  train_cmd->add_option("--data", to.data, "Dataset directory")->required();
  train_cmd->add_option("--keywords", to.keywords, "Comma-separated keywords (default: all ten)");
  train_cmd->add_option("--manifest", to.manifest, "Use an existing manifest");
  train_cmd->add_option("--preset", to.preset, "Architecture preset")->capture_default_str();
  train_cmd->add_option("--steps", to.cfg.steps)->capture_default_str();
  train_cmd->add_option("--batch-size", to.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", to.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--clip-norm", to.cfg.clip_norm)->capture_default_str();
  train_cmd->add_option("--quant-on-step", to.cfg.quant_on_step, "Step at which HAT starts (< 0: never)")
      ->capture_default_str();
  train_cmd->add_option("--weight-bits", to.weight_bits, "4 or 8 (default: preset)");
  train_cmd->add_option("--sparsity", to.sparsity, "Target sparsity (default: preset)");
  train_cmd->add_option("--prune-start", to.cfg.prune_start)->capture_default_str();
  train_cmd->add_option("--prune-end", to.cfg.prune_end, "0: derived from the schedule")->capture_default_str();
  train_cmd->add_option("--prune-every", to.cfg.prune_every)->capture_default_str();
  train_cmd->add_option("--eval-every", to.cfg.eval_every)->capture_default_str();
  train_cmd->add_option("--calib-examples", to.cfg.calib_examples)->capture_default_str();
  train_cmd->add_option("--silence-pct", to.silence_pct)->capture_default_str();
  train_cmd->add_option("--unknown-pct", to.unknown_pct)->capture_default_str();
  train_cmd->add_option("--data-seed", to.data_seed, "Seed for silence crops and unknown sampling")
      ->capture_default_str();
  train_cmd->add_option("--model", to.model, "Output model (default: <out-dir>/model.lmu)");
  train_cmd->add_option("--checkpoint", to.checkpoint, "Checkpoint (default: <out-dir>/train.ckpt)");
  train_cmd->add_option("--checkpoint-every", to.checkpoint_every)->capture_default_str()->check(
      CLI::PositiveNumber);
  train_cmd->add_flag("--resume", to.resume, "Continue from the checkpoint if present");
  train_cmd->add_option("--log", to.log, "JSONL log (default: <out-dir>/train_log.jsonl)");

  EvalOpts eo;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a deployed model");
  eval_cmd->add_option("--model", eo.model)->required();
  eval_cmd->add_option("--data", eo.data, "Dataset directory")->required();
  eval_cmd->add_option("--manifest", eo.manifest, "Manifest (default: <out-dir>/manifest.tsv or rebuilt)");
  eval_cmd->add_option("--split", eo.split)->capture_default_str()->check(
      CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--mode", eo.mode)->capture_default_str()->check(
      CLI::IsMember({"offline", "streaming", "both"}));

  StreamOpts so;
  auto* stream_cmd = app.add_subcommand("stream", "Run real-time detection over a WAV file");
  stream_cmd->add_option("--model", so.model)->required();
  stream_cmd->add_option("--wav", so.wav, "16 kHz mono PCM16 WAV")->required();
  stream_cmd->add_option("--chunk", so.chunk, "Samples per push")->capture_default_str();
  stream_cmd->add_option("--smoothing", so.detector.smoothing, "Moving average window (hops)")
      ->capture_default_str();
  stream_cmd->add_option("--threshold", so.detector.threshold)->capture_default_str();
  stream_cmd->add_option("--refractory", so.detector.refractory, "Hops without detections after one")
      ->capture_default_str();
  stream_cmd->add_flag("--posteriors", so.posteriors, "Print smoothed posteriors per hop (CSV)");

  SizeOpts zo;
  auto* size_cmd = app.add_subcommand("size-report", "Parameter count and size in kbits");
  auto* size_model = size_cmd->add_option("--model", zo.model, "Model file");
  size_cmd->add_option("--preset", zo.preset, "Only this preset")->excludes(size_model);
  size_cmd->add_flag("--tensors", zo.tensors, "Per-tensor rows (with --model)");

  auto add_workload = [](CLI::App* cmd, WorkloadOpts& w) {
    auto* m = cmd->add_option("--model", w.model, "Model file");
    cmd->add_option("--preset", w.preset, "Preset when no model is given")->capture_default_str()->excludes(m);
    cmd->add_option("--coefficients", w.coefficients, "Coefficient table (default: built-in)");
  };

  HwReportOpts ho;
  auto* hw_cmd = app.add_subcommand("hw-report", "Accelerator power/area and device comparison");
  add_workload(hw_cmd, ho.w);
  hw_cmd->add_option("--clock", ho.clock_hz, "Clock in Hz")->capture_default_str();
  hw_cmd->add_option("--lanes", ho.lanes, "Parallel MAC lanes")->capture_default_str();
  hw_cmd->add_option("--mcu-cycles", ho.mcu_cycles, "MCU cycles per second of audio")->capture_default_str();
  hw_cmd->add_option("--mcu-uw-per-mhz", ho.mcu_uw_per_mhz)->capture_default_str();
  hw_cmd->add_option("--mcu-ideal-uw-per-mhz", ho.mcu_ideal_uw_per_mhz)->capture_default_str();
  hw_cmd->add_option("--npu-energy-uj", ho.npu_energy_uj, "Energy per frame")->capture_default_str();

  HwSweepOpts wo;
  auto* sweep_cmd = app.add_subcommand("hw-sweep", "Power/area design sweep as CSV");
  add_workload(sweep_cmd, wo.w);
  sweep_cmd->add_option("--clock-min", wo.clock_min)->capture_default_str();
  sweep_cmd->add_option("--clock-max", wo.clock_max)->capture_default_str();
  sweep_cmd->add_option("--clock-points", wo.clock_points)->capture_default_str();
  sweep_cmd->add_option("--lanes", wo.lanes, "MAC lane counts")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--out", wo.out, "CSV path (default: <out-dir>/hw_sweep.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto resolved = app.config_to_str(true, false);
    write_text(out_path(g, "resolved_config.ini"), resolved);
    log_line("resolved config written to " + out_path(g, "resolved_config.ini"));
    if (*fetch) return cmd_fetch(fo, g);
    if (*train_cmd) return cmd_train(to, g);
    if (*eval_cmd) return cmd_eval(eo, g);
    if (*stream_cmd) return cmd_stream(so, g);
    if (*size_cmd) return cmd_size(zo, g);
    if (*hw_cmd) return cmd_hw_report(ho, g);
    if (*sweep_cmd) return cmd_hw_sweep(wo, g);
  } catch (const ArgumentError& e) {
    std::cerr << "lmukws: error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "lmukws: data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "lmukws: error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

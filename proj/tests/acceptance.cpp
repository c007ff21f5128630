// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lmukws/lmukws.hpp"
#include "oracle/naive_lmu.hpp"

using namespace lmukws;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, double budget_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs <= budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("[%s] %d. %s: %s (%.2f s, budget %.0f s%s)\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              o.detail.c_str(), secs, budget_s, in_time ? "" : ", over budget");
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Eigen::MatrixXd random_features(Eigen::Index T, Eigen::Index n, Rng& rng) {
  Eigen::MatrixXd f(T, n);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal() * 1.5;
  return f;
}

ArchConfig random_arch(Rng& rng) {
  ArchConfig a;
  a.input_dim = 3 + static_cast<int>(rng.below(8));
  const int layers = 1 + static_cast<int>(rng.below(2));
  for (int l = 0; l < layers; ++l) {
    LayerConfig lc;
    lc.hidden = 4 + static_cast<int>(rng.below(17));
    const int cells = 1 + static_cast<int>(rng.below(3));
    for (int c = 0; c < cells; ++c)
      lc.cells.push_back({1 + static_cast<int>(rng.below(8)), rng.uniform(0.05, 1.0)});
    a.layers.push_back(lc);
  }
  return a;
}

ModelGraph random_model(const ArchConfig& a, Rng& rng) {
  auto m = make_model(a);
  init_params(m, rng.next_u64());
  for (auto& t : trainable_tensors(m))
    if (t.is_bias)
      for (Eigen::Index i = 0; i < t.rows * t.cols; ++i) t.data[i] = rng.uniform(-0.3, 0.3);
  return m;
}

// ---- 1 ---------------------------------------------------------------------

Outcome hat_bit_exactness() {
  Rng rng(2024);
  std::int64_t sequences = 0, values = 0;
  for (int cfg = 0; cfg < 5; ++cfg) {
    const auto arch = random_arch(rng);
    const auto m = random_model(arch, rng);
    std::vector<Eigen::MatrixXd> calib_f;
    for (int i = 0; i < 16; ++i) calib_f.push_back(random_features(20, arch.input_dim, rng));
    std::vector<Example> calib;
    for (const auto& f : calib_f) calib.push_back({&f, 0});
    const int bits = cfg % 2 ? 8 : 4;
    const auto plan = calibrate(m, calib, bits, 99.9);
    const auto qm = freeze(m, plan);
    const auto g = build_graph(m, &plan);
    for (int s = 0; s < 200; ++s, ++sequences) {
      const auto T = 1 + static_cast<Eigen::Index>(rng.below(40));
      const auto f = random_features(T, arch.input_dim, rng);
      auto gs = GraphState::zeros(g);
      SequenceTape tape;
      const auto ref = graph_forward(g, f, gs, &tape);
      auto is = IntStreamState::zeros(qm);
      std::vector<IntStepTrace> trace;
      const auto out = quantized_forward(qm, quantize_features(qm, f), is, &trace);
      for (Eigen::Index t = 0; t < T; ++t) {
        for (int k = 0; k < kNumLabels; ++k, ++values)
          if (std::ldexp(static_cast<double>(out.at(t, k)), out.scale_exp) != ref(t, k))
            return {false, fmt("logit mismatch config %d sequence %d frame %ld", cfg, s, static_cast<long>(t))};
        for (std::size_t l = 0; l < qm.layers.size(); ++l) {
          const auto& L = qm.layers[l];
          const auto& tr = trace[static_cast<std::size_t>(t)][l];
          const auto& lt = tape.layers[l];
          for (std::size_t i = 0; i < tr.u.size(); ++i, ++values)
            if (dequantize_scalar(tr.u[i], L.u_spec) != lt.u(static_cast<Eigen::Index>(i), t))
              return {false, fmt("u mismatch config %d layer %zu", cfg, l)};
          for (std::size_t i = 0; i < tr.m.size(); ++i, ++values)
            if (dequantize_scalar(tr.m[i], L.m_spec) != lt.m(static_cast<Eigen::Index>(i), t))
              return {false, fmt("m mismatch config %d layer %zu", cfg, l)};
          for (std::size_t i = 0; i < tr.h.size(); ++i, ++values)
            if (dequantize_scalar(tr.h[i], L.h_spec) != lt.h(static_cast<Eigen::Index>(i), t))
              return {false, fmt("h mismatch config %d layer %zu", cfg, l)};
        }
      }
    }
  }
  return {true, fmt("%lld sequences over 5 configs, %lld activations and logits identical",
                    static_cast<long long>(sequences), static_cast<long long>(values))};
}

// ---- 2 ---------------------------------------------------------------------

Outcome streaming_equivalence() {
  Rng rng(77);
  const auto arch = random_arch(rng);
  const auto m = random_model(arch, rng);
  QuantPlan plan;
  plan.weight_bits = 4;
  plan.input_exp = -4;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) plan.layers.push_back({-3, -4, -4});
  const auto qm = freeze(m, plan);
  const std::size_t n = static_cast<std::size_t>(arch.input_dim);
  for (int trial = 0; trial < 100; ++trial) {
    const auto T = 50 + rng.below(100);
    const auto q = quantize_features(qm, random_features(static_cast<Eigen::Index>(T), arch.input_dim, rng));
    auto s1 = IntStreamState::zeros(qm);
    const auto full = quantized_forward(qm, q, s1);
    auto s2 = IntStreamState::zeros(qm);
    std::vector<std::int32_t> joined;
    std::size_t pos = 0;
    while (pos < T) {
      const auto len = std::min<std::size_t>(T - pos, 1 + rng.below(20));
      const auto part = quantized_forward(qm, std::span(q).subspan(pos * n, len * n), s2);
      joined.insert(joined.end(), part.data.begin(), part.data.end());
      pos += len;
    }
    if (joined != full.data) return {false, fmt("chunking %d differs", trial)};
    for (std::size_t l = 0; l < s1.layers.size(); ++l)
      if (s1.layers[l].h != s2.layers[l].h || s1.layers[l].m != s2.layers[l].m)
        return {false, fmt("chunking %d final state differs", trial)};
  }
  // audio-level chunking through the featurizer and detector
  FeatureConfig fcfg;
  ArchConfig a2;
  a2.input_dim = fcfg.mel_bins;
  a2.layers = {{16, {{6, 0.5}}}};
  auto m2 = random_model(a2, rng);
  QuantPlan p2;
  p2.input_exp = -4;
  p2.layers = {{-3, -4, -4}};
  auto qm2 = freeze(m2, p2);
  qm2.frontend_hash = config_hash(fcfg);
  std::vector<double> audio(2 * 16000);
  for (auto& s : audio) s = 0.1 * rng.normal();
  KeywordStream ref(qm2, fcfg);
  const auto ref_frames = ref.push(audio);
  for (int trial = 0; trial < 10; ++trial) {
    KeywordStream s(qm2, fcfg);
    std::size_t pos = 0, k = 0;
    while (pos < audio.size()) {
      const auto len = std::min<std::size_t>(audio.size() - pos, 1 + rng.below(1000));
      for (const auto& f : s.push(std::span<const double>(audio).subspan(pos, len)))
        if (f.smoothed != ref_frames[k++].smoothed) return {false, "audio chunking changed posteriors"};
      pos += len;
    }
  }
  return {true, "100 random frame chunkings and 10 audio chunkings bit-identical to one-shot"};
}

// ---- 3 ---------------------------------------------------------------------

Outcome gradient_check() {
  ArchConfig a;
  a.input_dim = 4;
  a.layers = {{6, {{4, 0.1}}}};
  auto m = make_model(a);
  init_params(m, 11);
  Rng rng(12);
  for (auto& t : trainable_tensors(m))
    for (Eigen::Index i = 0; i < t.rows * t.cols; ++i) t.data[i] += rng.uniform(-0.2, 0.2);
  std::vector<Eigen::MatrixXd> feats;
  for (int k = 0; k < 2; ++k) feats.push_back(random_features(10, 4, rng));
  const std::vector<Example> batch{{&feats[0], 3}, {&feats[1], 10}};
  const auto analytic = forward_backward(m, batch).grads;
  auto views = trainable_tensors(m);
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t ti = 0; ti < views.size(); ++ti) {
    for (Eigen::Index j = 0; j < views[ti].rows * views[ti].cols; ++j, ++checked) {
      double& w = views[ti].data[j];
      const double saved = w, h = 1e-6;
      w = saved + h;
      const double lp = forward_backward(m, batch).loss;
      w = saved - h;
      const double lm = forward_backward(m, batch).loss;
      w = saved;
      const double num = (lp - lm) / (2 * h);
      const double ana = analytic.tensors[ti].data()[j];
      const double rel = std::fabs(num - ana) / std::max({std::fabs(num), std::fabs(ana), 1e-5});
      worst = std::max(worst, rel);
    }
  }
  return {worst < 1e-4, fmt("%zu parameters, max relative error %.3e (limit 1e-4)", checked, worst)};
}

// ---- 4 ---------------------------------------------------------------------

Outcome delay_decoding() {
  std::map<int, double> mean;
  double worst8 = 0.0;
  for (int d : {2, 4, 8}) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto u = oracle::band_limited_noise(3000, 0.02, 1.0, 500 + seed);
      const double e = oracle::delay_nrmse(d, 0.2, 0.02, u, 50);
      sum += e;
      if (d == 8) worst8 = std::max(worst8, e);
    }
    mean[d] = sum / 20.0;
  }
  const bool monotone = mean[4] <= mean[2] && mean[8] <= mean[4];
  return {worst8 < 0.15 && monotone,
          fmt("mean NRMSE d=2 %.4f, d=4 %.4f, d=8 %.4f; worst d=8 seed %.4f (limit 0.15)", mean[2],
              mean[4], mean[8], worst8)};
}

// ---- 5 ---------------------------------------------------------------------

Outcome power_arithmetic() {
  const double m4 = mcu_power(17.24e6, 12.26), ideal = mcu_power(17.24e6, 6.88);
  const double npu = energy_per_frame_power(3.4, 50);
  const bool ok = m4 >= 211 && m4 <= 212 && ideal >= 118 && ideal <= 119 && npu == 170.0;
  return {ok, fmt("M4F %.2f uW, idealized %.2f uW, energy-per-frame %.2f uW", m4, ideal, npu)};
}

// ---- 6 ---------------------------------------------------------------------

Outcome size_metric() {
  const std::vector<std::pair<std::string, double>> expected{
      {"lmu2", 361}, {"lmu1", 1683}, {"lmu3", 105}, {"lmu4", 49}};
  Rng rng(6);
  std::string detail;
  bool ok = true;
  for (const auto& [name, kbits] : expected) {
    const auto& p = find_preset(name);
    auto m = make_model(p.arch);
    // magnitudes in [0.5, 1]: every weight lands on a nonzero grid point
    for (auto& t : trainable_tensors(m))
      for (Eigen::Index i = 0; i < t.rows * t.cols; ++i)
        t.data[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.0);
    if (p.sparsity > 0.0) apply_mask(m, prune_magnitude(m, p.sparsity));
    QuantPlan plan;
    plan.weight_bits = p.weight_bits;
    plan.input_exp = -4;
    for (std::size_t l = 0; l < p.arch.layers.size(); ++l) plan.layers.push_back({-3, -4, -4});
    const auto rep = size_report(freeze(m, plan));
    ok = ok && rep.kbits == kbits;
    detail += fmt("%s %.3f kbits (%lld/%lld nonzero, %d-bit)  ", name.c_str(), rep.kbits,
                  static_cast<long long>(rep.nonzero_params), static_cast<long long>(rep.total_params),
                  p.weight_bits);
  }
  detail.pop_back();
  detail.pop_back();
  return {ok, detail};
}

// ---- 7 ---------------------------------------------------------------------

Outcome realtime_constraint() {
  const auto& p = find_preset("lmu2");
  const auto w = profile_workload(p.arch, p.weight_bits);
  const CoefficientTable c;
  SweepGrid grid{log_space(1e3, 1e8, 20), {1, 2, 4, 8, 16, 32, 64, 128, 256, 512}};
  const auto pts = sweep(w, grid, c);
  if (pts.size() != 200) return {false, fmt("grid has %zu points", pts.size())};
  std::size_t feasible = 0, frontier = 0;
  for (const auto& a : pts) {
    const double thr_s = static_cast<double>(a.cycles) / a.clock_hz;
    const double lat_ms = 2.0 * thr_s * 1e3 + c.latency_residual_ms;
    const bool should = thr_s <= 0.020 && lat_ms <= 40.0;
    if (a.realtime != should) return {false, fmt("realtime flag wrong at %.0f Hz x %lld", a.clock_hz, static_cast<long long>(a.lanes))};
    feasible += a.realtime;
    if (!a.pareto) continue;
    ++frontier;
    if (!a.realtime) return {false, "infeasible design on the frontier"};
    for (const auto& b : pts) {
      if (&a != &b && b.pareto && dominates(b, a)) return {false, "frontier rows dominate each other"};
    }
  }
  return {feasible > 0 && frontier > 0,
          fmt("200 designs, %zu real-time all within 20/40 ms, %zu frontier rows mutually non-dominated",
              feasible, frontier)};
}

// ---- 8 ---------------------------------------------------------------------

struct Corpus {
  TrainData data;
  std::size_t clips = 0;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    const auto root = (fs::temp_directory_path() / "lmukws_acceptance_corpus").string();
    fs::remove_all(root);
    generate_synthetic_corpus(root, SyntheticOptions{});
    DatasetOptions o;
    o.keywords = {"yes", "no"};
    const auto man = build_dataset(root, o);
    Corpus out;
    out.clips = man.size();
    out.data = prepare_training_data(featurize_manifest(root, man, FeatureConfig{}));
    return out;
  }();
  return c;
}

Outcome desk_training() {
  const auto& c = corpus();
  const auto& d = c.data;
  const auto labels = label_names_for({"yes", "no"});
  const auto& arch = find_preset("toy").arch;

  int below = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.steps = 200;
    cfg.quant_on_step = -1;
    cfg.eval_every = 10;
    auto st = init_train_state(arch, labels, cfg);
    bool hit = false;
    train_steps(st, d, cfg, cfg.steps, [&](const TrainLogRecord& r) { hit = hit || r.loss < std::log(12.0); });
    below += hit;
  }

  TrainConfig cfg;
  cfg.seed = 1;
  cfg.steps = 600;
  cfg.quant_on_step = 400;
  auto r = train(arch, labels, d, cfg);
  std::map<int, int> counts;
  for (auto i : d.val) ++counts[d.labels[i]];
  int majority = 0;
  for (const auto& [k, n] : counts) majority = std::max(majority, n);
  const double baseline = static_cast<double>(majority) / static_cast<double>(d.val.size());
  const double float_acc = r.state.float_val_acc;
  const double hat_acc = accuracy(predict_deployed(r.deployed, d.feature_ptrs(d.val)), d.label_list(d.val));
  const bool a = below >= 18, b = float_acc - baseline >= 0.20, cc = std::fabs(hat_acc - float_acc) <= 0.05;
  return {a && b && cc,
          fmt("synthetic 2-keyword corpus, %zu clips (val %zu); (a) loss < ln 12 within 200 steps "
              "in %d/20 seeds; (b) float val %.4f vs majority %.4f; (c) 4-bit HAT val %.4f, gap %.4f",
              c.clips, d.val.size(), below, float_acc, baseline, hat_acc, std::fabs(hat_acc - float_acc))};
}

// ---- 9 ---------------------------------------------------------------------

Outcome frontend_and_splits() {
  FeatureConfig fcfg;
  LogMelExtractor ex(fcfg);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> pcm(16000);
    for (auto& s : pcm) s = 0.2 * rng.normal();
    const auto off = featurize_utterance(pcm, ex);
    if (off.rows() != 49) return {false, fmt("%ld frames", static_cast<long>(off.rows()))};
    StreamFeaturizer sf(fcfg);
    std::size_t pos = 0;
    Eigen::Index row = 0;
    while (pos < pcm.size()) {
      const auto len = std::min<std::size_t>(pcm.size() - pos, 1 + rng.below(700));
      for (const auto& f : sf.push(std::span<const double>(pcm).subspan(pos, len))) {
        for (Eigen::Index j = 0; j < off.cols(); ++j)
          if (f[static_cast<std::size_t>(j)] != off(row, j)) return {false, "streaming frame differs"};
        ++row;
      }
      pos += len;
    }
    if (row != 49) return {false, "streaming produced a different frame count"};
  }
  // manifest-scale split check: 2618 speakers with 1..10 takes each
  Rng ids(2618);
  std::map<Split, std::size_t> n;
  std::size_t total = 0;
  for (int s = 0; s < 2618; ++s) {
    char spk[16];
    std::snprintf(spk, sizeof spk, "%08x", static_cast<unsigned>(ids.next_u64() & 0xffffffffu));
    const auto takes = 1 + ids.below(10);
    for (std::uint64_t k = 0; k < takes; ++k, ++total)
      ++n[which_set(std::string("word/") + spk + "_nohash_" + std::to_string(k) + ".wav")];
  }
  const double tr = static_cast<double>(n[Split::kTrain]) / static_cast<double>(total);
  const double va = static_cast<double>(n[Split::kValidation]) / static_cast<double>(total);
  const double te = static_cast<double>(n[Split::kTest]) / static_cast<double>(total);
  const bool ok = std::fabs(tr - 0.8) <= 0.015 && std::fabs(va - 0.1) <= 0.015 && std::fabs(te - 0.1) <= 0.015;
  return {ok, fmt("49 frames, streaming == offline over 10 utterances; split %.4f/%.4f/%.4f over %zu files",
                  tr, va, te, total)};
}

}  // namespace

int main() {
  report(1, "HAT bit-exactness", 60, hat_bit_exactness);
  report(2, "streaming equivalence", 60, streaming_equivalence);
  report(3, "gradient check", 60, gradient_check);
  report(4, "delay decoding", 60, delay_decoding);
  report(5, "power arithmetic", 1, power_arithmetic);
  report(6, "size metric", 1, size_metric);
  report(7, "real-time constraint", 10, realtime_constraint);
  report(8, "desk-scale training", 1800, desk_training);
  report(9, "frontend and splits", 120, frontend_and_splits);
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}

#pragma once

// Analytical accelerator cost model. Operation counts come from the model
// topology; power and area come from a coefficient table. Units: energies
// in joules, static power in watts, results in microwatts / milliseconds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lmukws/lmu.hpp"
#include "lmukws/qmodel.hpp"

namespace lmukws {

struct WorkloadProfile {
  std::int64_t macs = 0;             // per frame
  std::int64_t read_bits = 0;        // per frame
  std::int64_t write_bits = 0;       // per frame
  std::int64_t parameter_bits = 0;   // trainable weights at weight precision
  std::int64_t constant_bits = 0;    // fixed memory matrices (8-bit)
  std::int64_t activation_bits = 0;  // state and scratch activations

  std::int64_t stored_bits() const { return parameter_bits + constant_bits + activation_bits; }
  std::int64_t accessed_bits() const { return read_bits + write_bits; }
};

/// MACs of one layer per frame:
///   c(n + h)            u_t
///   sum d_k^2 + sum d_k m_t
///   h n + h M + h       h_t  (M = sum d_k)
inline std::int64_t layer_macs(std::int64_t n, const LayerConfig& lc) {
  const std::int64_t h = lc.hidden, c = static_cast<std::int64_t>(lc.cells.size());
  std::int64_t mem = 0, sq = 0;
  for (const auto& cs : lc.cells) {
    mem += cs.order;
    sq += std::int64_t{cs.order} * cs.order;
  }
  return c * (n + h) + sq + mem + h * n + h * mem + h;
}

inline WorkloadProfile profile_workload(const ArchConfig& arch, int weight_bits) {
  detail::require(weight_bits >= 1, "profile_workload: weight bits must be positive");
  WorkloadProfile w;
  std::int64_t n = arch.input_dim;
  w.activation_bits = n * kActivationBits;
  for (const auto& lc : arch.layers) {
    const std::int64_t h = lc.hidden, c = static_cast<std::int64_t>(lc.cells.size());
    std::int64_t mem = 0, sq = 0;
    for (const auto& cs : lc.cells) {
      mem += cs.order;
      sq += std::int64_t{cs.order} * cs.order;
    }
    w.macs += layer_macs(n, lc);
    w.parameter_bits += (c * n + c * h + h * n + h * mem + h) * weight_bits;
    w.constant_bits += (sq + mem) * kConstantBits;
    w.activation_bits += (c + mem + h) * kActivationBits;
    // every operand is read once per frame; u, m, h are written once
    w.read_bits += (n + h + mem) * kActivationBits;
    w.write_bits += (c + mem + h) * kActivationBits;
    n = h;
  }
  w.macs += kNumLabels * n + kNumLabels;
  w.parameter_bits += (kNumLabels * n + kNumLabels) * weight_bits;
  w.read_bits += n * kActivationBits + w.parameter_bits + w.constant_bits;
  w.write_bits += kNumLabels * kAccumulatorBits;
  return w;
}

inline WorkloadProfile profile_workload(const QuantizedModel& qm) {
  ArchConfig arch;
  arch.input_dim = qm.input_dim;
  arch.dt = qm.dt;
  arch.method = qm.method;
  for (const auto& L : qm.layers) arch.layers.push_back({static_cast<int>(L.hidden_dim()), L.cells});
  return profile_workload(arch, qm.weight_bits);
}

struct CoefficientTable {
  double e_mac_j = 0.4e-12;                // energy per MAC
  double e_sram_bit_j = 0.1e-12;           // SRAM read/write energy per bit
  double p_sram_static_bit_w = 10e-12;     // SRAM leakage per stored bit
  double e_transistor_j = 1e-15;           // switching energy per transistor-cycle
  double activity = 0.1;                   // activity factor of "other" logic
  double transistors_per_mac = 2500;
  double transistors_per_multiplier = 5000;
  double transistors_per_divider = 10000;
  double transistors_per_storage_bit = 20;
  double overhead_cycles = 64;             // fixed per-frame control overhead
  double latency_residual_ms = 12.83;      // window residual added to the pipeline
  double frame_rate_hz = 50;               // 20 ms hop

  void validate() const {
    for (double v : {e_mac_j, e_sram_bit_j, p_sram_static_bit_w, e_transistor_j, activity,
                     transistors_per_mac, transistors_per_multiplier, transistors_per_divider,
                     transistors_per_storage_bit, frame_rate_hz}) {
      detail::require(std::isfinite(v) && v > 0.0, "coefficient table: values must be positive");
    }
    detail::require(overhead_cycles >= 0 && latency_residual_ms >= 0,
                    "coefficient table: overhead and residual must be non-negative");
  }

  static std::map<std::string, double CoefficientTable::*> fields() {
    return {{"e_mac_j", &CoefficientTable::e_mac_j},
            {"e_sram_bit_j", &CoefficientTable::e_sram_bit_j},
            {"p_sram_static_bit_w", &CoefficientTable::p_sram_static_bit_w},
            {"e_transistor_j", &CoefficientTable::e_transistor_j},
            {"activity", &CoefficientTable::activity},
            {"transistors_per_mac", &CoefficientTable::transistors_per_mac},
            {"transistors_per_multiplier", &CoefficientTable::transistors_per_multiplier},
            {"transistors_per_divider", &CoefficientTable::transistors_per_divider},
            {"transistors_per_storage_bit", &CoefficientTable::transistors_per_storage_bit},
            {"overhead_cycles", &CoefficientTable::overhead_cycles},
            {"latency_residual_ms", &CoefficientTable::latency_residual_ms},
            {"frame_rate_hz", &CoefficientTable::frame_rate_hz}};
  }
};

/// Parse "key = value" lines; '#' starts a comment. Unknown keys are errors.
inline CoefficientTable parse_coefficients(const std::string& text) {
  CoefficientTable t;
  const auto fields = CoefficientTable::fields();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("coefficients line " + std::to_string(lineno) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = fields.find(key);
    if (it == fields.end()) {
      throw DataError("coefficients line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) {
      throw DataError("coefficients line " + std::to_string(lineno) + ": bad number '" + value + "'");
    }
    t.*(it->second) = v;
  }
  try {
    t.validate();
  } catch (const ArgumentError& e) {
    throw DataError(e.what());
  }
  return t;
}

inline CoefficientTable load_coefficients(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open coefficient table " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_coefficients(ss.str());
}

struct DesignPoint {
  double clock_hz = 92e3;
  std::int64_t lanes = 112;  // parallel MAC units
  std::int64_t sram_width_bits = 1024;
  std::int64_t storage_bits = 0;
  std::int64_t multipliers = 2;  // requantization / scaling datapath
  std::int64_t dividers = 1;
  double misc_transistors = 200000;  // control, sequencing, I/O

  void validate() const {
    detail::require(clock_hz > 0.0 && std::isfinite(clock_hz), "design: clock must be positive");
    detail::require(lanes >= 1, "design: need at least one MAC lane");
    detail::require(sram_width_bits >= 1, "design: SRAM width must be positive");
    detail::require(storage_bits >= 0 && multipliers >= 0 && dividers >= 0 && misc_transistors >= 0,
                    "design: inventory counts must be non-negative");
  }
};

/// A design sized to hold the workload's parameters and state.
inline DesignPoint make_design(const WorkloadProfile& w, double clock_hz, std::int64_t lanes) {
  DesignPoint dp;
  dp.clock_hz = clock_hz;
  dp.lanes = lanes;
  dp.storage_bits = w.stored_bits();
  return dp;
}

/// The 92 kHz, 112-lane reference operating point.
inline DesignPoint reference_design(const WorkloadProfile& w) { return make_design(w, 92e3, 112); }

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

inline std::int64_t cycles_per_frame(const WorkloadProfile& w, const DesignPoint& dp,
                                     const CoefficientTable& c = {}) {
  detail::require(dp.lanes >= 1 && dp.sram_width_bits >= 1, "cycles_per_frame: invalid design");
  return ceil_div(w.macs, dp.lanes) + ceil_div(w.accessed_bits(), dp.sram_width_bits) +
         static_cast<std::int64_t>(std::llround(c.overhead_cycles));
}

/// Transistor count: MAC lanes, multipliers, dividers, misc logic and
/// flip-flop based parameter/state storage.
inline double estimate_area(const DesignPoint& dp, const CoefficientTable& c = {}) {
  return static_cast<double>(dp.lanes) * c.transistors_per_mac +
         static_cast<double>(dp.multipliers) * c.transistors_per_multiplier +
         static_cast<double>(dp.dividers) * c.transistors_per_divider + dp.misc_transistors +
         static_cast<double>(dp.storage_bits) * c.transistors_per_storage_bit;
}

struct PowerBreakdown {
  double clock_hz = 0;
  std::int64_t lanes = 0;
  double mac_dynamic_uW = 0;
  double sram_dynamic_uW = 0;
  double sram_static_uW = 0;
  double other_dynamic_uW = 0;
  double total_uW = 0;
  double transistor_count = 0;
  std::int64_t cycles = 0;
  double throughput_ms = 0;
  double latency_ms = 0;
  bool realtime = false;
  bool pareto = false;
};

inline constexpr double kFrameBudgetMs = 20.0;
inline constexpr double kLatencyBudgetMs = 40.0;

/// Frames are processed at the audio rate when the design keeps up, and as
/// fast as it can otherwise.
inline PowerBreakdown estimate_power(const WorkloadProfile& w, const DesignPoint& dp,
                                     const CoefficientTable& c = {}) {
  dp.validate();
  c.validate();
  PowerBreakdown p;
  p.clock_hz = dp.clock_hz;
  p.lanes = dp.lanes;
  p.cycles = cycles_per_frame(w, dp, c);
  const double fps = std::min(c.frame_rate_hz, dp.clock_hz / static_cast<double>(p.cycles));
  p.mac_dynamic_uW = static_cast<double>(w.macs) * fps * c.e_mac_j * 1e6;
  p.sram_dynamic_uW = static_cast<double>(w.accessed_bits()) * fps * c.e_sram_bit_j * 1e6;
  p.sram_static_uW = static_cast<double>(dp.storage_bits) * c.p_sram_static_bit_w * 1e6;
  const double other_transistors =
      static_cast<double>(dp.multipliers) * c.transistors_per_multiplier +
      static_cast<double>(dp.dividers) * c.transistors_per_divider + dp.misc_transistors;
  p.other_dynamic_uW = other_transistors * c.e_transistor_j * c.activity * dp.clock_hz * 1e6;
  p.total_uW = p.mac_dynamic_uW + p.sram_dynamic_uW + p.sram_static_uW + p.other_dynamic_uW;
  p.transistor_count = estimate_area(dp, c);
  p.throughput_ms = static_cast<double>(p.cycles) / dp.clock_hz * 1e3;
  p.latency_ms = 2.0 * p.throughput_ms + c.latency_residual_ms;
  p.realtime = p.throughput_ms <= kFrameBudgetMs && p.latency_ms <= kLatencyBudgetMs;
  return p;
}

/// Power of a microcontroller from its cycle demand and efficiency.
inline double mcu_power(double cycles_per_second, double efficiency_uw_per_mhz) {
  detail::require(cycles_per_second >= 0 && efficiency_uw_per_mhz >= 0,
                  "mcu_power: inputs must be non-negative");
  return cycles_per_second / 1e6 * efficiency_uw_per_mhz;
}

/// Power of a device characterized by energy per frame.
inline double energy_per_frame_power(double energy_uj, double frames_per_second) {
  detail::require(energy_uj >= 0 && frames_per_second >= 0,
                  "energy_per_frame_power: inputs must be non-negative");
  return energy_uj * frames_per_second;
}

inline bool dominates(const PowerBreakdown& a, const PowerBreakdown& b) {
  return a.total_uW <= b.total_uW && a.transistor_count <= b.transistor_count &&
         (a.total_uW < b.total_uW || a.transistor_count < b.transistor_count);
}

/// Mark the feasible points not dominated in (total power, transistors).
inline void mark_pareto(std::vector<PowerBreakdown>& pts) {
  for (auto& p : pts) {
    p.pareto = p.realtime;
    if (!p.realtime) continue;
    for (const auto& q : pts) {
      if (q.realtime && dominates(q, p)) {
        p.pareto = false;
        break;
      }
    }
  }
}

struct SweepGrid {
  std::vector<double> clocks_hz;
  std::vector<std::int64_t> lanes;
};

/// Log-spaced values from lo to hi inclusive.
inline std::vector<double> log_space(double lo, double hi, int n) {
  detail::require(lo > 0 && hi >= lo && n >= 1, "log_space: invalid range");
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    out.push_back(std::round(lo * std::pow(hi / lo, f)));
  }
  return out;
}

/// Evaluate every grid point (sorted by clock, then lanes) and mark the
/// Pareto frontier among real-time designs.
inline std::vector<PowerBreakdown> sweep(const WorkloadProfile& w, const SweepGrid& grid,
                                         const CoefficientTable& c = {}) {
  detail::require(!grid.clocks_hz.empty() && !grid.lanes.empty(), "sweep: empty grid");
  auto clocks = grid.clocks_hz;
  auto lanes = grid.lanes;
  std::sort(clocks.begin(), clocks.end());
  std::sort(lanes.begin(), lanes.end());
  std::vector<PowerBreakdown> out;
  for (double f : clocks)
    for (auto p : lanes) out.push_back(estimate_power(w, make_design(w, f, p), c));
  mark_pareto(out);
  return out;
}

inline std::string sweep_csv(const std::vector<PowerBreakdown>& pts) {
  std::string s =
      "clock_hz,lanes,mac_uW,sram_dyn_uW,sram_static_uW,other_uW,total_uW,transistors,"
      "throughput_ms,latency_ms,realtime,pareto\n";
  char buf[512];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.0f,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.0f,%.6f,%.6f,%d,%d\n",
                  p.clock_hz, static_cast<long long>(p.lanes), p.mac_dynamic_uW,
                  p.sram_dynamic_uW, p.sram_static_uW, p.other_dynamic_uW, p.total_uW,
                  p.transistor_count, p.throughput_ms, p.latency_ms, p.realtime ? 1 : 0,
                  p.pareto ? 1 : 0);
    s += buf;
  }
  return s;
}

}  // namespace lmukws

#pragma once

// Deployed integer model. Every tensor is a QuantTensor; inference uses only
// integer arithmetic with 32-bit accumulators. Terms with different
// exponents are aligned to the smallest exponent by left shifts (exact),
// then the accumulator is requantized to the 7-bit activation grid.

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lmukws/lmu.hpp"
#include "lmukws/quant.hpp"

namespace lmukws {

struct LayerActivationExponents {
  int u = 0;
  int m = 0;
  int h = 0;
};

/// Bit widths and calibrated activation exponents of a model.
struct QuantPlan {
  int weight_bits = 4;
  int input_exp = -4;
  std::vector<LayerActivationExponents> layers;

  QuantSpec input_spec() const { return make_spec(kActivationBits, input_exp); }
};

struct LayerWeightExponents {
  int e_x = 0, e_h = 0, W_x = 0, W_m = 0, b = 0;
  std::vector<int> A_bar, B_bar;
};

struct WeightExponents {
  std::vector<LayerWeightExponents> layers;
  int W_out = 0;
  int b_out = 0;
};

template <typename Derived>
int tensor_exponent(const Eigen::MatrixBase<Derived>& w, int bits) {
  const double max_abs = w.size() == 0 ? 0.0 : w.cwiseAbs().maxCoeff();
  return covering_exponent(max_abs, bits);
}

/// Weight exponents follow from the weights (exact max). A bias exponent is
/// never finer than the finest product exponent of its sum, so the
/// accumulator exponent is always set by a matrix product.
inline WeightExponents plan_weight_exponents(const ModelGraph& model, const QuantPlan& plan) {
  detail::require_shape(plan.layers.size() == model.layers.size(),
                        "quant plan does not match model depth");
  const int wb = plan.weight_bits;
  WeightExponents out;
  int in_exp = plan.input_exp;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const auto& act = plan.layers[l];
    LayerWeightExponents le;
    le.e_x = tensor_exponent(layer.e_x, wb);
    le.e_h = tensor_exponent(layer.e_h, wb);
    le.W_x = tensor_exponent(layer.W_x, wb);
    le.W_m = tensor_exponent(layer.W_m, wb);
    const int finest = std::min(le.W_x + in_exp, le.W_m + act.m);
    le.b = std::max(tensor_exponent(layer.b, wb), finest);
    for (const auto& cell : layer.cells) {
      le.A_bar.push_back(tensor_exponent(cell.A_bar, kConstantBits));
      le.B_bar.push_back(tensor_exponent(cell.B_bar, kConstantBits));
    }
    out.layers.push_back(std::move(le));
    in_exp = act.h;
  }
  out.W_out = tensor_exponent(model.W_out, wb);
  out.b_out = std::max(tensor_exponent(model.b_out, wb), out.W_out + in_exp);
  return out;
}

/// Values of `w` rounded onto its quantization grid (as used by both the
/// training graph and, in integer form, the deployed model).
template <typename Derived>
Eigen::MatrixXd grid_values(const Eigen::MatrixBase<Derived>& w, const QuantSpec& spec) {
  Eigen::MatrixXd out(w.rows(), w.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      out(i, j) = dequantize_scalar(quantize_scalar(w(i, j), spec), spec);
  return out;
}

struct QuantizedLayer {
  std::vector<CellSpec> cells;
  QuantTensor e_x, e_h, W_x, W_m, b;
  std::vector<QuantTensor> A_bar, B_bar;
  QuantSpec u_spec, m_spec, h_spec;

  std::int64_t input_dim() const { return W_x.cols(); }
  std::int64_t hidden_dim() const { return W_x.rows(); }
  std::int64_t memory_dim() const { return W_m.cols(); }

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedModel {
  int input_dim = 0;
  double dt = 0.02;
  Discretization method = Discretization::kZeroOrderHold;
  int weight_bits = 4;
  QuantSpec input_spec;
  std::vector<QuantizedLayer> layers;
  QuantTensor W_out, b_out;
  std::vector<std::string> label_names;
  std::array<std::uint8_t, 32> frontend_hash{};
  // Per-bin feature normalization (32-bit fixed point); empty when unused.
  QuantTensor feature_mean, feature_inv_std;

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

namespace detail {

inline QuantTensor quantize_matrix(const Eigen::MatrixXd& w, const QuantSpec& spec) {
  std::vector<double> flat(static_cast<std::size_t>(w.size()));
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      flat[static_cast<std::size_t>(i * w.cols() + j)] = w(i, j);
  return quantize(flat, {w.rows(), w.cols()}, spec);
}

inline QuantTensor quantize_vector(const Eigen::VectorXd& v, const QuantSpec& spec) {
  std::vector<double> flat(v.data(), v.data() + v.size());
  return quantize(flat, {v.size()}, spec);
}

inline std::int64_t row_abs_sum(const QuantTensor& t, std::int64_t r) {
  std::int64_t s = 0;
  for (std::int64_t c = 0; c < t.cols(); ++c) s += std::abs(static_cast<std::int64_t>(t.at(r, c)));
  return s;
}

struct Term {
  const QuantTensor* weights;
  int exp;  // weight exponent + activation exponent
};

// Worst-case accumulator magnitude for every row of a sum of matrix terms
// (activations at most 2^(bits-1) in magnitude) plus an optional bias.
inline void check_row_bounds(const std::vector<Term>& terms, const QuantTensor* bias, int bias_exp,
                             const std::string& what) {
  int acc_exp = std::numeric_limits<int>::max();
  for (const auto& t : terms) acc_exp = std::min(acc_exp, t.exp);
  if (bias) acc_exp = std::min(acc_exp, bias_exp);
  const std::int64_t act_max = std::int64_t{1} << (kActivationBits - 1);
  const std::int64_t limit = std::numeric_limits<std::int32_t>::max();
  const std::int64_t rows = terms.front().weights->rows();
  for (std::int64_t r = 0; r < rows; ++r) {
    long double bound = 0;
    for (const auto& t : terms) {
      bound += static_cast<long double>(row_abs_sum(*t.weights, r)) * act_max *
               std::ldexp(1.0L, t.exp - acc_exp);
    }
    if (bias) {
      bound += std::abs(static_cast<long double>(bias->data[static_cast<std::size_t>(r)])) *
               std::ldexp(1.0L, bias_exp - acc_exp);
    }
    if (bound > static_cast<long double>(limit)) {
      throw ArgumentError(what + ": worst-case accumulator exceeds 32 bits");
    }
  }
}

}  // namespace detail

/// Verify that no input can overflow any 32-bit accumulator of the model.
inline void check_accumulator_bounds(const QuantizedModel& qm) {
  int in_exp = qm.input_spec.scale_exp;
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    const auto& L = qm.layers[l];
    const std::string name = "layer" + std::to_string(l);
    detail::check_row_bounds({{&L.e_x, L.e_x.spec.scale_exp + in_exp},
                              {&L.e_h, L.e_h.spec.scale_exp + L.h_spec.scale_exp}},
                             nullptr, 0, name + ".u");
    for (std::size_t k = 0; k < L.cells.size(); ++k) {
      QuantTensor b_col = L.B_bar[k];
      b_col.shape = {static_cast<std::int64_t>(b_col.size()), 1};
      detail::check_row_bounds({{&L.A_bar[k], L.A_bar[k].spec.scale_exp + L.m_spec.scale_exp},
                                {&b_col, L.B_bar[k].spec.scale_exp + L.u_spec.scale_exp}},
                               nullptr, 0, name + ".m");
    }
    detail::check_row_bounds({{&L.W_x, L.W_x.spec.scale_exp + in_exp},
                              {&L.W_m, L.W_m.spec.scale_exp + L.m_spec.scale_exp}},
                             &L.b, L.b.spec.scale_exp, name + ".h");
    in_exp = L.h_spec.scale_exp;
  }
  detail::check_row_bounds({{&qm.W_out, qm.W_out.spec.scale_exp + in_exp}}, &qm.b_out,
                           qm.b_out.spec.scale_exp, "output");
}

/// Freeze a float model into its deployed integer form under `plan`.
inline QuantizedModel freeze(const ModelGraph& model, const QuantPlan& plan) {
  model.validate();
  detail::require(plan.weight_bits == 4 || plan.weight_bits == 8, "weight bits must be 4 or 8");
  const auto ex = plan_weight_exponents(model, plan);
  const int wb = plan.weight_bits;
  QuantizedModel qm;
  qm.input_dim = model.input_dim;
  qm.weight_bits = wb;
  qm.input_spec = plan.input_spec();
  qm.label_names = model.label_names;
  const auto arch = model.arch();
  qm.dt = arch.dt;
  qm.method = arch.method;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const auto& le = ex.layers[l];
    const auto& act = plan.layers[l];
    QuantizedLayer ql;
    for (const auto& c : layer.cells) ql.cells.push_back({c.order, c.theta});
    ql.e_x = detail::quantize_matrix(layer.e_x, make_spec(wb, le.e_x));
    ql.e_h = detail::quantize_matrix(layer.e_h, make_spec(wb, le.e_h));
    ql.W_x = detail::quantize_matrix(layer.W_x, make_spec(wb, le.W_x));
    ql.W_m = detail::quantize_matrix(layer.W_m, make_spec(wb, le.W_m));
    ql.b = detail::quantize_vector(layer.b, make_spec(wb, le.b));
    for (std::size_t k = 0; k < layer.cells.size(); ++k) {
      ql.A_bar.push_back(
          detail::quantize_matrix(layer.cells[k].A_bar, make_spec(kConstantBits, le.A_bar[k])));
      ql.B_bar.push_back(
          detail::quantize_vector(layer.cells[k].B_bar, make_spec(kConstantBits, le.B_bar[k])));
    }
    ql.u_spec = make_spec(kActivationBits, act.u);
    ql.m_spec = make_spec(kActivationBits, act.m);
    ql.h_spec = make_spec(kActivationBits, act.h);
    qm.layers.push_back(std::move(ql));
  }
  qm.W_out = detail::quantize_matrix(model.W_out, make_spec(wb, ex.W_out));
  qm.b_out = detail::quantize_vector(model.b_out, make_spec(wb, ex.b_out));
  check_accumulator_bounds(qm);
  return qm;
}

struct IntLayerState {
  std::vector<std::int32_t> h;
  std::vector<std::int32_t> m;
};

struct IntStreamState {
  std::vector<IntLayerState> layers;

  static IntStreamState zeros(const QuantizedModel& qm) {
    IntStreamState s;
    for (const auto& L : qm.layers) {
      s.layers.push_back({std::vector<std::int32_t>(static_cast<std::size_t>(L.hidden_dim()), 0),
                          std::vector<std::int32_t>(static_cast<std::size_t>(L.memory_dim()), 0)});
    }
    return s;
  }

  void reset() {
    for (auto& l : layers) {
      std::fill(l.h.begin(), l.h.end(), 0);
      std::fill(l.m.begin(), l.m.end(), 0);
    }
  }
};

/// Per-step integer activations of one layer, for equivalence checks.
struct IntLayerTrace {
  std::vector<std::int32_t> u, m, h;
};

using IntStepTrace = std::vector<IntLayerTrace>;

struct IntLogits {
  std::int64_t frames = 0;
  int scale_exp = 0;                // logits = data * 2^scale_exp
  std::vector<std::int32_t> data;   // frames x 12, row-major

  std::int32_t at(std::int64_t t, int k) const {
    return data[static_cast<std::size_t>(t * kNumLabels + k)];
  }

  int argmax(std::int64_t t) const {
    int best = 0;
    for (int k = 1; k < kNumLabels; ++k)
      if (at(t, k) > at(t, best)) best = k;
    return best;
  }
};

namespace detail {

// 2^shift as an accumulator multiplier. Shifts of 31 or more only occur for
// terms that are identically zero (check_accumulator_bounds rejects anything
// else), so they contribute nothing.
inline std::int32_t shift_multiplier(int shift) {
  return shift >= 31 ? 0 : static_cast<std::int32_t>(std::int64_t{1} << shift);
}

// acc[r] += (W[r,:] . a) * 2^shift over a contiguous slice of `a`.
inline void accumulate_rows(const QuantTensor& W, const std::int32_t* a, int shift,
                            std::vector<std::int32_t>& acc) {
  const std::int64_t cols = W.cols();
  const std::int32_t mult = shift_multiplier(shift);
  for (std::int64_t r = 0; r < W.rows(); ++r) {
    const std::int32_t* w = W.data.data() + r * cols;
    std::int32_t dot = 0;
    for (std::int64_t c = 0; c < cols; ++c) dot += w[c] * a[c];
    acc[static_cast<std::size_t>(r)] += dot * mult;
  }
}

}  // namespace detail

/// Integer-only inference over T frames of quantized features (T x
/// input_dim, row-major, on the model's input grid). Continues from and
/// updates `state`. When `trace` is given, per-step activations are stored.
inline IntLogits quantized_forward(const QuantizedModel& qm, std::span<const std::int32_t> features,
                                   IntStreamState& state,
                                   std::vector<IntStepTrace>* trace = nullptr) {
  const auto n = static_cast<std::size_t>(qm.input_dim);
  detail::require_shape(n > 0 && features.size() % n == 0,
                        "quantized_forward: features are not a whole number of frames");
  detail::require_shape(state.layers.size() == qm.layers.size(),
                        "quantized_forward: state does not match model");
  const auto frames = static_cast<std::int64_t>(features.size() / n);
  IntLogits out;
  out.frames = frames;
  if (trace) trace->clear();

  // Alignment exponents are fixed per model.
  struct LayerPlan {
    int u_acc, u_sx, u_sh;
    std::vector<int> m_acc, m_sa, m_sb;
    int h_acc, h_sx, h_sm, h_sb;
  };
  std::vector<LayerPlan> plans;
  int in_exp = qm.input_spec.scale_exp;
  for (const auto& L : qm.layers) {
    LayerPlan p;
    const int ux = L.e_x.spec.scale_exp + in_exp, uh = L.e_h.spec.scale_exp + L.h_spec.scale_exp;
    p.u_acc = std::min(ux, uh);
    p.u_sx = ux - p.u_acc;
    p.u_sh = uh - p.u_acc;
    for (std::size_t k = 0; k < L.cells.size(); ++k) {
      const int ma = L.A_bar[k].spec.scale_exp + L.m_spec.scale_exp;
      const int mb = L.B_bar[k].spec.scale_exp + L.u_spec.scale_exp;
      const int acc = std::min(ma, mb);
      p.m_acc.push_back(acc);
      p.m_sa.push_back(ma - acc);
      p.m_sb.push_back(mb - acc);
    }
    const int hx = L.W_x.spec.scale_exp + in_exp, hm = L.W_m.spec.scale_exp + L.m_spec.scale_exp;
    const int hb = L.b.spec.scale_exp;
    p.h_acc = std::min({hx, hm, hb});
    p.h_sx = hx - p.h_acc;
    p.h_sm = hm - p.h_acc;
    p.h_sb = hb - p.h_acc;
    plans.push_back(std::move(p));
    in_exp = L.h_spec.scale_exp;
  }
  const int ox = qm.W_out.spec.scale_exp + in_exp, ob = qm.b_out.spec.scale_exp;
  out.scale_exp = std::min(ox, ob);
  const int o_sx = ox - out.scale_exp, o_sb = ob - out.scale_exp;
  out.data.resize(static_cast<std::size_t>(frames) * kNumLabels);

  std::vector<std::int32_t> x, u, acc;
  for (std::int64_t t = 0; t < frames; ++t) {
    x.assign(features.begin() + static_cast<std::ptrdiff_t>(t * n),
             features.begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
    if (trace) trace->emplace_back();
    for (std::size_t l = 0; l < qm.layers.size(); ++l) {
      const auto& L = qm.layers[l];
      const auto& p = plans[l];
      auto& st = state.layers[l];
      const auto c = L.cells.size();

      acc.assign(c, 0);
      detail::accumulate_rows(L.e_x, x.data(), p.u_sx, acc);
      detail::accumulate_rows(L.e_h, st.h.data(), p.u_sh, acc);
      u.resize(c);
      for (std::size_t k = 0; k < c; ++k) u[k] = requantize(acc[k], p.u_acc, L.u_spec);

      std::size_t offset = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const auto d = static_cast<std::size_t>(L.cells[k].order);
        acc.assign(d, 0);
        detail::accumulate_rows(L.A_bar[k], st.m.data() + offset, p.m_sa[k], acc);
        const std::int32_t bmult = detail::shift_multiplier(p.m_sb[k]);
        for (std::size_t i = 0; i < d; ++i) {
          acc[i] += L.B_bar[k].data[i] * u[k] * bmult;
          st.m[offset + i] = requantize(acc[i], p.m_acc[k], L.m_spec);
        }
        offset += d;
      }

      const auto h = static_cast<std::size_t>(L.hidden_dim());
      acc.assign(h, 0);
      detail::accumulate_rows(L.W_x, x.data(), p.h_sx, acc);
      detail::accumulate_rows(L.W_m, st.m.data(), p.h_sm, acc);
      const std::int32_t bmult = detail::shift_multiplier(p.h_sb);
      for (std::size_t r = 0; r < h; ++r) {
        acc[r] += L.b.data[r] * bmult;
        st.h[r] = std::max(0, requantize(acc[r], p.h_acc, L.h_spec));
      }
      if (trace) trace->back().push_back({u, st.m, st.h});
      x = st.h;
    }
    acc.assign(kNumLabels, 0);
    detail::accumulate_rows(qm.W_out, x.data(), o_sx, acc);
    const std::int32_t bmult = detail::shift_multiplier(o_sb);
    for (int k = 0; k < kNumLabels; ++k) {
      out.data[static_cast<std::size_t>(t * kNumLabels + k)] =
          acc[static_cast<std::size_t>(k)] + qm.b_out.data[static_cast<std::size_t>(k)] * bmult;
    }
  }
  return out;
}

/// Quantize real-valued feature frames (T x input_dim) onto the model's
/// input grid, row-major.
inline std::vector<std::int32_t> quantize_features(const QuantizedModel& qm,
                                                   const Eigen::MatrixXd& features) {
  detail::require_shape(features.cols() == qm.input_dim, "feature width mismatch");
  std::vector<std::int32_t> out(static_cast<std::size_t>(features.size()));
  for (Eigen::Index t = 0; t < features.rows(); ++t)
    for (Eigen::Index j = 0; j < features.cols(); ++j)
      out[static_cast<std::size_t>(t * features.cols() + j)] =
          quantize_scalar(features(t, j), qm.input_spec);
  return out;
}

// ---- size accounting -------------------------------------------------------

struct SizeOptions {
  bool include_output = true;
  bool include_biases = true;
};

struct NamedQuantTensor {
  std::string name;
  const QuantTensor* tensor;
  bool is_bias;
  bool is_constant;  // fixed memory matrices
  bool is_output;
};

inline std::vector<NamedQuantTensor> model_tensors(const QuantizedModel& qm) {
  std::vector<NamedQuantTensor> out;
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    const auto& L = qm.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "e_x", &L.e_x, false, false, false});
    out.push_back({p + "e_h", &L.e_h, false, false, false});
    out.push_back({p + "W_x", &L.W_x, false, false, false});
    out.push_back({p + "W_m", &L.W_m, false, false, false});
    out.push_back({p + "b", &L.b, true, false, false});
    for (std::size_t k = 0; k < L.cells.size(); ++k) {
      out.push_back({p + "cell" + std::to_string(k) + ".A_bar", &L.A_bar[k], false, true, false});
      out.push_back({p + "cell" + std::to_string(k) + ".B_bar", &L.B_bar[k], false, true, false});
    }
  }
  out.push_back({"out.W", &qm.W_out, false, false, true});
  out.push_back({"out.b", &qm.b_out, true, false, true});
  return out;
}

struct SizeRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t nonzero = 0;
  int bits = 0;
};

struct SizeReport {
  std::vector<SizeRow> rows;
  std::int64_t total_params = 0;
  std::int64_t nonzero_params = 0;
  double kbits = 0.0;

  double sparsity() const {
    return total_params == 0
               ? 0.0
               : 1.0 - static_cast<double>(nonzero_params) / static_cast<double>(total_params);
  }
};

/// Counted tensors exclude the fixed memory matrices; kbits counts only
/// nonzero parameters.
inline SizeReport size_report(const QuantizedModel& qm, const SizeOptions& opt = {}) {
  SizeReport rep;
  std::int64_t bits_total = 0;
  for (const auto& t : model_tensors(qm)) {
    if (t.is_constant) continue;
    if (t.is_output && !opt.include_output) continue;
    if (t.is_bias && !opt.include_biases) continue;
    SizeRow row{t.name, static_cast<std::int64_t>(t.tensor->size()),
                static_cast<std::int64_t>(t.tensor->nonzeros()), t.tensor->spec.bits};
    rep.total_params += row.params;
    rep.nonzero_params += row.nonzero;
    bits_total += row.nonzero * row.bits;
    rep.rows.push_back(std::move(row));
  }
  rep.kbits = static_cast<double>(bits_total) / 1000.0;
  return rep;
}

inline double model_size_kbits(const QuantizedModel& qm, const SizeOptions& opt = {}) {
  return size_report(qm, opt).kbits;
}

/// Trainable parameter count of an architecture.
inline std::int64_t parameter_count(const ArchConfig& cfg, const SizeOptions& opt = {}) {
  std::int64_t total = 0;
  std::int64_t n = cfg.input_dim;
  for (const auto& lc : cfg.layers) {
    const std::int64_t h = lc.hidden, c = static_cast<std::int64_t>(lc.cells.size());
    std::int64_t mem = 0;
    for (const auto& cs : lc.cells) mem += cs.order;
    total += c * n + c * h + h * n + h * mem;
    if (opt.include_biases) total += h;
    n = h;
  }
  if (opt.include_output) {
    total += kNumLabels * n;
    if (opt.include_biases) total += kNumLabels;
  }
  return total;
}

}  // namespace lmukws

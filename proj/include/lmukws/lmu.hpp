#pragma once

// Floating-point reference model: the fixed Legendre linear memory, the
// modified LMU layer (no nonlinear->linear feedback, no hidden
// self-recurrence) and the stacked model with a dense 12-way output.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lmukws/error.hpp"
#include "lmukws/rng.hpp"

namespace lmukws {

inline constexpr int kNumLabels = 12;

inline const std::vector<std::string>& standard_keywords() {
  static const std::vector<std::string> words = {
      "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"};
  return words;
}

inline std::vector<std::string> standard_labels() {
  auto labels = standard_keywords();
  labels.push_back("_silence_");
  labels.push_back("_unknown_");
  return labels;
}

inline constexpr int kSilenceLabel = 10;
inline constexpr int kUnknownLabel = 11;

struct ContinuousStateSpace {
  int order = 0;
  double theta = 0.0;
  Eigen::MatrixXd A;
  Eigen::VectorXd B;
};

/// Continuous-time Legendre delay system of the given order over a window
/// of `theta` seconds.
inline ContinuousStateSpace legendre_state_space(int order, double theta) {
  detail::require(order >= 1, "legendre_state_space: order must be >= 1");
  detail::require(theta > 0.0 && std::isfinite(theta),
                  "legendre_state_space: theta must be > 0");
  ContinuousStateSpace ss;
  ss.order = order;
  ss.theta = theta;
  ss.A.resize(order, order);
  ss.B.resize(order);
  for (int i = 0; i < order; ++i) {
    const double scale = (2.0 * i + 1.0) / theta;
    ss.B(i) = (i % 2 == 0 ? 1.0 : -1.0) * scale;
    for (int j = 0; j < order; ++j) {
      double sign;
      if (i < j) {
        sign = -1.0;
      } else {
        sign = ((i - j + 1) % 2 == 0) ? 1.0 : -1.0;
      }
      ss.A(i, j) = sign * scale;
    }
  }
  return ss;
}

enum class Discretization { kZeroOrderHold, kEuler };

struct DiscreteSystem {
  Eigen::MatrixXd A_bar;
  Eigen::VectorXd B_bar;
};

/// ZOH or forward-Euler discretization at step `dt`.
inline DiscreteSystem discretize(const ContinuousStateSpace& ss, double dt,
                                 Discretization method = Discretization::kZeroOrderHold) {
  detail::require(dt > 0.0 && std::isfinite(dt), "discretize: dt must be > 0");
  const Eigen::Index d = ss.A.rows();
  detail::require_shape(ss.A.cols() == d && ss.B.size() == d,
                        "discretize: A must be square and match B");
  DiscreteSystem out;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  if (method == Discretization::kEuler) {
    out.A_bar = I + ss.A * dt;
    out.B_bar = ss.B * dt;
    return out;
  }
  out.A_bar = (ss.A * dt).exp();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ss.A);
  if (lu.isInvertible()) {
    out.B_bar = lu.solve((out.A_bar - I) * ss.B);
  } else {
    // Integral of e^{A s} B over [0, dt] from the block exponential
    // exp([[A, B], [0, 0]] dt) = [[A_bar, B_bar], [0, 1]].
    Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(d + 1, d + 1);
    aug.topLeftCorner(d, d) = ss.A * dt;
    aug.topRightCorner(d, 1) = ss.B * dt;
    out.B_bar = aug.exp().topRightCorner(d, 1);
  }
  return out;
}

/// Fixed (never trained) linear memory of one cell.
struct LinearMemory {
  int order = 0;
  double theta = 0.0;
  double dt = 0.0;
  Discretization method = Discretization::kZeroOrderHold;
  Eigen::MatrixXd A_bar;
  Eigen::VectorXd B_bar;

  static LinearMemory create(int order, double theta, double dt,
                             Discretization method = Discretization::kZeroOrderHold) {
    LinearMemory mem;
    mem.order = order;
    mem.theta = theta;
    mem.dt = dt;
    mem.method = method;
    auto sys = discretize(legendre_state_space(order, theta), dt, method);
    mem.A_bar = std::move(sys.A_bar);
    mem.B_bar = std::move(sys.B_bar);
    return mem;
  }
};

/// A linear memory together with its state vector m.
struct MemoryCell {
  LinearMemory memory;
  Eigen::VectorXd m;

  explicit MemoryCell(LinearMemory mem)
      : memory(std::move(mem)), m(Eigen::VectorXd::Zero(memory.order)) {}

  void reset() { m.setZero(); }

  void step(double u) { m = memory.A_bar * m + memory.B_bar * u; }
};

/// Shifted Legendre polynomial on [0, 1], P_i(2x - 1), by the three-term
/// recurrence.
inline double shifted_legendre(int i, double x) {
  const double t = 2.0 * x - 1.0;
  if (i == 0) return 1.0;
  double p0 = 1.0, p1 = t;
  for (int n = 1; n < i; ++n) {
    const double p2 = ((2.0 * n + 1.0) * t * p1 - n * p0) / (n + 1.0);
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

/// Reconstruct u(t - r * theta) from the memory state; r = 0 is the most
/// recent input and r = 1 is one window ago.
inline double decode_window(const MemoryCell& cell, double r) {
  detail::require(r >= 0.0 && r <= 1.0, "decode_window: r must lie in [0, 1]");
  double acc = 0.0;
  for (int i = 0; i < cell.memory.order; ++i) {
    acc += cell.m(i) * shifted_legendre(i, r);
  }
  return acc;
}

struct CellSpec {
  int order = 8;
  double theta = 1.0;

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

struct LayerConfig {
  int hidden = 0;
  std::vector<CellSpec> cells;
};

/// Architecture of a stacked LMU model.
struct ArchConfig {
  int input_dim = 40;
  std::vector<LayerConfig> layers;
  double dt = 0.02;
  Discretization method = Discretization::kZeroOrderHold;
};

struct LmuLayerParams {
  Eigen::MatrixXd e_x;  // cells x input
  Eigen::MatrixXd e_h;  // cells x hidden
  Eigen::MatrixXd W_x;  // hidden x input
  Eigen::MatrixXd W_m;  // hidden x (sum of cell orders)
  Eigen::VectorXd b;    // hidden
  std::vector<LinearMemory> cells;

  Eigen::Index input_dim() const { return W_x.cols(); }
  Eigen::Index hidden_dim() const { return W_x.rows(); }
  Eigen::Index num_cells() const { return static_cast<Eigen::Index>(cells.size()); }

  Eigen::Index memory_dim() const {
    Eigen::Index total = 0;
    for (const auto& c : cells) total += c.order;
    return total;
  }

  void validate() const {
    const auto n = input_dim(), h = hidden_dim(), c = num_cells();
    detail::require_shape(c >= 1, "LMU layer needs at least one memory cell");
    detail::require_shape(e_x.rows() == c && e_x.cols() == n, "e_x shape mismatch");
    detail::require_shape(e_h.rows() == c && e_h.cols() == h, "e_h shape mismatch");
    detail::require_shape(W_m.rows() == h && W_m.cols() == memory_dim(),
                          "W_m columns must equal total memory dimension");
    detail::require_shape(b.size() == h, "bias shape mismatch");
    for (const auto& cell : cells) {
      detail::require_shape(cell.A_bar.rows() == cell.order && cell.A_bar.cols() == cell.order &&
                                cell.B_bar.size() == cell.order,
                            "memory cell matrices do not match order");
    }
  }
};

struct ModelGraph {
  int input_dim = 0;
  std::vector<LmuLayerParams> layers;
  Eigen::MatrixXd W_out;  // labels x last hidden (or input when no layers)
  Eigen::VectorXd b_out;
  std::vector<std::string> label_names;

  Eigen::Index feature_dim_into_output() const {
    return layers.empty() ? input_dim : layers.back().hidden_dim();
  }

  void validate() const {
    Eigen::Index n = input_dim;
    for (const auto& layer : layers) {
      detail::require_shape(layer.input_dim() == n, "layer input does not match previous output");
      layer.validate();
      n = layer.hidden_dim();
    }
    detail::require_shape(W_out.rows() == kNumLabels && b_out.size() == kNumLabels,
                          "output layer must produce 12 logits");
    detail::require_shape(W_out.cols() == n, "output layer input mismatch");
  }

  ArchConfig arch() const {
    ArchConfig cfg;
    cfg.input_dim = input_dim;
    for (const auto& layer : layers) {
      LayerConfig lc;
      lc.hidden = static_cast<int>(layer.hidden_dim());
      for (const auto& c : layer.cells) lc.cells.push_back({c.order, c.theta});
      cfg.layers.push_back(lc);
      if (!layer.cells.empty()) {
        cfg.dt = layer.cells.front().dt;
        cfg.method = layer.cells.front().method;
      }
    }
    return cfg;
  }
};

/// View of one trainable tensor. Biases are exposed as single-column
/// matrices; the fixed memory matrices are never listed.
struct TensorView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool is_bias = false;

  Eigen::Map<Eigen::MatrixXd> map() const { return {data, rows, cols}; }
  Eigen::Index size() const { return rows * cols; }
};

inline std::vector<TensorView> trainable_tensors(ModelGraph& model) {
  std::vector<TensorView> out;
  auto mat = [&out](const std::string& name, auto& m) {
    out.push_back({name, m.data(), m.rows(), m.cols(), false});
  };
  auto vec = [&out](const std::string& name, auto& v) {
    out.push_back({name, v.data(), v.size(), 1, true});
  };
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    mat(prefix + "e_x", layer.e_x);
    mat(prefix + "e_h", layer.e_h);
    mat(prefix + "W_x", layer.W_x);
    mat(prefix + "W_m", layer.W_m);
    vec(prefix + "b", layer.b);
  }
  mat("out.W", model.W_out);
  vec("out.b", model.b_out);
  return out;
}

/// Build a model with the given architecture and all trainable tensors zero.
inline ModelGraph make_model(const ArchConfig& cfg,
                             std::vector<std::string> labels = standard_labels()) {
  detail::require(cfg.input_dim >= 1, "input_dim must be >= 1");
  detail::require(labels.size() == kNumLabels, "model needs exactly 12 label names");
  ModelGraph model;
  model.input_dim = cfg.input_dim;
  model.label_names = std::move(labels);
  Eigen::Index n = cfg.input_dim;
  for (const auto& lc : cfg.layers) {
    detail::require(lc.hidden >= 1, "hidden width must be >= 1");
    detail::require(!lc.cells.empty(), "each layer needs at least one memory cell");
    LmuLayerParams layer;
    for (const auto& cs : lc.cells) {
      layer.cells.push_back(LinearMemory::create(cs.order, cs.theta, cfg.dt, cfg.method));
    }
    const auto c = layer.num_cells();
    layer.e_x = Eigen::MatrixXd::Zero(c, n);
    layer.e_h = Eigen::MatrixXd::Zero(c, lc.hidden);
    layer.W_x = Eigen::MatrixXd::Zero(lc.hidden, n);
    layer.W_m = Eigen::MatrixXd::Zero(lc.hidden, layer.memory_dim());
    layer.b = Eigen::VectorXd::Zero(lc.hidden);
    model.layers.push_back(std::move(layer));
    n = lc.hidden;
  }
  model.W_out = Eigen::MatrixXd::Zero(kNumLabels, n);
  model.b_out = Eigen::VectorXd::Zero(kNumLabels);
  return model;
}

/// Glorot-style uniform initialization of all trainable tensors.
inline void init_params(ModelGraph& model, std::uint64_t seed) {
  Rng rng(seed);
  auto fill = [&rng](Eigen::MatrixXd& w, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-limit, limit);
  };
  for (auto& layer : model.layers) {
    const double n = static_cast<double>(layer.input_dim());
    const double h = static_cast<double>(layer.hidden_dim());
    fill(layer.e_x, n, 1.0);
    fill(layer.e_h, h, 1.0);
    layer.e_h *= 0.5;
    fill(layer.W_x, n + layer.memory_dim(), h);
    fill(layer.W_m, n + layer.memory_dim(), h);
    layer.b.setZero();
  }
  fill(model.W_out, static_cast<double>(model.W_out.cols()), kNumLabels);
  model.b_out.setZero();
}

struct LayerState {
  Eigen::VectorXd h;  // h_{t-1}
  Eigen::VectorXd m;  // concatenated m_{t-1} of all cells
};

/// Recurrent state of one stream. Only reset explicitly.
struct StreamRecurrentState {
  std::vector<LayerState> layers;

  static StreamRecurrentState zeros(const ModelGraph& model) {
    StreamRecurrentState s;
    for (const auto& layer : model.layers) {
      s.layers.push_back({Eigen::VectorXd::Zero(layer.hidden_dim()),
                          Eigen::VectorXd::Zero(layer.memory_dim())});
    }
    return s;
  }

  void reset() {
    for (auto& l : layers) {
      l.h.setZero();
      l.m.setZero();
    }
  }
};

/// One time step of a layer. Order: u_t from x_t and h_{t-1}; m_t update;
/// h_t from x_t and the new m_t.
inline Eigen::VectorXd lmu_layer_step(const LmuLayerParams& p, LayerState& state,
                                      const Eigen::VectorXd& x) {
  detail::require_shape(x.size() == p.input_dim(), "lmu_layer_step: input size mismatch");
  detail::require_shape(state.h.size() == p.hidden_dim() && state.m.size() == p.memory_dim(),
                        "lmu_layer_step: state size mismatch");
  const Eigen::VectorXd u = p.e_x * x + p.e_h * state.h;
  Eigen::Index offset = 0;
  for (Eigen::Index k = 0; k < p.num_cells(); ++k) {
    const auto& cell = p.cells[k];
    auto block = state.m.segment(offset, cell.order);
    block = cell.A_bar * block + cell.B_bar * u(k);
    offset += cell.order;
  }
  Eigen::VectorXd h = (p.W_x * x + p.W_m * state.m + p.b).cwiseMax(0.0);
  state.h = h;
  return h;
}

/// Run `features` (T x input_dim, one frame per row) through the model,
/// continuing from and updating `state`. Returns T x 12 logits.
inline Eigen::MatrixXd model_forward(const ModelGraph& model, const Eigen::MatrixXd& features,
                                     StreamRecurrentState& state) {
  detail::require_shape(features.cols() == model.input_dim, "model_forward: feature width mismatch");
  detail::require(features.rows() >= 1, "model_forward: need at least one frame");
  detail::require_shape(state.layers.size() == model.layers.size(),
                        "model_forward: state does not match model");
  Eigen::MatrixXd logits(features.rows(), kNumLabels);
  for (Eigen::Index t = 0; t < features.rows(); ++t) {
    Eigen::VectorXd x = features.row(t).transpose();
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      x = lmu_layer_step(model.layers[l], state.layers[l], x);
    }
    logits.row(t) = (model.W_out * x + model.b_out).transpose();
  }
  return logits;
}

}  // namespace lmukws

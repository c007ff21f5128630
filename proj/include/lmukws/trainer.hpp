#pragma once

// Training of LMU models: a double-precision graph (optionally with fake
// quantization matching the deployed integer kernels), full backpropagation
// through time, Adam, calibration of activation exponents, gradual
// magnitude pruning and deployment freeze.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "lmukws/dataset.hpp"
#include "lmukws/lmu.hpp"
#include "lmukws/prune.hpp"
#include "lmukws/qmodel.hpp"
#include "lmukws/serialize.hpp"

namespace lmukws {

// ---- training graph --------------------------------------------------------

struct GraphLayer {
  Eigen::MatrixXd e_x, e_h, W_x, W_m;
  Eigen::VectorXd b;
  std::vector<Eigen::MatrixXd> A;
  std::vector<Eigen::VectorXd> B;
  QuantSpec u_spec, m_spec, h_spec;

  Eigen::Index hidden_dim() const { return W_x.rows(); }
  Eigen::Index memory_dim() const { return W_m.cols(); }
};

/// Effective tensors of one forward pass: the float weights, or (HAT) their
/// grid values together with the 8-bit memory constants.
struct TrainingGraph {
  bool quantized = false;
  QuantSpec input_spec;
  std::vector<GraphLayer> layers;
  Eigen::MatrixXd W_out;
  Eigen::VectorXd b_out;
};

inline TrainingGraph build_graph(const ModelGraph& model, const QuantPlan* plan = nullptr) {
  model.validate();
  TrainingGraph g;
  g.quantized = plan != nullptr;
  std::optional<WeightExponents> ex;
  int wb = 0;
  if (plan) {
    ex = plan_weight_exponents(model, *plan);
    wb = plan->weight_bits;
    g.input_spec = plan->input_spec();
  }
  auto q = [&](const auto& w, int bits, int e) -> Eigen::MatrixXd {
    if (!plan) return w;
    return grid_values(w, make_spec(bits, e));
  };
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    GraphLayer gl;
    const LayerWeightExponents le = ex ? ex->layers[l] : LayerWeightExponents{};
    gl.e_x = q(L.e_x, wb, le.e_x);
    gl.e_h = q(L.e_h, wb, le.e_h);
    gl.W_x = q(L.W_x, wb, le.W_x);
    gl.W_m = q(L.W_m, wb, le.W_m);
    gl.b = q(L.b, wb, le.b);
    for (std::size_t k = 0; k < L.cells.size(); ++k) {
      const auto& c = L.cells[k];
      gl.A.push_back(plan ? grid_values(c.A_bar, make_spec(kConstantBits, le.A_bar[k])) : c.A_bar);
      Eigen::MatrixXd bb = plan ? grid_values(c.B_bar, make_spec(kConstantBits, le.B_bar[k]))
                                : Eigen::MatrixXd(c.B_bar);
      gl.B.push_back(bb.col(0));
    }
    if (plan) {
      gl.u_spec = make_spec(kActivationBits, plan->layers[l].u);
      gl.m_spec = make_spec(kActivationBits, plan->layers[l].m);
      gl.h_spec = make_spec(kActivationBits, plan->layers[l].h);
    }
    g.layers.push_back(std::move(gl));
  }
  g.W_out = plan ? grid_values(model.W_out, make_spec(wb, ex->W_out)) : model.W_out;
  g.b_out = plan ? Eigen::VectorXd(grid_values(model.b_out, make_spec(wb, ex->b_out)).col(0))
                 : model.b_out;
  return g;
}

struct GraphState {
  std::vector<Eigen::VectorXd> h, m;

  static GraphState zeros(const TrainingGraph& g) {
    GraphState s;
    for (const auto& L : g.layers) {
      s.h.push_back(Eigen::VectorXd::Zero(L.hidden_dim()));
      s.m.push_back(Eigen::VectorXd::Zero(L.memory_dim()));
    }
    return s;
  }
};

/// Per-layer activations over a sequence (one column per step) and the
/// straight-through masks needed by the backward pass.
struct LayerTape {
  Eigen::MatrixXd x, u, u_mask, m, m_mask, h, h_mask;
  Eigen::VectorXd h0, m0;
};

struct SequenceTape {
  std::vector<LayerTape> layers;
};

namespace detail {

inline void fake_quant_inplace(Eigen::Ref<Eigen::VectorXd> v, Eigen::Ref<Eigen::VectorXd> mask,
                               const QuantSpec& spec) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto r = fake_quant(v(i), spec);
    v(i) = r.value;
    mask(i) = r.grad_mask;
  }
}

}  // namespace detail

/// Forward pass over T frames (T x input_dim), continuing from `state`.
/// Returns T x 12 logits; fills `tape` when given.
inline Eigen::MatrixXd graph_forward(const TrainingGraph& g, const Eigen::MatrixXd& features,
                                     GraphState& state, SequenceTape* tape = nullptr) {
  const Eigen::Index T = features.rows();
  Eigen::MatrixXd logits(T, kNumLabels);
  if (tape) {
    tape->layers.assign(g.layers.size(), {});
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      const auto& L = g.layers[l];
      auto& lt = tape->layers[l];
      lt.x.resize(L.W_x.cols(), T);
      lt.u.resize(L.e_x.rows(), T);
      lt.u_mask.resize(L.e_x.rows(), T);
      lt.m.resize(L.memory_dim(), T);
      lt.m_mask.resize(L.memory_dim(), T);
      lt.h.resize(L.hidden_dim(), T);
      lt.h_mask.resize(L.hidden_dim(), T);
      lt.h0 = state.h[l];
      lt.m0 = state.m[l];
    }
  }
  Eigen::VectorXd x, u, um, mm, z, hm;
  for (Eigen::Index t = 0; t < T; ++t) {
    x = features.row(t).transpose();
    if (g.quantized) {
      for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = fake_quant(x(i), g.input_spec).value;
    }
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      const auto& L = g.layers[l];
      auto& h = state.h[l];
      auto& m = state.m[l];
      if (tape) tape->layers[l].x.col(t) = x;

      u = L.e_x * x + L.e_h * h;
      um = Eigen::VectorXd::Ones(u.size());
      if (g.quantized) detail::fake_quant_inplace(u, um, L.u_spec);

      Eigen::Index off = 0;
      for (std::size_t k = 0; k < L.A.size(); ++k) {
        const auto d = L.A[k].rows();
        Eigen::VectorXd next = L.A[k] * m.segment(off, d) + L.B[k] * u(static_cast<Eigen::Index>(k));
        m.segment(off, d) = next;
        off += d;
      }
      mm = Eigen::VectorXd::Ones(m.size());
      if (g.quantized) detail::fake_quant_inplace(m, mm, L.m_spec);

      z = L.W_x * x + L.W_m * m + L.b;
      hm.resize(z.size());
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double r = z(i) > 0.0 ? z(i) : 0.0;
        if (g.quantized) {
          const auto fq = fake_quant(r, L.h_spec);
          h(i) = fq.value;
          hm(i) = z(i) > 0.0 ? fq.grad_mask : 0.0;
        } else {
          h(i) = r;
          hm(i) = z(i) > 0.0 ? 1.0 : 0.0;
        }
      }
      if (tape) {
        auto& lt = tape->layers[l];
        lt.u.col(t) = u;
        lt.u_mask.col(t) = um;
        lt.m.col(t) = m;
        lt.m_mask.col(t) = mm;
        lt.h.col(t) = h;
        lt.h_mask.col(t) = hm;
      }
      x = h;
    }
    logits.row(t) = (g.W_out * x + g.b_out).transpose();
  }
  return logits;
}

/// Gradients in trainable_tensors() order (biases as single columns).
struct GradientSet {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> tensors;

  static GradientSet zeros_like(ModelGraph& model) {
    GradientSet g;
    for (const auto& t : trainable_tensors(model)) {
      g.names.push_back(t.name);
      g.tensors.push_back(Eigen::MatrixXd::Zero(t.rows, t.cols));
    }
    return g;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& t : tensors) s += t.squaredNorm();
    return std::sqrt(s);
  }
};

/// Accumulate gradients of a sequence whose loss depends only on the final
/// frame logits, given dL/dlogits for that frame.
inline void graph_backward(const TrainingGraph& g, const SequenceTape& tape,
                           const Eigen::VectorXd& dlogits, GradientSet& grads) {
  const auto nl = g.layers.size();
  const Eigen::Index T = nl ? tape.layers[0].x.cols() : 0;
  auto& dWout = grads.tensors[5 * nl];
  auto& dbout = grads.tensors[5 * nl + 1];
  if (nl == 0) return;
  const Eigen::VectorXd h_last = tape.layers[nl - 1].h.col(T - 1);
  dWout.noalias() += dlogits * h_last.transpose();
  dbout.col(0) += dlogits;

  std::vector<Eigen::VectorXd> dh_next(nl), dm_next(nl);
  std::vector<Eigen::MatrixXd> dZ(nl), dU(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    dh_next[l] = Eigen::VectorXd::Zero(g.layers[l].hidden_dim());
    dm_next[l] = Eigen::VectorXd::Zero(g.layers[l].memory_dim());
    dZ[l] = Eigen::MatrixXd::Zero(g.layers[l].hidden_dim(), T);
    dU[l] = Eigen::MatrixXd::Zero(g.layers[l].e_x.rows(), T);
  }
  Eigen::VectorXd dx_above, dz, dm, du;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    for (std::size_t li = nl; li-- > 0;) {
      const auto& L = g.layers[li];
      const auto& lt = tape.layers[li];
      Eigen::VectorXd dh = dh_next[li];
      if (li + 1 < nl) dh += dx_above;
      if (li + 1 == nl && t == T - 1) dh.noalias() += g.W_out.transpose() * dlogits;
      dz = dh.cwiseProduct(lt.h_mask.col(t));
      dZ[li].col(t) = dz;
      Eigen::VectorXd dx = L.W_x.transpose() * dz;
      dm = dm_next[li];
      dm.noalias() += L.W_m.transpose() * dz;
      dm = dm.cwiseProduct(lt.m_mask.col(t));
      du.resize(static_cast<Eigen::Index>(L.A.size()));
      Eigen::VectorXd dm_prev(dm.size());
      Eigen::Index off = 0;
      for (std::size_t k = 0; k < L.A.size(); ++k) {
        const auto d = L.A[k].rows();
        du(static_cast<Eigen::Index>(k)) = L.B[k].dot(dm.segment(off, d));
        dm_prev.segment(off, d).noalias() = L.A[k].transpose() * dm.segment(off, d);
        off += d;
      }
      du = du.cwiseProduct(lt.u_mask.col(t));
      dU[li].col(t) = du;
      dx.noalias() += L.e_x.transpose() * du;
      dh_next[li].noalias() = L.e_h.transpose() * du;
      dm_next[li] = dm_prev;
      dx_above = dx;
    }
  }
  for (std::size_t l = 0; l < nl; ++l) {
    const auto& lt = tape.layers[l];
    Eigen::MatrixXd Hprev(lt.h.rows(), T);
    Hprev.col(0) = lt.h0;
    if (T > 1) Hprev.rightCols(T - 1) = lt.h.leftCols(T - 1);
    grads.tensors[5 * l + 0].noalias() += dU[l] * lt.x.transpose();
    grads.tensors[5 * l + 1].noalias() += dU[l] * Hprev.transpose();
    grads.tensors[5 * l + 2].noalias() += dZ[l] * lt.x.transpose();
    grads.tensors[5 * l + 3].noalias() += dZ[l] * lt.m.transpose();
    grads.tensors[5 * l + 4].col(0) += dZ[l].rowwise().sum();
  }
}

struct Example {
  const Eigen::MatrixXd* features;
  int label;
};

struct ForwardBackwardResult {
  double loss = 0.0;
  int correct = 0;
  GradientSet grads;
};

/// Mean softmax cross-entropy on final-frame logits over a batch and its
/// exact gradient. `plan` enables the fake-quantized (HAT) graph.
inline ForwardBackwardResult forward_backward(ModelGraph& model, std::span<const Example> batch,
                                              const QuantPlan* plan = nullptr) {
  detail::require(!batch.empty(), "forward_backward: empty batch");
  const auto g = build_graph(model, plan);
  ForwardBackwardResult res;
  res.grads = GradientSet::zeros_like(model);
  SequenceTape tape;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    detail::require(ex.label >= 0 && ex.label < kNumLabels, "forward_backward: label out of range");
    auto state = GraphState::zeros(g);
    const auto logits = graph_forward(g, *ex.features, state, &tape);
    const Eigen::VectorXd z = logits.row(logits.rows() - 1).transpose();
    const double zmax = z.maxCoeff();
    const Eigen::VectorXd e = (z.array() - zmax).exp();
    const double sum = e.sum();
    const double loss = std::log(sum) + zmax - z(ex.label);
    if (!std::isfinite(loss)) {
      throw TrainingError("non-finite loss (logit max " + std::to_string(zmax) + ", label " +
                          std::to_string(ex.label) + ")");
    }
    res.loss += loss * inv_n;
    Eigen::Index arg = 0;
    z.maxCoeff(&arg);
    if (arg == ex.label) ++res.correct;
    Eigen::VectorXd d = e / sum;
    d(ex.label) -= 1.0;
    graph_backward(g, tape, d * inv_n, res.grads);
  }
  return res;
}

// ---- optimizer -------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables
  int batch_size = 32;
  std::int64_t steps = 600;
  std::int64_t quant_on_step = 400;  // < 0: never (float only)
  int weight_bits = 4;
  double calib_percentile = 99.9;
  int calib_examples = 256;
  std::int64_t prune_start = 0;
  std::int64_t prune_end = 0;
  double target_sparsity = 0.0;
  std::int64_t prune_every = 10;
  std::int64_t eval_every = 25;
  std::uint64_t seed = 1;

  void validate() const {
    detail::require(learning_rate > 0 && batch_size >= 1 && steps >= 1, "train config: invalid lr/batch/steps");
    detail::require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && epsilon > 0,
                    "train config: invalid Adam hyperparameters");
    detail::require(target_sparsity >= 0.0 && target_sparsity < 1.0, "train config: sparsity must be in [0, 1)");
    detail::require(target_sparsity == 0.0 || (prune_start >= 0 && prune_end >= prune_start && prune_end <= steps),
                    "train config: pruning schedule must satisfy 0 <= start <= end <= steps");
    detail::require(quant_on_step < steps, "train config: quant_on_step must be before the last step");
    detail::require(weight_bits == 4 || weight_bits == 8, "train config: weight bits must be 4 or 8");
    detail::require(calib_percentile > 0 && calib_percentile <= 100, "train config: percentile in (0, 100]");
    detail::require(prune_every >= 1 && eval_every >= 1, "train config: intervals must be >= 1");
  }
};

struct AdamState {
  std::vector<Eigen::MatrixXd> m, v;
  std::int64_t t = 0;
};

/// One Adam update. Pruned weights (mask 0) receive no update and are kept
/// at exactly zero.
inline void adam_step(ModelGraph& model, GradientSet grads, AdamState& st, const TrainConfig& cfg,
                      const PruneMask* mask = nullptr) {
  auto views = trainable_tensors(model);
  if (st.m.empty()) {
    for (const auto& v : views) {
      st.m.push_back(Eigen::MatrixXd::Zero(v.rows, v.cols));
      st.v.push_back(Eigen::MatrixXd::Zero(v.rows, v.cols));
    }
  }
  detail::require_shape(grads.tensors.size() == views.size() && st.m.size() == views.size(),
                        "adam_step: gradient layout mismatch");
  if (cfg.clip_norm > 0.0) {
    const double n = grads.norm();
    if (n > cfg.clip_norm) {
      for (auto& t : grads.tensors) t *= cfg.clip_norm / n;
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::size_t mi = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto w = views[i].map();
    const std::uint8_t* keep = nullptr;
    if (!views[i].is_bias) {
      if (mask && !mask->empty()) keep = mask->keep[mi].data();
      ++mi;
    }
    auto& g = grads.tensors[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      if (keep && !keep[j]) {
        w.data()[j] = 0.0;
        continue;
      }
      const double mh = st.m[i].data()[j] / bc1;
      const double vh = st.v[i].data()[j] / bc2;
      w.data()[j] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
  }
}

// ---- calibration and evaluation -------------------------------------------

/// Activation exponents covering the given percentile of |value| observed
/// in the float graph on `examples`.
inline QuantPlan calibrate(const ModelGraph& model, std::span<const Example> examples,
                           int weight_bits, double percentile = 99.9) {
  detail::require(!examples.empty(), "calibrate: no calibration data");
  const auto g = build_graph(model);
  std::vector<double> xs;
  std::vector<std::vector<double>> us(g.layers.size()), ms(g.layers.size()), hs(g.layers.size());
  SequenceTape tape;
  for (const auto& ex : examples) {
    auto state = GraphState::zeros(g);
    graph_forward(g, *ex.features, state, &tape);
    const auto& f = *ex.features;
    xs.insert(xs.end(), f.data(), f.data() + f.size());
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      const auto& lt = tape.layers[l];
      us[l].insert(us[l].end(), lt.u.data(), lt.u.data() + lt.u.size());
      ms[l].insert(ms[l].end(), lt.m.data(), lt.m.data() + lt.m.size());
      hs[l].insert(hs[l].end(), lt.h.data(), lt.h.data() + lt.h.size());
    }
  }
  auto exp_of = [&](std::vector<double>& v) {
    return covering_exponent(abs_percentile(std::move(v), percentile), kActivationBits);
  };
  QuantPlan plan;
  plan.weight_bits = weight_bits;
  plan.input_exp = exp_of(xs);
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    plan.layers.push_back({exp_of(us[l]), exp_of(ms[l]), exp_of(hs[l])});
  }
  return plan;
}

enum class EvalMode { kOffline, kStreaming };

inline int argmax_row(const Eigen::MatrixXd& logits, Eigen::Index t) {
  int best = 0;
  for (int k = 1; k < kNumLabels; ++k)
    if (logits(t, k) > logits(t, best)) best = k;
  return best;
}

/// Final-frame predictions of the training graph. Offline resets the state
/// per utterance; streaming threads it through all utterances in order.
inline std::vector<int> predict_graph(const TrainingGraph& g,
                                      std::span<const Eigen::MatrixXd* const> utterances,
                                      EvalMode mode = EvalMode::kOffline) {
  std::vector<int> out;
  auto state = GraphState::zeros(g);
  for (const auto* f : utterances) {
    if (mode == EvalMode::kOffline) state = GraphState::zeros(g);
    const auto logits = graph_forward(g, *f, state);
    out.push_back(argmax_row(logits, logits.rows() - 1));
  }
  return out;
}

/// Final-frame predictions of the deployed integer model.
inline std::vector<int> predict_deployed(const QuantizedModel& qm,
                                         std::span<const Eigen::MatrixXd* const> utterances,
                                         EvalMode mode = EvalMode::kOffline) {
  std::vector<int> out;
  auto state = IntStreamState::zeros(qm);
  for (const auto* f : utterances) {
    if (mode == EvalMode::kOffline) state.reset();
    const auto q = quantize_features(qm, *f);
    const auto logits = quantized_forward(qm, q, state);
    out.push_back(logits.argmax(logits.frames - 1));
  }
  return out;
}

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) throw DataError("cannot evaluate an empty split");
  detail::require_shape(predictions.size() == labels.size(), "accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// ---- data preparation ------------------------------------------------------

inline constexpr int kNormalizerExp = -16;

/// Normalized features with train/val/test index lists.
struct TrainData {
  std::vector<Eigen::MatrixXd> features;
  std::vector<int> labels;
  std::vector<std::size_t> train, val, test;
  FeatureNormalizer normalizer;
  QuantTensor mean_q, inv_std_q;

  std::vector<const Eigen::MatrixXd*> feature_ptrs(std::span<const std::size_t> idx) const {
    std::vector<const Eigen::MatrixXd*> out;
    for (auto i : idx) out.push_back(&features[i]);
    return out;
  }

  std::vector<int> label_list(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

/// Per-bin statistics of the training split, stored as 32-bit fixed point;
/// the dequantized values are what both training and deployment apply.
inline TrainData prepare_training_data(FeatureSet raw) {
  TrainData d;
  d.labels = std::move(raw.labels);
  for (std::size_t i = 0; i < raw.splits.size(); ++i) {
    switch (raw.splits[i]) {
      case Split::kTrain: d.train.push_back(i); break;
      case Split::kValidation: d.val.push_back(i); break;
      case Split::kTest: d.test.push_back(i); break;
    }
  }
  if (d.train.empty()) throw DataError("training split is empty");
  const auto bins = raw.features[d.train.front()].cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(bins), sq = Eigen::VectorXd::Zero(bins);
  double frames = 0;
  for (auto i : d.train) {
    const auto& f = raw.features[i];
    sum += f.colwise().sum().transpose();
    sq += f.array().square().matrix().colwise().sum().transpose();
    frames += static_cast<double>(f.rows());
  }
  const Eigen::VectorXd mean = sum / frames;
  const Eigen::VectorXd var = (sq / frames - mean.cwiseProduct(mean)).cwiseMax(1e-12);
  const Eigen::VectorXd inv_std = var.cwiseSqrt().cwiseInverse();
  const auto spec = make_spec(32, kNormalizerExp);
  d.mean_q = detail::quantize_vector(mean, spec);
  d.inv_std_q = detail::quantize_vector(inv_std, spec);
  const auto mq = dequantize(d.mean_q), iq = dequantize(d.inv_std_q);
  d.normalizer.mean = Eigen::Map<const Eigen::VectorXd>(mq.data(), bins);
  d.normalizer.inv_std = Eigen::Map<const Eigen::VectorXd>(iq.data(), bins);
  d.features = std::move(raw.features);
  for (auto& f : d.features) d.normalizer.apply(f);
  return d;
}

inline FeatureNormalizer normalizer_from_model(const QuantizedModel& qm) {
  FeatureNormalizer n;
  if (qm.feature_mean.data.empty()) return n;
  const auto m = dequantize(qm.feature_mean), s = dequantize(qm.feature_inv_std);
  n.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  n.inv_std = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
  return n;
}

// ---- training loop ---------------------------------------------------------

struct TrainLogRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double val_acc = 0.0;
  double sparsity = 0.0;
  bool quant_on = false;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = loss;
    j["val_acc"] = val_acc;
    j["sparsity"] = sparsity;
    j["quant_on"] = quant_on;
    return j.dump();
  }
};

struct TrainState {
  ArchConfig arch;
  ModelGraph model;
  AdamState adam;
  PruneMask mask;
  QuantPlan plan;
  bool quant_on = false;
  std::int64_t step = 0;  // next step to run
  double float_val_acc = -1.0;  // validation accuracy when HAT was switched on
  std::vector<TrainLogRecord> log;
};

inline TrainState init_train_state(const ArchConfig& arch, std::vector<std::string> labels,
                                   const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.arch = arch;
  st.model = make_model(arch, std::move(labels));
  init_params(st.model, Rng::derive(cfg.seed, 0).next_u64());
  st.mask = full_mask(st.model);
  return st;
}

inline std::vector<Example> examples_of(const TrainData& data, std::span<const std::size_t> idx) {
  std::vector<Example> out;
  for (auto i : idx) out.push_back({&data.features[i], data.labels[i]});
  return out;
}

inline double split_accuracy(const TrainState& st, const TrainData& data,
                             std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  const auto g = build_graph(st.model, st.quant_on ? &st.plan : nullptr);
  const auto ptrs = data.feature_ptrs(idx);
  const auto preds = predict_graph(g, ptrs);
  return accuracy(preds, data.label_list(idx));
}

/// Run steps [st.step, until) of the schedule. `on_log` sees every record.
inline void train_steps(TrainState& st, const TrainData& data, const TrainConfig& cfg,
                        std::int64_t until,
                        const std::function<void(const TrainLogRecord&)>& on_log = {}) {
  cfg.validate();
  until = std::min(until, cfg.steps);
  std::vector<Example> batch(static_cast<std::size_t>(cfg.batch_size));
  for (; st.step < until; ++st.step) {
    const auto step = st.step;
    if (!st.quant_on && cfg.quant_on_step >= 0 && step >= cfg.quant_on_step) {
      st.float_val_acc = split_accuracy(st, data, data.val);
      std::vector<std::size_t> calib = data.train;
      calib.resize(std::min<std::size_t>(calib.size(), static_cast<std::size_t>(cfg.calib_examples)));
      st.plan = calibrate(st.model, examples_of(data, calib), cfg.weight_bits, cfg.calib_percentile);
      st.quant_on = true;
    }
    if (cfg.target_sparsity > 0.0 && step >= cfg.prune_start && step <= cfg.prune_end &&
        ((step - cfg.prune_start) % cfg.prune_every == 0 || step == cfg.prune_end)) {
      const double s = sparsity_at(step, cfg.prune_start, cfg.prune_end, cfg.target_sparsity);
      st.mask = prune_magnitude(st.model, s);
      apply_mask(st.model, st.mask);
    }
    Rng rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(step) + 1);
    for (auto& ex : batch) {
      const auto i = data.train[rng.below(data.train.size())];
      ex = {&data.features[i], data.labels[i]};
    }
    auto fb = forward_backward(st.model, batch, st.quant_on ? &st.plan : nullptr);
    adam_step(st.model, std::move(fb.grads), st.adam, cfg, &st.mask);

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      TrainLogRecord rec;
      rec.step = step + 1;
      rec.loss = fb.loss;
      rec.val_acc = split_accuracy(st, data, data.val);
      rec.sparsity = st.mask.achieved_sparsity();
      rec.quant_on = st.quant_on;
      st.log.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
}

/// Deploy freeze: the integer model of the final training graph, carrying
/// the frontend hash and normalization constants.
inline QuantizedModel finalize(TrainState& st, const TrainData& data, const TrainConfig& cfg,
                               const FeatureConfig& fcfg = {}) {
  if (!st.quant_on) {
    std::vector<std::size_t> calib = data.train;
    calib.resize(std::min<std::size_t>(calib.size(), static_cast<std::size_t>(cfg.calib_examples)));
    st.plan = calibrate(st.model, examples_of(data, calib), cfg.weight_bits, cfg.calib_percentile);
  }
  apply_mask(st.model, st.mask);
  auto qm = freeze(st.model, st.plan);
  qm.frontend_hash = config_hash(fcfg);
  qm.feature_mean = data.mean_q;
  qm.feature_inv_std = data.inv_std_q;
  return qm;
}

struct TrainResult {
  TrainState state;
  QuantizedModel deployed;
};

inline TrainResult train(const ArchConfig& arch, std::vector<std::string> labels,
                         const TrainData& data, const TrainConfig& cfg,
                         const FeatureConfig& fcfg = {},
                         const std::function<void(const TrainLogRecord&)>& on_log = {}) {
  TrainResult r{init_train_state(arch, std::move(labels), cfg), {}};
  train_steps(r.state, data, cfg, cfg.steps, on_log);
  r.deployed = finalize(r.state, data, cfg, fcfg);
  return r;
}

// ---- checkpoints -----------------------------------------------------------

inline constexpr char kStateMagic[4] = {'L', 'M', 'U', 'S'};
inline constexpr std::uint16_t kStateVersion = 1;

namespace detail {

inline void put_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
}

inline void get_into(ByteReader& r, double* dst, Eigen::Index rows, Eigen::Index cols) {
  if (r.u32() != rows || r.u32() != cols) throw LoadError("checkpoint tensor shape mismatch");
  for (Eigen::Index i = 0; i < rows * cols; ++i) dst[i] = r.f64();
}

}  // namespace detail

/// Optimizer-state blob: architecture, float parameters, Adam moments,
/// masks, quantization plan and log. Restoring it and continuing gives the
/// same result as an uninterrupted run.
inline std::vector<std::uint8_t> encode_state(TrainState& st) {
  detail::ByteWriter w;
  for (char c : kStateMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kStateVersion);
  w.u32(static_cast<std::uint32_t>(st.arch.input_dim));
  w.f64(st.arch.dt);
  w.u8(static_cast<std::uint8_t>(st.arch.method));
  w.u32(static_cast<std::uint32_t>(st.arch.layers.size()));
  for (const auto& lc : st.arch.layers) {
    w.u32(static_cast<std::uint32_t>(lc.hidden));
    w.u32(static_cast<std::uint32_t>(lc.cells.size()));
    for (const auto& c : lc.cells) {
      w.u32(static_cast<std::uint32_t>(c.order));
      w.f64(c.theta);
    }
  }
  for (const auto& l : st.model.label_names) w.str16(l);
  w.u64(static_cast<std::uint64_t>(st.step));
  w.u8(st.quant_on ? 1 : 0);
  w.f64(st.float_val_acc);
  w.u8(static_cast<std::uint8_t>(st.plan.weight_bits));
  w.u32(static_cast<std::uint32_t>(st.plan.input_exp));
  w.u32(static_cast<std::uint32_t>(st.plan.layers.size()));
  for (const auto& p : st.plan.layers) {
    w.u32(static_cast<std::uint32_t>(p.u));
    w.u32(static_cast<std::uint32_t>(p.m));
    w.u32(static_cast<std::uint32_t>(p.h));
  }
  const auto views = trainable_tensors(st.model);
  for (const auto& v : views) detail::put_matrix(w, v.map());
  w.u64(static_cast<std::uint64_t>(st.adam.t));
  w.u8(st.adam.m.empty() ? 0 : 1);
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    detail::put_matrix(w, st.adam.m[i]);
    detail::put_matrix(w, st.adam.v[i]);
  }
  w.f64(st.mask.target_sparsity);
  for (const auto& k : st.mask.keep) {
    w.u32(static_cast<std::uint32_t>(k.size()));
    for (auto b : k) w.u8(b);
  }
  w.u32(static_cast<std::uint32_t>(st.log.size()));
  for (const auto& r : st.log) {
    w.u64(static_cast<std::uint64_t>(r.step));
    w.f64(r.loss);
    w.f64(r.val_acc);
    w.f64(r.sparsity);
    w.u8(r.quant_on ? 1 : 0);
  }
  auto bytes = std::move(w.buffer());
  detail::ByteWriter crc;
  crc.u32(crc32_of(bytes));
  const auto tail = crc.buffer();
  bytes.insert(bytes.end(), tail.begin(), tail.end());
  return bytes;
}

inline TrainState decode_state(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kStateMagic, 4) != 0) {
    throw LoadError("not a training checkpoint (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  detail::ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.u32()) throw LoadError("checkpoint checksum mismatch");
  detail::ByteReader r(body.subspan(4));
  if (r.u16() != kStateVersion) throw LoadError("unsupported checkpoint version");
  TrainState st;
  st.arch.input_dim = static_cast<int>(r.u32());
  st.arch.dt = r.f64();
  const auto method = r.u8();
  if (method > 1) throw LoadError("unknown discretization method");
  st.arch.method = static_cast<Discretization>(method);
  const auto nl = r.u32();
  if (nl > 1024) throw LoadError("implausible layer count");
  for (std::uint32_t l = 0; l < nl; ++l) {
    LayerConfig lc;
    lc.hidden = static_cast<int>(r.u32());
    const auto nc = r.u32();
    if (nc > 1024) throw LoadError("implausible cell count");
    for (std::uint32_t k = 0; k < nc; ++k) {
      CellSpec c;
      c.order = static_cast<int>(r.u32());
      c.theta = r.f64();
      lc.cells.push_back(c);
    }
    st.arch.layers.push_back(lc);
  }
  std::vector<std::string> labels;
  for (int i = 0; i < kNumLabels; ++i) labels.push_back(r.str16());
  try {
    st.model = make_model(st.arch, labels);
  } catch (const std::exception& e) {
    throw LoadError(std::string("checkpoint architecture invalid: ") + e.what());
  }
  st.step = static_cast<std::int64_t>(r.u64());
  st.quant_on = r.u8() != 0;
  st.float_val_acc = r.f64();
  st.plan.weight_bits = r.u8();
  st.plan.input_exp = static_cast<std::int32_t>(r.u32());
  const auto np = r.u32();
  if (np > 1024) throw LoadError("implausible plan size");
  for (std::uint32_t i = 0; i < np; ++i) {
    LayerActivationExponents p;
    p.u = static_cast<std::int32_t>(r.u32());
    p.m = static_cast<std::int32_t>(r.u32());
    p.h = static_cast<std::int32_t>(r.u32());
    st.plan.layers.push_back(p);
  }
  const auto views = trainable_tensors(st.model);
  for (const auto& v : views) detail::get_into(r, v.data, v.rows, v.cols);
  st.adam.t = static_cast<std::int64_t>(r.u64());
  if (r.u8() != 0) {
    for (const auto& v : views) {
      st.adam.m.emplace_back(v.rows, v.cols);
      st.adam.v.emplace_back(v.rows, v.cols);
      detail::get_into(r, st.adam.m.back().data(), v.rows, v.cols);
      detail::get_into(r, st.adam.v.back().data(), v.rows, v.cols);
    }
  }
  st.mask = full_mask(st.model);
  st.mask.target_sparsity = r.f64();
  for (auto& k : st.mask.keep) {
    if (r.u32() != k.size()) throw LoadError("checkpoint mask size mismatch");
    for (auto& b : k) b = r.u8();
  }
  const auto nlog = r.u32();
  for (std::uint32_t i = 0; i < nlog; ++i) {
    TrainLogRecord rec;
    rec.step = static_cast<std::int64_t>(r.u64());
    rec.loss = r.f64();
    rec.val_acc = r.f64();
    rec.sparsity = r.f64();
    rec.quant_on = r.u8() != 0;
    st.log.push_back(rec);
  }
  if (r.remaining() != 0) throw LoadError("trailing bytes in checkpoint");
  return st;
}

inline void save_state(TrainState& st, const std::string& path) {
  const auto bytes = encode_state(st);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing " + path);
}

inline TrainState load_state(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return decode_state(bytes);
}

}  // namespace lmukws

#pragma once

// Real-time keyword detection over an audio stream: featurize each 20 ms
// hop, run one integer model step, smooth posteriors, threshold.

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "lmukws/frontend.hpp"
#include "lmukws/qmodel.hpp"

namespace lmukws {

struct DetectorConfig {
  int smoothing = 5;         // moving-average window in hops
  double threshold = 0.7;    // smoothed posterior needed to fire
  int refractory = 50;       // hops after a detection during which none fire
};

struct Detection {
  std::int64_t frame = 0;
  int label = 0;
  double score = 0.0;
};

inline std::vector<double> softmax_logits(const IntLogits& logits, std::int64_t t) {
  std::vector<double> p(kNumLabels);
  double mx = -INFINITY;
  for (int k = 0; k < kNumLabels; ++k) {
    p[static_cast<std::size_t>(k)] = std::ldexp(static_cast<double>(logits.at(t, k)), logits.scale_exp);
    mx = std::max(mx, p[static_cast<std::size_t>(k)]);
  }
  double s = 0.0;
  for (auto& v : p) s += (v = std::exp(v - mx));
  for (auto& v : p) v /= s;
  return p;
}

/// Moving-average smoothing with threshold and refractory period. Only
/// keyword labels (not silence/unknown/unused slots) can fire.
class PosteriorDetector {
 public:
  PosteriorDetector(DetectorConfig cfg, std::vector<std::string> labels)
      : cfg_(cfg), labels_(std::move(labels)) {
    detail::require(cfg_.smoothing >= 1, "detector: smoothing window must be >= 1");
    detail::require(cfg_.threshold > 0.0 && cfg_.threshold <= 1.0, "detector: threshold in (0, 1]");
    detail::require(cfg_.refractory >= 0, "detector: refractory must be >= 0");
  }

  /// Feed one frame of posteriors; returns the smoothed posteriors.
  std::vector<double> push(const std::vector<double>& posterior, std::optional<Detection>& hit) {
    hit.reset();
    window_.push_back(posterior);
    if (static_cast<int>(window_.size()) > cfg_.smoothing) window_.pop_front();
    std::vector<double> avg(posterior.size(), 0.0);
    for (const auto& w : window_)
      for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += w[k] / static_cast<double>(window_.size());
    if (frame_ >= next_allowed_) {
      int best = -1;
      for (int k = 0; k < static_cast<int>(avg.size()); ++k) {
        if (!is_keyword(k)) continue;
        if (best < 0 || avg[static_cast<std::size_t>(k)] > avg[static_cast<std::size_t>(best)]) best = k;
      }
      if (best >= 0 && avg[static_cast<std::size_t>(best)] >= cfg_.threshold) {
        hit = Detection{frame_, best, avg[static_cast<std::size_t>(best)]};
        next_allowed_ = frame_ + 1 + cfg_.refractory;
      }
    }
    ++frame_;
    return avg;
  }

  bool is_keyword(int k) const {
    if (k == kSilenceLabel || k == kUnknownLabel) return false;
    const auto& name = labels_[static_cast<std::size_t>(k)];
    return !(name.size() > 1 && name.front() == '_' && name.back() == '_');
  }

 private:
  DetectorConfig cfg_;
  std::vector<std::string> labels_;
  std::deque<std::vector<double>> window_;
  std::int64_t frame_ = 0;
  std::int64_t next_allowed_ = 0;
};

struct StreamFrame {
  std::int64_t frame = 0;
  std::vector<double> smoothed;
  std::optional<Detection> detection;
};

/// One live stream: featurizer, integer model state and detector. The state
/// is never reset implicitly.
class KeywordStream {
 public:
  KeywordStream(const QuantizedModel& qm, const FeatureConfig& fcfg, DetectorConfig dcfg = {})
      : qm_(qm),
        featurizer_(fcfg),
        state_(IntStreamState::zeros(qm)),
        detector_(dcfg, qm.label_names) {
    if (qm.frontend_hash != config_hash(fcfg)) {
      throw ArgumentError("model was trained with a different frontend configuration");
    }
    detail::require_shape(qm.input_dim == fcfg.mel_bins, "model input does not match mel bins");
    if (!qm.feature_mean.data.empty()) {
      const auto m = dequantize(qm.feature_mean), s = dequantize(qm.feature_inv_std);
      normalizer_.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
      normalizer_.inv_std = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    }
  }

  std::vector<StreamFrame> push(std::span<const double> samples) {
    std::vector<StreamFrame> out;
    for (auto& frame : featurizer_.push(samples)) {
      normalizer_.apply(frame);
      std::vector<std::int32_t> q(frame.size());
      for (std::size_t j = 0; j < frame.size(); ++j) q[j] = quantize_scalar(frame[j], qm_.input_spec);
      const auto logits = quantized_forward(qm_, q, state_);
      StreamFrame sf;
      sf.frame = frames_++;
      sf.smoothed = detector_.push(softmax_logits(logits, 0), sf.detection);
      out.push_back(std::move(sf));
    }
    return out;
  }

 private:
  const QuantizedModel& qm_;
  StreamFeaturizer featurizer_;
  FeatureNormalizer normalizer_;
  IntStreamState state_;
  PosteriorDetector detector_;
  std::int64_t frames_ = 0;
};

}  // namespace lmukws

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lmukws/lmu.hpp"

namespace lmukws {

enum class PruneScope { kGlobal, kPerTensor };

/// Keep-masks for the prunable (non-bias) trainable tensors, in
/// trainable_tensors() order. true = kept.
struct PruneMask {
  std::vector<std::string> names;
  std::vector<std::vector<std::uint8_t>> keep;  // column-major, like Eigen storage
  double target_sparsity = 0.0;

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& k : keep) n += static_cast<std::int64_t>(k.size());
    return n;
  }

  std::int64_t pruned() const {
    std::int64_t n = 0;
    for (const auto& k : keep) n += std::count(k.begin(), k.end(), std::uint8_t{0});
    return n;
  }

  double achieved_sparsity() const {
    const auto n = total();
    return n == 0 ? 0.0 : static_cast<double>(pruned()) / static_cast<double>(n);
  }

  bool empty() const { return keep.empty(); }
};

inline PruneMask full_mask(ModelGraph& model) {
  PruneMask mask;
  for (const auto& t : trainable_tensors(model)) {
    if (t.is_bias) continue;
    mask.names.push_back(t.name);
    mask.keep.emplace_back(static_cast<std::size_t>(t.size()), std::uint8_t{1});
  }
  return mask;
}

namespace detail {

struct WeightRef {
  double magnitude;
  std::size_t tensor;
  std::size_t index;
};

// Prune the floor(sparsity * n) smallest magnitudes; ties by position.
inline void prune_smallest(std::vector<WeightRef>& refs, double sparsity, PruneMask& mask) {
  const auto count = static_cast<std::size_t>(
      std::floor(sparsity * static_cast<double>(refs.size())));
  std::sort(refs.begin(), refs.end(), [](const WeightRef& a, const WeightRef& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  });
  for (std::size_t i = 0; i < count; ++i) mask.keep[refs[i].tensor][refs[i].index] = 0;
}

}  // namespace detail

/// Magnitude pruning of all trainable weight matrices (biases and the fixed
/// memory matrices are never pruned).
inline PruneMask prune_magnitude(ModelGraph& model, double sparsity,
                                 PruneScope scope = PruneScope::kGlobal) {
  detail::require(sparsity >= 0.0 && sparsity < 1.0, "prune_magnitude: sparsity must be in [0, 1)");
  PruneMask mask = full_mask(model);
  mask.target_sparsity = sparsity;
  std::vector<detail::WeightRef> refs;
  std::size_t ti = 0;
  for (const auto& t : trainable_tensors(model)) {
    if (t.is_bias) continue;
    if (scope == PruneScope::kPerTensor) refs.clear();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      refs.push_back({std::fabs(t.data[i]), ti, static_cast<std::size_t>(i)});
    }
    if (scope == PruneScope::kPerTensor) detail::prune_smallest(refs, sparsity, mask);
    ++ti;
  }
  if (scope == PruneScope::kGlobal) detail::prune_smallest(refs, sparsity, mask);
  return mask;
}

/// Zero every masked-out weight.
inline void apply_mask(ModelGraph& model, const PruneMask& mask) {
  if (mask.empty()) return;
  std::size_t ti = 0;
  for (const auto& t : trainable_tensors(model)) {
    if (t.is_bias) continue;
    detail::require_shape(ti < mask.keep.size() &&
                              mask.keep[ti].size() == static_cast<std::size_t>(t.size()),
                          "prune mask does not match model");
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!mask.keep[ti][static_cast<std::size_t>(i)]) t.data[i] = 0.0;
    }
    ++ti;
  }
}

/// Cubic sparsity ramp from 0 at `start` to `target` at `end`.
inline double sparsity_at(std::int64_t step, std::int64_t start, std::int64_t end, double target) {
  if (step < start) return 0.0;
  if (step >= end || end <= start) return target;
  const double frac = static_cast<double>(step - start) / static_cast<double>(end - start);
  return target * (1.0 - std::pow(1.0 - frac, 3.0));
}

}  // namespace lmukws

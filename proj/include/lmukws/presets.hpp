#pragma once

// Named architectures. The lmu1..lmu4 sizes are fixed by total parameter
// count (output layer and biases included): 210375 params at 8 bits, 90250
// at 4 bits, and 4-bit models pruned to 26250 and 12250 nonzero parameters.

#include <cmath>
#include <string>
#include <vector>

#include "lmukws/lmu.hpp"
#include "lmukws/qmodel.hpp"

namespace lmukws {

struct Preset {
  std::string name;
  ArchConfig arch;
  int weight_bits = 4;
  double sparsity = 0.0;  // fraction of non-bias weights pruned
};

inline const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = [] {
    auto arch = [](std::vector<LayerConfig> layers) {
      ArchConfig a;
      a.layers = std::move(layers);
      return a;
    };
    std::vector<Preset> p;
    p.push_back({"lmu1", arch({{376, {{64, 1.0}}}, {373, {{32, 0.5}, {32, 1.0}}}}), 8, 0.0});
    p.push_back({"lmu2", arch({{264, {{8, 1.0}}}, {261, {{16, 1.0}}}}), 4, 0.0});
    p.push_back({"lmu3", arch({{336, {{32, 1.0}}}, {271, {{32, 1.0}}}}), 4, 0.8});
    p.push_back({"lmu4", arch({{598, {{40, 1.0}, {40, 0.5}, {40, 0.25}, {40, 0.75}}}}), 4, 0.91});
    p.push_back({"toy", arch({{48, {{8, 0.5}, {8, 1.0}}}}), 4, 0.0});
    return p;
  }();
  return all;
}

inline const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  std::string known;
  for (const auto& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ArgumentError("unknown preset '" + name + "' (known: " + known + ")");
}

/// Size a preset would report after training: every weight nonzero except
/// the floor(s * W) pruned ones; biases are never pruned.
inline SizeReport preset_size(const Preset& p) {
  SizeReport rep;
  rep.total_params = parameter_count(p.arch);
  const std::int64_t biases =
      rep.total_params - parameter_count(p.arch, SizeOptions{true, false});
  const std::int64_t weights = rep.total_params - biases;
  const auto pruned = static_cast<std::int64_t>(std::floor(p.sparsity * static_cast<double>(weights)));
  rep.nonzero_params = rep.total_params - pruned;
  rep.kbits = static_cast<double>(rep.nonzero_params * p.weight_bits) / 1000.0;
  return rep;
}

}  // namespace lmukws

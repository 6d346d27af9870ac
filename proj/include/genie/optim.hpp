#pragma once

#include <cstdint>
#include <vector>

#include "genie/serialize.hpp"

namespace genie {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter first/second moments plus the shared step counter.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  /// Per-parameter learning-rate multipliers; empty means 1 for all.
  std::vector<double> lr_scale;
};

AdamState make_adam(const std::vector<NamedTensor>& params, AdamConfig config);

/// One bias-corrected Adam step. Parameters whose `trainable` flag is false
/// are skipped entirely (values and moments untouched). A parameter without a
/// gradient buffer is treated as having zero gradient.
void adam_update(std::vector<NamedTensor>& params, AdamState& state, const std::vector<bool>& trainable);

}  // namespace genie

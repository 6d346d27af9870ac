#pragma once

// Target-aware residual scaling of reference features.
//
// A small conv net looks at the reference and target features side by side
// and predicts alpha = tanh(f_scale([F_r ; F_t])) in (-1, 1). The reference
// features are then rescaled by (1 + alpha) in (0, 2): positive alpha
// amplifies, negative alpha suppresses. The last conv starts at zero, so a
// fresh module passes F_r through unchanged.

#include <string>

#include "genie/nn.hpp"
#include "genie/tensor.hpp"

namespace genie {

struct ScaleMap {
  Tensor alpha;  // [N, C, H, W] or [N, 1, H, W]

  /// 1 + alpha.
  Tensor factor() const { return add_scalar(alpha, 1.0); }
};

/// (1 + alpha) * features, broadcasting a single-channel map over channels.
Tensor residual_scale(const Tensor& features, const ScaleMap& map);

class ResidualScaling {
 public:
  ResidualScaling(ParamStore& store, const std::string& prefix, std::size_t ref_channels,
                  std::size_t target_channels, bool per_channel, Rng& rng);

  ScaleMap compute_scale_map(const Tensor& ref, const Tensor& target) const;
  Tensor forward(const Tensor& ref, const Tensor& target) const;

  /// Pre-activation f_scale([ref ; target]).
  Tensor scale_logits(const Tensor& ref, const Tensor& target) const;

 private:
  std::size_t ref_channels_;
  std::size_t target_channels_;
  Conv hidden_;
  Conv out_;
};

}  // namespace genie

#pragma once

#include <span>
#include <vector>

#include "genie/tensor.hpp"

namespace genie {

/// Forward-process noise levels, indexed by timestep t in [0, T).
struct DiffusionSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;  // cumulative products of (1 - beta)

  std::size_t steps() const { return betas.size(); }
};

/// Linearly spaced betas from beta_start to beta_end.
DiffusionSchedule build_schedule(std::size_t steps, double beta_start, double beta_end);

/// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps, one timestep per
/// batch item (axis 0). Differentiable in z_0 and eps.
Tensor add_noise(const Tensor& z0, const Tensor& eps, std::span<const std::size_t> t,
                 const DiffusionSchedule& schedule);

/// Same mixture with an explicit alpha_bar shared by the whole batch.
Tensor add_noise_at(const Tensor& z0, const Tensor& eps, double alpha_bar);

}  // namespace genie

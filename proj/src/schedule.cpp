#include "genie/schedule.hpp"

#include <cmath>

namespace genie {

DiffusionSchedule build_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw_invalid("diffusion schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw_invalid("diffusion schedule needs 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.betas.resize(steps);
  s.alpha_bars.resize(steps);
  double running = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - s.betas[t];
    s.alpha_bars[t] = running;
  }
  return s;
}

Tensor add_noise(const Tensor& z0, const Tensor& eps, std::span<const std::size_t> t,
                 const DiffusionSchedule& schedule) {
  if (z0.shape() != eps.shape()) {
    throw_shape("noise shape " + shape_str(eps.shape()) + " differs from latent " + shape_str(z0.shape()));
  }
  if (z0.rank() == 0 || t.size() != z0.dim(0)) {
    throw_shape("need one timestep per batch item, got " + std::to_string(t.size()) + " for " + shape_str(z0.shape()));
  }
  Shape coef_shape(z0.rank(), 1);
  coef_shape[0] = t.size();
  std::vector<double> signal(t.size()), noise(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] >= schedule.steps()) {
      throw_invalid("timestep " + std::to_string(t[i]) + " outside [0, " + std::to_string(schedule.steps()) + ")");
    }
    signal[i] = std::sqrt(schedule.alpha_bars[t[i]]);
    noise[i] = std::sqrt(1.0 - schedule.alpha_bars[t[i]]);
  }
  return add(mul(Tensor::from(coef_shape, std::move(signal)), z0), mul(Tensor::from(coef_shape, std::move(noise)), eps));
}

Tensor add_noise_at(const Tensor& z0, const Tensor& eps, double alpha_bar) {
  if (z0.shape() != eps.shape()) {
    throw_shape("noise shape " + shape_str(eps.shape()) + " differs from latent " + shape_str(z0.shape()));
  }
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw_invalid("alpha_bar must lie in [0, 1]");
  return add(scale(z0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

}  // namespace genie

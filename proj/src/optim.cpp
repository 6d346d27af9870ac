#include "genie/optim.hpp"

#include <cmath>

namespace genie {

AdamState make_adam(const std::vector<NamedTensor>& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.numel(), 0.0);
    s.v.emplace_back(p.value.numel(), 0.0);
  }
  return s;
}

void adam_update(std::vector<NamedTensor>& params, AdamState& state, const std::vector<bool>& trainable) {
  if (state.m.size() != params.size() || trainable.size() != params.size()) {
    throw_invalid("optimizer state does not match the parameter list");
  }
  ++state.step;
  const auto& c = state.config;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    Tensor& p = params[i].value;
    const auto grad = p.grad();
    auto values = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double lr = c.learning_rate * (state.lr_scale.empty() ? 1.0 : state.lr_scale.at(i));
    if (m.size() != values.size()) throw_invalid("optimizer moments for '" + params[i].name + "' have the wrong size");
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace genie

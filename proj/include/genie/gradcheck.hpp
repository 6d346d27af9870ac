#pragma once

// Central finite-difference checks of reverse-mode gradients.
//
// A function f(inputs) -> Tensor is reduced to the scalar L = sum(w * f) with
// a fixed random projection w, so every output element's adjoint is exercised.
// For each checked scalar x the analytic dL/dx is compared against
// (L(x + h) - L(x - h)) / 2h. An element passes when its relative error is
// below the tolerance or its absolute error is below the floor.

#include <functional>
#include <string>
#include <vector>

#include "genie/nn.hpp"
#include "genie/tensor.hpp"

namespace genie {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-8;
  /// Inputs with more elements are checked at this many random positions.
  std::size_t max_elements = 48;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::string name;
  std::string kind;  // "op", "module" or "pipeline"
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  double tolerance = 0;

  bool passed() const { return failures == 0 && checked > 0; }
};

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Checks the gradient of f with respect to every input (inputs are switched
/// to requires_grad on copies; the originals are untouched).
GradcheckResult check_gradient(const std::string& name, const GradFn& f, const std::vector<Tensor>& inputs,
                               const GradcheckOptions& opts = {});

/// Checks d(loss)/d(param) for chosen scalars of registered parameters. `loss`
/// must rebuild the graph from the current parameter values on every call.
struct ParamProbe {
  std::string param;
  std::size_t index;
};
GradcheckResult check_param_gradient(const std::string& name, const std::function<Tensor()>& loss,
                                     ParamStore& store, const std::vector<ParamProbe>& probes,
                                     const GradcheckOptions& opts = {});

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  double seconds = 0;

  bool all_passed() const;
  std::string to_text() const;
  std::string to_json() const;
};

/// Every differentiable op, each module on perturbed parameters, and the full
/// pipeline loss (5 scalars from every parameter group, tolerance 1e-3).
GradcheckReport run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace genie

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "genie/tensor.hpp"

namespace testutil {

// Central difference of a scalar function of one tensor, element by element.
inline std::vector<double> numeric_grad(const std::function<double(const genie::Tensor&)>& f, const genie::Tensor& x,
                                        double h = 1e-5) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    genie::Tensor plus = x.detach().clone();
    genie::Tensor minus = x.detach().clone();
    plus.mutable_data()[i] += h;
    minus.mutable_data()[i] -= h;
    out[i] = (f(plus) - f(minus)) / (2 * h);
  }
  return out;
}

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double s = std::max(std::abs(a), std::abs(b));
  return s < 1e-8 ? 0.0 : d / s;
}

inline double max_abs_diff(const genie::Tensor& a, const genie::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

inline bool bitwise_equal(const genie::Tensor& a, const genie::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace testutil

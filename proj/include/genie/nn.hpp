#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "genie/serialize.hpp"
#include "genie/tensor.hpp"

namespace genie {

/// Seeded pseudo-random source. Every stochastic draw in the library goes
/// through one of these so that a seed fixes the whole run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream derived from (seed, stream) by splitmix64 mixing.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Named, ordered collection of trainable leaves.
class ParamStore {
 public:
  /// Registers `value` as a gradient-tracking leaf; names must be unique.
  Tensor add(std::string name, Tensor value);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Copies values from a dump; every stored name must be present with a matching shape.
  void load_values(const std::vector<NamedTensor>& values);
  /// Deep copy of the current values (no gradients).
  std::vector<NamedTensor> snapshot() const;

 private:
  std::vector<NamedTensor> entries_;
};

struct Conv {
  Tensor weight;
  Tensor bias;
  Conv2dOptions opts;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, opts); }
};

/// weight ~ N(0, gain^2 / fan_in), zero bias.
Conv make_conv(ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
               std::size_t kernel, Conv2dOptions opts, Rng& rng, double gain = 1.0);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias = true, double gain = 1.0);

}  // namespace genie

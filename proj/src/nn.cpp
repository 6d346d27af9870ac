#include "genie/nn.hpp"

#include <cmath>

namespace genie {

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return Rng(z ^ (z >> 31));
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw_invalid("Rng::index(0)");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * normal();
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) throw_invalid("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  entries_.push_back({std::move(name), value});
  return value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw_invalid("unknown parameter '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ParamStore::load_values(const std::vector<NamedTensor>& values) {
  for (auto& e : entries_) {
    const Tensor& src = find_tensor(values, e.name);
    if (src.shape() != e.value.shape()) {
      throw Error(ErrorCode::kShape, "parameter '" + e.name + "' has shape " + shape_str(e.value.shape()) +
                                         " but checkpoint holds " + shape_str(src.shape()));
    }
    auto dst = e.value.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

std::vector<NamedTensor> ParamStore::snapshot() const {
  std::vector<NamedTensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back({e.name, e.value.detach()});
  return out;
}

Conv make_conv(ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
               std::size_t kernel, Conv2dOptions opts, Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_ch * kernel * kernel);
  Conv c;
  c.weight = store.add(name + ".weight", rng.normal_tensor({out_ch, in_ch, kernel, kernel}, gain / std::sqrt(fan_in)));
  c.bias = store.add(name + ".bias", Tensor::zeros({out_ch}));
  c.opts = opts;
  return c;
}

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias, double gain) {
  Linear l;
  l.weight = store.add(name + ".weight", rng.normal_tensor({in, out}, gain / std::sqrt(static_cast<double>(in))));
  if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

}  // namespace genie

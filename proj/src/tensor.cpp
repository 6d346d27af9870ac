#include "genie/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "kernels.hpp"

namespace genie {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

namespace {
std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;
}  // namespace

}  // namespace detail

struct TensorAccess {
  static detail::Node& node(const Tensor& t) {
    if (!t.node_) throw_invalid("operation on an undefined tensor");
    return *t.node_;
  }
  static const std::shared_ptr<detail::Node>& ptr(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }
};

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void throw_shape(const std::string& what) { throw Error(ErrorCode::kShape, what); }
void throw_invalid(const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); }

// ---------------------------------------------------------------------------
// Tensor basics

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw_shape("value count " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->seq = detail::g_sequence.fetch_add(1, std::memory_order_relaxed);
  return n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = genie::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = genie::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({1}, {value}, requires_grad));
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                       BackwardFn backward) {
  auto n = make_leaf(std::move(shape), std::move(values), false);
  if (detail::t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& t : inputs) n->inputs.push_back(t.node_);
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

const Shape& Tensor::shape() const { return TensorAccess::node(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw_shape("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return TensorAccess::node(*this).data.size(); }

std::span<const double> Tensor::data() const { return TensorAccess::node(*this).data; }
std::span<double> Tensor::mutable_data() { return TensorAccess::node(*this).data; }

double Tensor::item() const {
  const auto& n = TensorAccess::node(*this);
  if (n.data.size() != 1) throw_shape("item() on tensor of shape " + shape_str(n.shape));
  return n.data[0];
}

bool Tensor::requires_grad() const { return TensorAccess::node(*this).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  TensorAccess::node(*this).requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !TensorAccess::node(*this).grad.empty(); }

std::span<const double> Tensor::grad() const { return TensorAccess::node(*this).grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = TensorAccess::node(*this);
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& g = TensorAccess::node(*this).grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = TensorAccess::node(*this);
  return Tensor(make_leaf(n.shape, n.data, false));
}

Tensor Tensor::clone() const {
  const auto& n = TensorAccess::node(*this);
  return Tensor(make_leaf(n.shape, n.data, n.requires_grad));
}

// ---------------------------------------------------------------------------
// Tape

GradTape GradTape::record_from(const Tensor& root) {
  GradTape tape;
  tape.root_ = TensorAccess::ptr(root);
  if (!tape.root_) throw_invalid("backward from an undefined tensor");
  std::vector<detail::Node*> stack{tape.root_.get()};
  std::unordered_set<detail::Node*> seen{tape.root_.get()};
  std::vector<std::shared_ptr<detail::Node>> found;
  if (tape.root_->backward) found.push_back(tape.root_);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (!in || !in->requires_grad || !seen.insert(in.get()).second) continue;
      if (in->backward) found.push_back(in);
      stack.push_back(in.get());
    }
  }
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });
  tape.nodes_ = std::move(found);
  return tape;
}

std::vector<std::uint64_t> GradTape::sequence() const {
  std::vector<std::uint64_t> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back(n->seq);
  return out;
}

void GradTape::replay() {
  // Interior buffers start from zero on every replay; leaves accumulate.
  for (auto& n : nodes_) n->grad.assign(n->data.size(), 0.0);
  root_->grad.assign(root_->data.size(), 1.0);

  std::vector<std::vector<double>*> in_grads;
  for (auto& n : nodes_) {
    in_grads.assign(n->inputs.size(), nullptr);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      auto& in = n->inputs[i];
      if (!in || !in->requires_grad) continue;
      if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
      in_grads[i] = &in->grad;
    }
    n->backward(n->grad, in_grads);
  }
  for (auto& n : nodes_) {
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

void Tensor::backward() const {
  const auto& n = TensorAccess::node(*this);
  if (n.data.size() != 1) throw_shape("backward requires a single-element loss, got " + shape_str(n.shape));
  if (!n.requires_grad || !n.backward) {
    throw_invalid("backward: loss was not produced by any recorded operation");
  }
  GradTape::record_from(*this).replay();
}

NoGradGuard::NoGradGuard() : previous_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = previous_; }
bool grad_enabled() { return detail::t_grad_enabled; }

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;  // per output axis, 0 where broadcast
  std::vector<std::size_t> b_stride;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.a_stride.assign(r, 0);
  p.b_stride.assign(r, 0);
  const auto as = contiguous_strides(a);
  const auto bs = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ai = i + a.size() >= r ? i + a.size() - r : SIZE_MAX;
    const std::size_t bi = i + b.size() >= r ? i + b.size() - r : SIZE_MAX;
    const std::size_t da = ai == SIZE_MAX ? 1 : a[ai];
    const std::size_t db = bi == SIZE_MAX ? 1 : b[bi];
    if (da != db && da != 1 && db != 1) {
      throw_shape(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = da == 1 ? db : da;
    p.a_stride[i] = (ai == SIZE_MAX || da == 1) ? 0 : as[ai];
    p.b_stride[i] = (bi == SIZE_MAX || db == 1) ? 0 : bs[bi];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t total = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  if (total == 0) return;
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = p.out[r - 1];
  const std::size_t sa = p.a_stride[r - 1], sb = p.b_stride[r - 1];
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * sa, ib + j * sb);
    // advance odometer over axes [0, r-1)
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      ia += p.a_stride[ax];
      ib += p.b_stride[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.a_stride[ax] * idx[ax];
      ib -= p.b_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(numel(p.out));
  const auto ad = a.data();
  const auto bd = b.data();
  switch (op) {
    case BinOp::kAdd:
      for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] + bd[j]; });
      break;
    case BinOp::kSub:
      for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] - bd[j]; });
      break;
    case BinOp::kMul:
      for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] * bd[j]; });
      break;
  }
  return Tensor::from_op(p.out, std::move(out), {a, b},
                         [a, b, p, op](std::span<const double> g, std::span<std::vector<double>*> in) {
                           const auto ad = a.data();
                           const auto bd = b.data();
                           std::vector<double>* ga = in[0];
                           std::vector<double>* gb = in[1];
                           for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) {
                             switch (op) {
                               case BinOp::kAdd:
                                 if (ga) (*ga)[i] += g[o];
                                 if (gb) (*gb)[j] += g[o];
                                 break;
                               case BinOp::kSub:
                                 if (ga) (*ga)[i] += g[o];
                                 if (gb) (*gb)[j] -= g[o];
                                 break;
                               case BinOp::kMul:
                                 if (ga) (*ga)[i] += g[o] * bd[j];
                                 if (gb) (*gb)[j] += g[o] * ad[i];
                                 break;
                             }
                           });
                         });
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto y_copy = std::make_shared<std::vector<double>>(out);
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [x, y_copy, deriv](std::span<const double> g, std::span<std::vector<double>*> in) {
                           const auto xd = x.data();
                           auto& gx = *in[0];
                           const auto& y = *y_copy;
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], y[i]);
                         });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor scale(const Tensor& x, double c) {
  return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor tanh_op(const Tensor& x) {
  // Largest magnitude for which 1 + y is still below 2 in double arithmetic.
  static constexpr double kBound = 1.0 - std::numeric_limits<double>::epsilon();
  return unary(
      x, [](double v) { return std::clamp(std::tanh(v), -kBound, kBound); },
      [](double, double y) { return 1.0 - y * y; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s + v * s * (1.0 - s);
      });
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  return Tensor::from_op({1}, {s}, {x}, [](std::span<const double> g, std::span<std::vector<double>*> in) {
    for (double& v : *in[0]) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw_shape("mean of an empty tensor");
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  const double inv = 1.0 / static_cast<double>(n);
  return Tensor::from_op({1}, {s * inv}, {x}, [inv](std::span<const double> g, std::span<std::vector<double>*> in) {
    for (double& v : *in[0]) v += g[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw_shape("matmul needs rank >= 2 operands, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) throw_shape("matmul inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs));

  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  Broadcast bp;
  try {
    bp = plan_broadcast(a_batch.empty() ? Shape{1} : a_batch, b_batch.empty() ? Shape{1} : b_batch, "matmul");
  } catch (const Error&) {
    throw_shape("matmul batch dimensions not broadcastable: " + shape_str(as) + " x " + shape_str(bs));
  }
  // Map every output batch to its a/b batch slot.
  std::vector<std::size_t> a_slot, b_slot;
  for_each_broadcast(bp, [&](std::size_t, std::size_t i, std::size_t j) {
    a_slot.push_back(i);
    b_slot.push_back(j);
  });
  Shape out_shape;
  if (!(a_batch.empty() && b_batch.empty())) out_shape = bp.out;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t batches = a_slot.size();
  std::vector<double> out(batches * m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t bi = 0; bi < batches; ++bi) {
    kernels::gemm_nn(m, n, k, ad.data() + a_slot[bi] * m * k, bd.data() + b_slot[bi] * k * n,
                     out.data() + bi * m * n);
  }
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, a_slot = std::move(a_slot), b_slot = std::move(b_slot), m, n, k](
          std::span<const double> g, std::span<std::vector<double>*> in) {
        const auto ad = a.data();
        const auto bd = b.data();
        for (std::size_t bi = 0; bi < a_slot.size(); ++bi) {
          const double* gb = g.data() + bi * m * n;
          if (in[0]) kernels::gemm_nt(m, k, n, gb, bd.data() + b_slot[bi] * k * n, in[0]->data() + a_slot[bi] * m * k);
          if (in[1]) kernels::gemm_tn(k, n, m, ad.data() + a_slot[bi] * m * k, gb, in[1]->data() + b_slot[bi] * k * n);
        }
      });
}

// ---------------------------------------------------------------------------
// softmax

Tensor softmax_last_axis(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw_shape("softmax needs rank >= 1");
  const std::size_t len = s.back();
  const std::size_t rows = len == 0 ? 0 : x.numel() / len;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * len;
    double* y = out.data() + r * len;
    const double mx = *std::max_element(in, in + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < len; ++j) y[j] *= inv;
  }
  auto y_copy = std::make_shared<std::vector<double>>(out);
  return Tensor::from_op(s, std::move(out), {x},
                         [y_copy, rows, len](std::span<const double> g, std::span<std::vector<double>*> in) {
                           const auto& y = *y_copy;
                           auto& gx = *in[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t off = r * len;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < len; ++j) dot += g[off + j] * y[off + j];
                             for (std::size_t j = 0; j < len; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw_shape("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {x},
                         [](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (order.size() != r) throw_shape("permute order length does not match rank of " + shape_str(s));
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o >= r || used[o]) throw_shape("permute order is not a permutation");
    used[o] = true;
  }
  const auto in_strides = contiguous_strides(s);
  Shape out_shape(r);
  Broadcast p;  // reuse the odometer: "a" walks the source with permuted strides
  p.a_stride.resize(r);
  p.b_stride.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[order[i]];
    p.a_stride[i] = in_strides[order[i]];
  }
  p.out = out_shape;
  auto src_index = std::make_shared<std::vector<std::size_t>>(x.numel());
  if (r > 0) {
    for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t) { (*src_index)[o] = i; });
  } else {
    (*src_index)[0] = 0;
  }
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xd[(*src_index)[o]];
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [src_index](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           const auto& si = *src_index;
                           for (std::size_t o = 0; o < g.size(); ++o) gx[si[o]] += g[o];
                         });
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw_shape("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[r - 1], order[r - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw_invalid("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw_shape("concat axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw_shape("concat: " + shape_str(first) + " and " + shape_str(s) + " differ off the concat axis");
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.shape()[axis] * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * row, row, out.data() + o * out_row + off);
    }
    off += row;
  }
  std::vector<std::size_t> rows;
  for (const auto& p : parts) rows.push_back(p.shape()[axis] * inner);
  return Tensor::from_op(std::move(out_shape), std::move(out), parts,
                         [offsets, rows, outer, out_row](std::span<const double> g, std::span<std::vector<double>*> in) {
                           for (std::size_t k = 0; k < in.size(); ++k) {
                             if (!in[k]) continue;
                             auto& gk = *in[k];
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* src = g.data() + o * out_row + offsets[k];
                               double* dst = gk.data() + o * rows[k];
                               for (std::size_t j = 0; j < rows[k]; ++j) dst[j] += src[j];
                             }
                           }
                         });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw_shape("concat_channels needs [N, C, ...] tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return concat({a, b}, 1);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw_shape("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                std::to_string(axis) + " out of range for " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = length * inner;
  const std::size_t skip = start * inner;
  const auto xd = x.data();
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xd.data() + o * in_row + skip, out_row, out.data() + o * out_row);
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [outer, in_row, out_row, skip](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t j = 0; j < out_row; ++j) gx[o * in_row + skip + j] += g[o * out_row + j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Image ops

namespace {
void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw_shape(std::string(op) + " expects [N, C, H, W], got " + shape_str(x.shape()));
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  require_rank4(x, "conv2d");
  if (weight.rank() != 4) throw_shape("conv2d weight must be [C_out, C_in, kH, kW], got " + shape_str(weight.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    throw_shape("conv2d input channels " + std::to_string(c) + " do not match weight " + shape_str(weight.shape()));
  }
  if (opts.stride == 0) throw_invalid("conv2d stride must be positive");
  if (kh > h + 2 * opts.padding || kw > w + 2 * opts.padding) {
    throw_shape("conv2d kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw_shape("conv2d bias must be [" + std::to_string(co) + "], got " + shape_str(bias.shape()));
  }
  const kernels::ConvGeometry geo{c, h, w, kh, kw, opts.stride, opts.padding};
  const std::size_t ho = geo.out_h(), wo = geo.out_w();
  const std::size_t kdim = c * kh * kw, pix = ho * wo;
  const bool direct = geo.is_pointwise();

  std::vector<double> out(n * co * pix, 0.0);
  std::vector<double> cols(direct ? 0 : kdim * pix);
  const auto xd = x.data();
  const auto wd = weight.data();
  for (std::size_t b = 0; b < n; ++b) {
    const double* img = xd.data() + b * c * h * w;
    const double* col = img;
    if (!direct) {
      kernels::im2col(geo, img, cols.data());
      col = cols.data();
    }
    double* dst = out.data() + b * co * pix;
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t o = 0; o < co; ++o) std::fill_n(dst + o * pix, pix, bd[o]);
    }
    kernels::gemm_nn(co, pix, kdim, wd.data(), col, dst);
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::from_op(
      {n, co, ho, wo}, std::move(out), std::move(inputs),
      [x, weight, geo, n, co, kdim, pix, direct](std::span<const double> g, std::span<std::vector<double>*> in) {
        const auto xd = x.data();
        const auto wd = weight.data();
        const std::size_t img_size = geo.channels * geo.height * geo.width;
        std::vector<double> cols(direct ? 0 : kdim * pix);
        std::vector<double> dcols(direct ? 0 : kdim * pix);
        for (std::size_t b = 0; b < n; ++b) {
          const double* gb = g.data() + b * co * pix;
          const double* img = xd.data() + b * img_size;
          if (in[1]) {
            const double* col = img;
            if (!direct) {
              kernels::im2col(geo, img, cols.data());
              col = cols.data();
            }
            kernels::gemm_nt(co, kdim, pix, gb, col, in[1]->data());
          }
          if (in.size() > 2 && in[2]) {
            auto& gbias = *in[2];
            for (std::size_t o = 0; o < co; ++o) {
              double s = 0.0;
              for (std::size_t p = 0; p < pix; ++p) s += gb[o * pix + p];
              gbias[o] += s;
            }
          }
          if (in[0]) {
            double* gx = in[0]->data() + b * img_size;
            if (direct) {
              kernels::gemm_tn(kdim, pix, co, wd.data(), gb, gx);
            } else {
              std::fill(dcols.begin(), dcols.end(), 0.0);
              kernels::gemm_tn(kdim, pix, co, wd.data(), gb, dcols.data());
              kernels::col2im_add(geo, dcols.data(), gx);
            }
          }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank4(x, "upsample_nearest2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t planes = n * c, h2 = 2 * h, w2 = 2 * w;
  const auto xd = x.data();
  std::vector<double> out(planes * h2 * w2);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h2; ++y) {
      const double* src = xd.data() + p * h * w + (y / 2) * w;
      double* dst = out.data() + p * h2 * w2 + y * w2;
      for (std::size_t xx = 0; xx < w2; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return Tensor::from_op({n, c, h2, w2}, std::move(out), {x},
                         [planes, h, w, h2, w2](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           for (std::size_t p = 0; p < planes; ++p) {
                             for (std::size_t y = 0; y < h2; ++y) {
                               const double* src = g.data() + p * h2 * w2 + y * w2;
                               double* dst = gx.data() + p * h * w + (y / 2) * w;
                               for (std::size_t xx = 0; xx < w2; ++xx) dst[xx / 2] += src[xx];
                             }
                           }
                         });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank4(x, "avg_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw_shape("avg_pool2d: " + shape_str(x.shape()) + " not divisible by window " + std::to_string(k));
  }
  const std::size_t ho = h / k, wo = w / k, planes = n * c;
  const double inv = 1.0 / static_cast<double>(k * k);
  const auto xd = x.data();
  std::vector<double> out(planes * ho * wo, 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[p * ho * wo + (y / k) * wo + xx / k] += xd[p * h * w + y * w + xx];
      }
    }
  }
  for (double& v : out) v *= inv;
  return Tensor::from_op({n, c, ho, wo}, std::move(out), {x},
                         [planes, h, w, ho, wo, k, inv](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           for (std::size_t p = 0; p < planes; ++p) {
                             for (std::size_t y = 0; y < h; ++y) {
                               for (std::size_t xx = 0; xx < w; ++xx) {
                                 gx[p * h * w + y * w + xx] += inv * g[p * ho * wo + (y / k) * wo + xx / k];
                               }
                             }
                           }
                         });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank4(x, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw_shape("global_avg_pool over empty spatial extent");
  const double inv = 1.0 / static_cast<double>(hw);
  const auto xd = x.data();
  std::vector<double> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += xd[p * hw + i];
    out[p] = s * inv;
  }
  return Tensor::from_op({n, c}, std::move(out), {x},
                         [hw, inv](std::span<const double> g, std::span<std::vector<double>*> in) {
                           auto& gx = *in[0];
                           for (std::size_t p = 0; p < g.size(); ++p) {
                             for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p] * inv;
                           }
                         });
}

Tensor to_sequence(const Tensor& x) {
  require_rank4(x, "to_sequence");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return permute(reshape(x, {n, c, hw}), {0, 2, 1});
}

Tensor from_sequence(const Tensor& seq, std::size_t height, std::size_t width) {
  if (seq.rank() != 3 || seq.dim(1) != height * width) {
    throw_shape("from_sequence: " + shape_str(seq.shape()) + " is not [N, " + std::to_string(height * width) + ", C]");
  }
  const std::size_t n = seq.dim(0), c = seq.dim(2);
  return reshape(permute(seq, {0, 2, 1}), {n, c, height, width});
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

}  // namespace genie

#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every operation that sees at least one input with requires_grad() records
// its inputs and an adjoint closure on the output node. backward() collects
// the reachable subgraph, orders it by creation sequence and replays the
// adjoints newest-first, so each recorded operation runs exactly once.
//
// Broadcasting follows the usual trailing-dimension alignment: shapes are
// right-aligned, and a dimension of size 1 (or a missing leading dimension)
// stretches to match the other operand. Adjoints of broadcast operands are
// summed back over the stretched dimensions.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genie {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class ErrorCode : int {
  kInvalidArgument = 1,
  kShape = 2,
  kConfig = 3,
  kIo = 4,
  kNumeric = 5,
  kInternal = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void throw_shape(const std::string& what);
[[noreturn]] void throw_invalid(const std::string& what);

namespace detail {
struct Node;
}

class Tensor;

/// Adjoint of a recorded operation. `out_grad` is dL/d(output); for every
/// input that needs a gradient, `in_grads[i]` points to its (zero-initialised
/// on first use) gradient buffer to accumulate into, otherwise it is null.
using BackwardFn =
    std::function<void(std::span<const double> out_grad, std::span<std::vector<double>*> in_grads)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds the result of a user-defined differentiable operation. The
  /// adjoint is recorded only when grad mode is on and some input tracks
  /// gradients.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                        BackwardFn backward);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access. Only meaningful for leaves (parameters, inputs);
  /// mutating an interior node invalidates adjoints that captured it.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;
  /// Deep copy of the values into a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  /// Runs reverse-mode differentiation from this single-element tensor.
  void backward() const;

 private:
  friend struct TensorAccess;
  friend class GradTape;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Recorded operations reachable from a root, in replay (reverse creation)
/// order. backward() builds one of these and replays it.
class GradTape {
 public:
  static GradTape record_from(const Tensor& root);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Creation sequence numbers of the recorded operations, replay order.
  std::vector<std::uint64_t> sequence() const;
  /// Seeds d(root)/d(root) = 1 and runs every adjoint once.
  void replay();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise, broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor square(const Tensor& x);

// Unary nonlinearities.
/// tanh clamped to the open interval (-1, 1) in double precision, so that
/// 1 + tanh(x) stays strictly inside (0, 2) even at saturation.
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

// Reductions to a single element.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_last_axis(const Tensor& x);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// Image-shaped ops on [N, C, H, W].
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation with zero padding. `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});
Tensor upsample_nearest2x(const Tensor& x);
/// Non-overlapping k x k box average; H and W must be divisible by k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);
/// [N, C, H, W] -> [N, C]
Tensor global_avg_pool(const Tensor& x);

// Feature map <-> token sequence: [N, C, H, W] <-> [N, H*W, C].
Tensor to_sequence(const Tensor& x);
Tensor from_sequence(const Tensor& seq, std::size_t height, std::size_t width);

/// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace genie

#pragma once

// Dense float64 tensors with a record-on-execute reverse-mode tape.
//
// Every op that consumes a gradient-tracking input records a node holding its
// parents and a backward closure. backward() collects the nodes reachable
// from the loss and replays them in exact reverse creation order, so each
// parameter receives the sum of the contributions from every use.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace triforecaster {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

/// Write access to the gradient buffers of an op's inputs during backward.
class GradSink {
 public:
  explicit GradSink(std::vector<std::shared_ptr<detail::Node>>& inputs) : inputs_(inputs) {}

  /// True if input `i` participates in differentiation.
  bool wants(std::size_t i) const;
  /// Gradient buffer of input `i` to accumulate into. Only valid if wants(i).
  std::span<double> operator[](std::size_t i);

 private:
  std::vector<std::shared_ptr<detail::Node>>& inputs_;
};

/// (output values, output gradient, input gradient sinks)
using BackwardFn =
    std::function<void(std::span<const double> out_value, std::span<const double> out_grad, GradSink& inputs)>;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool grad_touched = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Records a custom differentiable op. `backward` is kept only when gradient
  /// recording is enabled and at least one input requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct mutation of the stored values. Intended for leaves (parameters,
  /// finite-difference perturbation); mutating an interior node does not
  /// invalidate graphs already recorded on top of it.
  std::span<double> mutable_values();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Empty span until a backward pass has written into this tensor.
  std::span<const double> grad() const;
  /// True if a backward pass contributed to this tensor since the last zero_grad().
  bool grad_touched() const;
  void zero_grad();

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  /// Populates gradients of every requires_grad leaf reachable from this scalar.
  /// Leaf gradients accumulate across calls until zero_grad().
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Scoped suspension of graph recording (evaluation, routing statistics).
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

// Linear algebra. Leading batch dims must match, or one operand is a plain matrix.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise. Binary ops accept equal shapes, a scalar, or an operand whose
// shape is a trailing suffix of the other's (broadcast over leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

/// Numerically stable softmax along `axis` (negative axes count from the end).
Tensor softmax(const Tensor& x, int axis);

// Shape manipulation.
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
Tensor swap_last(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& xs);
/// x[index] along the leading axis.
Tensor select(const Tensor& x, std::size_t index);
/// x[begin:end] along the leading axis.
Tensor slice(const Tensor& x, std::size_t begin, std::size_t end);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);

/// Normalizes each slice along the last axis to zero mean / unit variance,
/// then applies the per-feature affine map gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-10);

}  // namespace triforecaster

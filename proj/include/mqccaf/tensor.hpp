// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense f64 tensor with reverse-mode gradient recording.
 *
 * Every differentiable operation produces a new Node holding its value, the
 * nodes it was computed from, and a closure that pushes the output gradient
 * back into those inputs. backward() orders the reachable graph into a Tape
 * and replays the closures in reverse topological order.
 */
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mqccaf {

using Shape = std::vector<std::size_t>;

/// Allocates on 64-byte boundaries, so vector kernels split every buffer
/// into the same head/body/tail on every run.
template <class T> struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U> AlignedAllocator(const AlignedAllocator<U> &) {}

  T *allocate(std::size_t n) {
    return static_cast<T *>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T *p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U> bool operator==(const AlignedAllocator<U> &) const {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape &shape);
std::string shape_str(const Shape &shape);

/// Raised for incompatible operand shapes or illegal op arguments.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/Inf or a matrix loses definiteness.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad; // empty until first accumulation
  bool requires_grad = false;
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node &)> backward_fn;

  Buffer &ensure_grad() {
    if (grad.empty())
      grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer &&values, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const double> values,
                     bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape &shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access; only legal on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Leaf copy of the current value, detached from any graph.
  Tensor detach() const;

  Node *node() const { return node_.get(); }
  const std::shared_ptr<Node> &node_ptr() const { return node_; }

private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered view of the graph reachable from a root.
class Tape {
public:
  static Tape record(const Tensor &root);

  std::size_t size() const { return order_.size(); }
  const std::vector<Node *> &nodes() const { return order_; }

  /// Seeds d(root)/d(root) = 1 and runs every node's backward closure once,
  /// last-recorded first.
  void replay_backward();

private:
  std::vector<Node *> order_; // inputs before consumers; root last
};

/// Populates .grad on every requires_grad leaf reachable from `loss`.
void backward(const Tensor &loss);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

namespace detail {

/// Builds an op output. The backward closure is kept only when recording is
/// enabled and some input needs a gradient.
Tensor make_result(Shape shape, Buffer value,
                   std::vector<Tensor> inputs, const char *op,
                   std::function<void(Node &)> backward_fn);

} // namespace detail

/// Central-difference gradient check of a scalar function of several leaves.
/// The error of each coordinate is |a - n| / max(1, |a|, |n|); any non-finite
/// value in either estimate yields +inf.
struct GradCheckResult {
  double max_error = 0.0;
  std::vector<double> per_leaf; // max error per entry of `leaves`
  std::size_t coordinates = 0;
};

GradCheckResult grad_check(const std::function<Tensor()> &f,
                           std::span<Tensor> leaves, double h = 1e-5);

double grad_check(const std::function<Tensor(const Tensor &)> &f,
                  const Tensor &x, double h = 1e-5);

} // namespace mqccaf

// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace mqccaf {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto d : shape)
    n *= d;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Buffer values(numel(shape), v);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::span<const double> values,
                    bool requires_grad) {
  return from(std::move(shape), Buffer(values.begin(), values.end()),
              requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values,
                    bool requires_grad) {
  return from(std::move(shape), Buffer(values), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer &&values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0)
      throw ShapeError("tensor extents must be positive, got " +
                       shape_str(shape));
  if (numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " needs " +
                     std::to_string(numel(shape)) + " elements, got " +
                     std::to_string(values.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

std::span<double> Tensor::mutable_data() {
  if (node_->backward_fn)
    throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1)
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank())
    throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0, i = 0;
  for (auto ix : index) {
    if (ix >= node_->shape[i])
      throw ShapeError("at(): index out of range");
    flat = flat * node_->shape[i] + ix;
    ++i;
  }
  return node_->value[flat];
}

void Tensor::set_requires_grad(bool on) {
  if (node_->backward_fn)
    throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

Tensor Tensor::detach() const {
  return from(node_->shape, node_->value, false);
}

Tape Tape::record(const Tensor &root) {
  Tape tape;
  std::unordered_set<Node *> seen;
  // Iterative post-order DFS; recurrent graphs are thousands of nodes deep.
  std::vector<std::pair<Node *, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node *child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::replay_backward() {
  if (order_.empty())
    return;
  Node *root = order_.back();
  auto &g = root->ensure_grad();
  std::fill(g.begin(), g.end(), 1.0);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node *n = *it;
    if (!n->backward_fn || n->grad.empty())
      continue;
    n->backward_fn(*n);
    // Interior gradients are consumed; keep memory flat across deep graphs.
    if (n != root)
      Buffer().swap(n->grad);
  }
}

void backward(const Tensor &loss) {
  if (loss.size() != 1)
    throw ShapeError("backward() requires a scalar output, got " +
                     shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::logic_error("backward() on a tensor that does not require grad");
  Tape::record(loss).replay_backward();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_result(Shape shape, Buffer value,
                   std::vector<Tensor> inputs, const char *op,
                   std::function<void(Node &)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (g_grad_enabled)
    for (auto &t : inputs)
      needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto &t : inputs)
      n->inputs.push_back(t.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

} // namespace detail

namespace {

double rel_error(double a, double n) {
  if (!std::isfinite(a) || !std::isfinite(n))
    return std::numeric_limits<double>::infinity();
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

double eval_scalar(const std::function<Tensor()> &f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.size() != 1)
    throw ShapeError("grad_check: function must be scalar-valued");
  return y.item();
}

} // namespace

GradCheckResult grad_check(const std::function<Tensor()> &f,
                           std::span<Tensor> leaves, double h) {
  for (auto &leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tensor y = f();
  if (y.size() != 1)
    throw ShapeError("grad_check: function must be scalar-valued");

  GradCheckResult result;
  result.per_leaf.assign(leaves.size(), 0.0);
  if (!std::isfinite(y.item())) {
    result.max_error = std::numeric_limits<double>::infinity();
    std::fill(result.per_leaf.begin(), result.per_leaf.end(),
              result.max_error);
    return result;
  }
  backward(y);

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor &leaf = leaves[li];
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad())
      std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto x = leaf.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = eval_scalar(f);
      x[i] = saved - h;
      const double down = eval_scalar(f);
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_error(analytic[i], numeric));
      ++result.coordinates;
    }
    result.per_leaf[li] = worst;
    result.max_error = std::max(result.max_error, worst);
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor &)> &f,
                  const Tensor &x, double h) {
  Tensor leaf = Tensor::from(x.shape(), x.data(),
                             true);
  std::vector<Tensor> leaves{leaf};
  return grad_check([&] { return f(leaf); }, leaves, h).max_error;
}

} // namespace mqccaf

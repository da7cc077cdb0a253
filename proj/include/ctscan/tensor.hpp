#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle to a shared Node. Nodes produced by an op keep
// their inputs and a backward rule only when at least one input requires a
// gradient, so evaluation-only forward passes build no graph at all.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctscan/error.hpp"

namespace ctscan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until needed; leaves with requires_grad allocate eagerly
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> values(shape_numel(shape), T{0});
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> values(shape_numel(shape), value);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  std::string_view op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Parameters are mutated in place by the optimizer between forward passes.
  std::span<T> mutable_data() {
    if (!is_leaf()) throw ContractError("only leaf tensors may be mutated");
    return node_->value;
  }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), T{0});
  }

  // Fresh leaf with a copy of the values and no history.
  Tensor detach_copy(bool requires_grad) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Topologically ordered record of the ops reachable from a root that carry
/// gradient. Inputs always precede their consumers; each node appears once.
template <class T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    tape.root_ = root.node_ptr();
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS; recursion would overflow on long chains.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  std::span<Node<T>* const> nodes() const { return order_; }

  std::vector<std::string_view> op_names() const {
    std::vector<std::string_view> names;
    names.reserve(order_.size());
    for (const Node<T>* n : order_) names.push_back(n->op);
    return names;
  }

  std::size_t count(std::string_view op) const {
    std::size_t c = 0;
    for (const Node<T>* n : order_) c += (n->op == op);
    return c;
  }

  // Seeds the last node (the root) with unit gradient and runs every
  // backward rule once in reverse order.
  void run() const {
    if (order_.empty()) return;
    Node<T>* root = order_.back();
    root->ensure_grad();
    for (T& g : root->grad) g = T{1};
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> order_;
  std::shared_ptr<Node<T>> root_;  // keeps the graph alive when recorded from a temporary
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad buffer.
/// Callers zero gradients between optimization steps.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  Tape<T>::record(loss).run();
}

namespace detail {

template <class T>
void check_finite(std::string_view op, const std::vector<T>& values) {
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

// Builds the output node of an op. The backward rule is attached only when an
// input carries gradient.
template <class T, class Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs, Backward&& rule) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  for (const Tensor<T>& in : inputs) needs_grad = needs_grad || (in.defined() && in.requires_grad());
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor<T>& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node_ptr());
    }
    node->backward = std::forward<Backward>(rule);
  }
  return Tensor<T>(std::move(node));
}

// Grad buffer of an input if it participates in differentiation, else null.
template <class T>
std::vector<T>* grad_sink(const std::shared_ptr<Node<T>>& in) {
  return in->requires_grad ? &in->ensure_grad() : nullptr;
}

}  // namespace detail
}  // namespace ctscan

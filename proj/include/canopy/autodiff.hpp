#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "canopy/tensor.hpp"

namespace canopy {

// Reverse-mode autodiff on a recorded tape. Every op result is a Var that
// keeps its inputs alive until the graph is dropped.
//
// Gradient policy: backward() accumulates into leaf gradients. Callers zero
// them between steps (the trainer does this before each batch).

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(const Tensor<T>&)> backward_fn;

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) {
      grad = g;
      return;
    }
    T* dst = grad.ptr();
    const T* src = g.ptr();
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
  }

  // Returns a writable grad buffer sized like value, zero-filled if new.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  // Gradient or zeros when backward never reached this variable.
  Tensor<T> grad_or_zero() const {
    return has_grad() ? node_->grad : Tensor<T>(shape());
  }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds an op result. The backward closure is kept only when some input
// needs a gradient, so inference graphs hold no references to inputs.
template <class T, class Fn>
Var<T> make_result(Tensor<T> value,
                   std::initializer_list<std::shared_ptr<Node<T>>> inputs,
                   Fn&& backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->is_leaf = false;
  if (grad_mode_flag()) {
    for (const auto& in : inputs) {
      if (in->requires_grad) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    node->parents.assign(inputs.begin(), inputs.end());
    node->backward_fn = std::forward<Fn>(backward_fn);
  }
  return Var<T>(std::move(node));
}

template <class T>
void backward(const Var<T>& loss) {
  if (loss.value().size() != 1) {
    throw InvalidArgument("backward: loss must be a scalar, got shape " +
                          shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad = Tensor<T>();
  }
  Node<T>* root = loss.node().get();
  if (root->is_leaf) {
    root->accumulate(Tensor<T>(root->value.shape(), T{1}));
    return;
  }
  root->grad = Tensor<T>(root->value.shape(), T{1});

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf || !n->backward_fn || n->grad.empty()) continue;
    n->backward_fn(n->grad);
    n->grad = Tensor<T>();  // intermediates are not needed afterwards
  }
}

}  // namespace canopy

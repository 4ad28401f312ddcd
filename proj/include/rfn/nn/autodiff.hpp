#pragma once

// Minimal reverse-mode autodiff tape. A Var wraps a shared graph node holding
// the value, the accumulated gradient and a closure that pushes gradients to
// its parents. Graphs are built by the free functions in ops.hpp; calling
// backward(root) on a scalar root runs the closures in reverse topological
// order. Each model instance builds its own graphs, so independent instances
// are safe to run on separate threads.

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "rfn/nn/tensor.hpp"

namespace rfn::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void()> backprop;  // pushes this->grad into parents' grads

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.dims());
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::shared_ptr<Node<T>> node() const { return node_; }

  T scalar() const {
    if (node_->value.size() != 1) throw std::logic_error("Var::scalar: not a scalar");
    return node_->value[0];
  }

  void zero_grad() {
    if (node_) {
      node_->ensure_grad();
      node_->grad.fill(T(0));
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
inline void topo_order(Node<T>* root, std::vector<Node<T>*>& order) {
  // Iterative post-order DFS over parents.
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* parent = node->parents[idx++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Accumulates d(root)/d(leaf) into every reachable requires_grad node.
// Gradients are added to whatever is already stored; call zero_grad on leaves
// (or use fresh graphs) between backward passes.
template <typename T>
inline void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw std::logic_error("backward: root must be scalar");
  Node<T>* r = root.node().get();
  if (!r->requires_grad) return;
  std::vector<Node<T>*> order;
  detail::topo_order(r, order);
  // order is post-order: parents before children; walk it backwards.
  for (Node<T>* n : order) n->ensure_grad();
  r->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// Helper for op implementations.
template <typename T>
inline std::shared_ptr<Node<T>> make_node(Tensor<T> value,
                                          std::vector<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

}  // namespace rfn::nn

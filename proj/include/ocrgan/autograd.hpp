#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op returns a Var holding its value. When any input requires a
// gradient, the result keeps its inputs alive and records a closure that
// pushes the result's gradient into them. `backward(loss)` walks the graph in
// reverse topological order. Leaves with requires_grad == false (frozen
// parameters, data) never receive gradient.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ocrgan/tensor.hpp"

namespace ocrgan::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, allocated (zeroed) on first use.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.shape() == value.shape() && !grad.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  Tensor<T>& grad() { return node_->grad_buffer(); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. `fn(self)` must accumulate `self.grad` into each input
/// whose requires_grad flag is set.
template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  for (const auto& in : inputs)
    if (in.requires_grad()) node->requires_grad = true;
  if (node->requires_grad) {
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Fn>(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  for (const auto& in : inputs)
    if (in.requires_grad()) node->requires_grad = true;
  if (node->requires_grad) {
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Fn>(fn);
  }
  return Var<T>(std::move(node));
}

/// Backpropagates from `root`, seeding its gradient with ones (or `seed`).
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor<T>& g = root.node()->grad_buffer();
  if (seed) {
    if (seed->shape() != g.shape()) throw ShapeError("backward: seed shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    for (auto& v : g.values()) v += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

}  // namespace ocrgan::ag

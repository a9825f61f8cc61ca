#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sal3sd/tensor.hpp"

namespace sal3sd {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value in a dynamically recorded computation. Leaves that require grad
/// accumulate into `grad`; interior nodes carry a closure that pushes their
/// own gradient into their inputs.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Node& node() const { return *node_; }
  const NodePtr& ptr() const { return node_; }

  void zero_grad() const { node_->grad = Tensor(); }

 private:
  NodePtr node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

/// Stop-gradient: same value, no path back to the producer.
inline Var detach(const Var& v) { return constant(v.value()); }

/// Creates an op node. When no input needs a gradient the closure and the
/// input links are dropped, so inference builds no tape.
inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

/// Reverse sweep from a scalar root. Gradients accumulate into leaves.
inline void backward(const Var& root, double seed = 1.0) {
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw ShapeError("backward() root must be a scalar, got " + shape_str(root.shape()));

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->grad = Tensor();
      n->backward_fn = nullptr;
      n->inputs.clear();
    }
  }
}

/// Accumulates `g` into the input slot `i` of `self` if that input wants a gradient.
inline void accumulate(Node& self, std::size_t i, const Tensor& g) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return;
  Tensor& dst = in.grad_buffer();
  double* d = dst.data();
  const double* s = g.data();
  for (std::size_t k = 0; k < dst.size(); ++k) d[k] += s[k];
}

}  // namespace sal3sd

#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ifss/error.hpp"
#include "ifss/tensor.hpp"

namespace ifss {

// Define-by-run reverse-mode engine. A Graph is built fresh for every forward
// pass, confined to one logical thread, and backward()'d at most once. Values
// are computed eagerly at op-creation time; each node also keeps a recompute
// closure so the whole graph can be replayed after leaf values change (used by
// the finite-difference checker).
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  const char* op = "";
  std::vector<Node*> parents;
  std::function<void(Node&)> recompute_fn;  // value from parents' values
  std::function<void(Node&)> backward_fn;   // accumulate self.grad into parents

  bool is_scalar() const { return value.size() == 1; }
};

namespace detail {

// Grad buffers allocate on first touch; a node left untouched after backward
// is unreachable from the root and reads as zero.
template <typename T>
Tensor<T>& acc_grad(Node<T>* n) {
  if (n->grad.size() != n->value.size()) n->grad = Tensor<T>(n->value.shape());
  return n->grad;
}

}  // namespace detail

template <typename T>
class Graph {
 public:
  using scalar_type = T;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Node<T>* leaf(Tensor<T> value, bool requires_grad, const char* op = "leaf") {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    return &n;
  }

  Node<T>* param(Tensor<T> value) { return leaf(std::move(value), true, "param"); }
  Node<T>* constant(Tensor<T> value) { return leaf(std::move(value), false, "const"); }

  Node<T>* make(const char* op, std::vector<Node<T>*> parents,
                std::function<void(Node<T>&)> recompute_fn,
                std::function<void(Node<T>&)> backward_fn) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.op = op;
    n.parents = std::move(parents);
    for (Node<T>* p : n.parents) n.requires_grad |= p->requires_grad;
    n.recompute_fn = std::move(recompute_fn);
    n.backward_fn = std::move(backward_fn);
    n.recompute_fn(n);
    return &n;
  }

  // Reverse accumulation from a scalar root. Insertion order is a topological
  // order (ops are created after their inputs), so one reverse sweep suffices;
  // nodes whose grad was never touched are unreachable and skipped.
  void backward(Node<T>* root) {
    if (!root->is_scalar()) {
      throw Error::numeric("non-scalar root: backward requires a scalar node, got shape " +
                           shape_str(root->value.shape()));
    }
    detail::acc_grad(root).fill(T{1});
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (n.grad.size() == n.value.size() && n.backward_fn && n.requires_grad) {
        n.backward_fn(n);
      }
    }
  }

  // Replays every non-leaf node in insertion order, refreshing values from
  // current leaf contents.
  void recompute() {
    for (Node<T>& n : nodes_) {
      if (n.recompute_fn) n.recompute_fn(n);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node<T>> nodes_;  // stable addresses
};

template <typename T>
Tensor<T> grad_or_zero(const Node<T>* n) {
  if (n->grad.size() == n->value.size()) return n->grad;
  return Tensor<T>(n->value.shape());
}

}  // namespace ifss

#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rfbnet/common.hpp"

namespace rfbnet {

template <typename T>
class Tensor;

namespace detail {

// Storage plus dynamic-graph node. Ops that see a grad-requiring input attach
// a backprop closure and keep their parents alive; backward() consumes the
// graph once and then releases it.
template <typename T>
struct TensorNode {
  Shape4 shape{};
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<Tensor<T>> parents;
  std::function<void(TensorNode<T>&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(const Shape4& s, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = s;
    t.node_->value.assign(s.numel(), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(const Shape4& s, T v) {
    Tensor t = zeros(s);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from_vector(const Shape4& s, std::vector<T> v) {
    if (v.size() != s.numel()) {
      throw ShapeError(detail::cat("from_vector: ", v.size(), " values for shape ", s.str()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = s;
    t.node_->value = std::move(v);
    return t;
  }

  // Result of an op: inherits requires_grad from parents and records the
  // backprop closure only when a grad path exists.
  static Tensor op_result(const Shape4& s, std::vector<Tensor> parents,
                          std::function<void(detail::TensorNode<T>&)> backprop) {
    Tensor t = zeros(s);
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape4& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T at(int n, int c, int h, int w) const {
    return node_->value[node_->shape.index(n, c, h, w)];
  }
  T& at(int n, int c, int h, int w) {
    return node_->value[node_->shape.index(n, c, h, w)];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (v) node_->ensure_grad();
    return *this;
  }

  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  detail::TensorNode<T>* node() const { return node_.get(); }

  // Value copy detached from the graph.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

// Reverse-mode sweep from a scalar loss. Populates .grad on every
// grad-requiring tensor reachable through the recorded closures, then frees
// the graph; a second sweep over the same graph is an error.
template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ValueError("backward: loss must be a defined scalar tensor");
  }
  auto* root = loss.node();
  if (root->consumed) {
    throw ValueError("backward: tape already consumed for this loss");
  }
  if (!root->requires_grad) {
    throw ValueError("backward: loss does not require grad (no tape)");
  }

  // Iterative post-order DFS.
  std::vector<detail::TensorNode<T>*> order;
  std::unordered_set<detail::TensorNode<T>*> seen;
  std::vector<std::pair<detail::TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* p = node->parents[next].node();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->ensure_grad();
  root->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backprop) n->backprop(*n);
  }

  // Consume the tape.
  for (auto* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
    n->consumed = true;
  }
}

namespace detail {

// Accumulate v into a parent's grad if it participates in the tape.
template <typename T>
inline void acc_grad(Tensor<T>& parent, std::size_t idx, T v) {
  auto* p = parent.node();
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad[idx] += v;
}

}  // namespace detail

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
  for (const T v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

// Forward-op postcondition, compiled in for test builds only.
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
#ifdef RFBNET_FINITE_CHECKS
  if (!all_finite(t)) {
    throw NumericError(detail::cat(op, ": non-finite value in output of shape ", t.shape().str()));
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace rfbnet

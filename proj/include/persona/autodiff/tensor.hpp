/*
 * Copyright (c) 2026, the persona-moe contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "persona/error.hpp"

namespace persona::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// One vertex of the computation graph. Leaves hold parameters or inputs;
/// interior nodes hold an op's cached forward value and the closure that
/// pushes this node's gradient into its parents.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Shared handle to a graph node. Copies alias the same node.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeMismatchError("tensor shape " + shape_string(shape) + " holds " +
                               std::to_string(shape_numel(shape)) + " values, got " +
                               std::to_string(values.size()));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeMismatchError("tensor dimensions must be positive");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> values(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from(Shape{}, std::vector<T>{v}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return from(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const {
    if (rank() == 2) return node_->shape[1];
    if (rank() == 1) return node_->shape[0];
    return 1;
  }

  std::span<const T> value() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_value() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  void set_requires_grad(bool on) const {
    if (!node_->leaf) throw UsageError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  void zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Fresh leaf holding a copy of this tensor's value.
  Tensor detach(bool requires_grad = false) const {
    return from(shape(), node_->value, requires_grad);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return Tensor<U>::from(shape(), std::move(out), requires_grad());
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds an op output. The backward closure is attached only when graph
/// recording is on and some parent needs a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, const char* op,
                        const std::vector<Tensor<T>>& parents,
                        std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // (node, next parent index) frames; iterative to survive deep graphs.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; interior gradients are reset on every call so repeated sweeps over
/// the same graph with zeroed leaves reproduce identical values.
template <class T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw UsageError("backward requires a scalar root, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  auto order = detail::topological_order(&root.node());
  for (Node<T>* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), T(0));
  }
  root.node().grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace persona::ad

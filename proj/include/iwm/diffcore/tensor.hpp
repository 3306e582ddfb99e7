#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "iwm/error.hpp"

namespace iwm {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstRowMatMap = Eigen::Map<const RowMat<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  Shape shape;
  Vec<Scalar> value;
  Vec<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Vec<Scalar>& ensure_grad() {
    if (grad.size() != value.size()) grad = Vec<Scalar>::Zero(value.size());
    return grad;
  }
};

/// Dense row-major tensor with reverse-mode differentiation.
///
/// Copies share the underlying node (handle semantics, like a
/// `std::shared_ptr`). Operations build a graph only when at least one input
/// requires a gradient and grad mode is enabled on the calling thread.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using NodeT = Node<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  Tensor(Shape shape, Vec<Scalar> values, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    for (Index e : shape) {
      if (e <= 0) throw ShapeError("tensor", "non-positive extent in " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor", "shape " + to_string(shape) + " does not hold " +
                                     std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, Vec<Scalar>::Zero(numel(shape)), requires_grad);
  }
  static Tensor ones(const Shape& shape) { return Tensor(shape, Vec<Scalar>::Ones(numel(shape))); }
  static Tensor full(const Shape& shape, Scalar v) {
    return Tensor(shape, Vec<Scalar>::Constant(numel(shape), v));
  }
  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return Tensor({1}, Vec<Scalar>::Constant(1, v), requires_grad);
  }
  static Tensor from_matrix(const RowMat<Scalar>& m, bool requires_grad = false) {
    return Tensor({m.rows(), m.cols()}, Eigen::Map<const Vec<Scalar>>(m.data(), m.size()),
                  requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    return node_->shape.at(static_cast<std::size_t>(axis));
  }
  Index size() const { return node_->value.size(); }
  /// Extent of the last axis; the "column" count of the matrix view.
  Index cols() const { return node_->shape.back(); }
  Index rows() const { return size() / cols(); }

  const Vec<Scalar>& values() const { return node_->value; }
  Vec<Scalar>& mutable_values() { return node_->value; }
  Scalar operator[](Index i) const { return node_->value[i]; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item", "tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Vec<Scalar>& grad() const { return node_->grad; }
  Vec<Scalar>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.setZero(node_->value.size());
  }

  /// Matrix view: all leading axes flattened into rows, last axis as columns.
  ConstRowMatMap<Scalar> matrix() const { return {node_->value.data(), rows(), cols()}; }
  RowMatMap<Scalar> mutable_matrix() { return {node_->value.data(), rows(), cols()}; }

  /// Same values, no history.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires a
  /// gradient. Repeated calls accumulate; call zero_grad between steps.
  void backward() const;

  NodeT* node() const { return node_.get(); }
  const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

/// Builds an op result. The backward closure is attached only when the graph
/// is being recorded and some parent requires a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Vec<Scalar> value, std::vector<Tensor<Scalar>> parents,
                           std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward", "loss must be a scalar, got " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; only leaves accumulate across passes.
  for (NodeT* n : order) {
    if (n->backward) n->grad.setZero(n->value.size());
  }
  node_->ensure_grad()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

}  // namespace iwm

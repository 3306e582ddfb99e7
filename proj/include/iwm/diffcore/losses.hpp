#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "iwm/diffcore/ops.hpp"

namespace iwm {

/// Class id excluded from cross-entropy (low-confidence or sky pixels).
inline constexpr int kIgnoreLabel = 255;

/// Probability floor applied before the log in focal().
inline constexpr double kProbabilityFloor = 1e-12;

/// Mean absolute error.
template <typename S>
Tensor<S> l1(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape()) throw ShapeError("l1", pred.shape(), target.shape());
  const Vec<S> diff = pred.values() - target.values();
  const S count = S(diff.size());
  return make_result<S>({1}, Vec<S>::Constant(1, diff.cwiseAbs().sum() / count), {pred, target},
                        [diff, count](Node<S>& n) {
    const Vec<S> g = diff.unaryExpr([](S d) { return d > 0 ? S(1) : (d < 0 ? S(-1) : S(0)); }) * (n.grad[0] / count);
    if (auto* p = detail::parent(n, 0)) p->ensure_grad() += g;
    if (auto* t = detail::parent(n, 1)) t->ensure_grad() -= g;
  });
}

/// Mean squared error.
template <typename S>
Tensor<S> mse(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape()) throw ShapeError("mse", pred.shape(), target.shape());
  const Vec<S> diff = pred.values() - target.values();
  const S count = S(diff.size());
  return make_result<S>({1}, Vec<S>::Constant(1, diff.squaredNorm() / count), {pred, target},
                        [diff, count](Node<S>& n) {
    const Vec<S> g = diff * (S(2) * n.grad[0] / count);
    if (auto* p = detail::parent(n, 0)) p->ensure_grad() += g;
    if (auto* t = detail::parent(n, 1)) t->ensure_grad() -= g;
  });
}

/// Mean of -log softmax(logits)[class] over rows whose class is not
/// kIgnoreLabel. logits is [..., C]; one class id per row. Returns 0 when
/// every row is ignored.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const std::uint8_t> class_ids) {
  const Index rows = logits.rows(), C = logits.cols();
  if (static_cast<Index>(class_ids.size()) != rows) {
    throw ShapeError("cross_entropy", logits.shape(), Shape{static_cast<Index>(class_ids.size())});
  }
  RowMat<S> probs(rows, C);
  ConstRowMatMap<S> L = logits.matrix();
  S total = 0;
  Index counted = 0;
  for (Index r = 0; r < rows; ++r) {
    const S mx = L.row(r).maxCoeff();
    probs.row(r) = (L.row(r).array() - mx).exp();
    const S z = probs.row(r).sum();
    probs.row(r) /= z;
    const int id = class_ids[static_cast<std::size_t>(r)];
    if (id == kIgnoreLabel) continue;
    if (id < 0 || id >= C) throw ValueError("cross_entropy: class id " + std::to_string(id) + " >= " + std::to_string(C));
    total += -(L(r, id) - mx - std::log(z));
    ++counted;
  }
  const S denom = counted ? S(counted) : S(1);
  std::vector<std::uint8_t> ids(class_ids.begin(), class_ids.end());
  return make_result<S>({1}, Vec<S>::Constant(1, total / denom), {logits},
                        [probs = std::move(probs), ids = std::move(ids), rows, C, denom](Node<S>& n) {
    auto* p = detail::parent(n, 0);
    if (!p) return;
    RowMatMap<S> g(p->ensure_grad().data(), rows, C);
    const S scale = n.grad[0] / denom;
    for (Index r = 0; r < rows; ++r) {
      const int id = ids[static_cast<std::size_t>(r)];
      if (id == kIgnoreLabel) continue;
      g.row(r) += probs.row(r) * scale;
      g(r, id) -= scale;
    }
  });
}

/// Focal loss on probabilities: -(1 - p_j)^gamma * log(p_j), with p_j
/// floored at kProbabilityFloor.
template <typename S>
Tensor<S> focal(const Tensor<S>& probs, Index true_index, S gamma) {
  if (true_index < 0 || true_index >= probs.size()) {
    throw ValueError("focal: index " + std::to_string(true_index) + " outside " + std::to_string(probs.size()) + " scores");
  }
  const S raw = probs[true_index];
  const bool clamped = raw < S(kProbabilityFloor);
  const S p = clamped ? S(kProbabilityFloor) : raw;
  const S loss = -std::pow(S(1) - p, gamma) * std::log(p);
  return make_result<S>({1}, Vec<S>::Constant(1, loss), {probs}, [=](Node<S>& n) {
    auto* pp = detail::parent(n, 0);
    if (!pp || clamped) return;
    const S one_minus = S(1) - p;
    const S d = (gamma == S(0) ? S(0) : gamma * std::pow(one_minus, gamma - S(1)) * std::log(p)) -
                std::pow(one_minus, gamma) / p;
    pp->ensure_grad()[true_index] += n.grad[0] * d;
  });
}

}  // namespace iwm

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "iwm/diffcore/nn.hpp"

namespace iwm {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

/// First-order optimizer over a parameter registry. `sgd` applies
/// w <- w - lr * g; `adam` is bias-corrected Adam.
template <typename S>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ParameterRegistry<S>& params) : config_(config) {
    for (const auto& p : params.entries()) {
      first_.push_back(Vec<S>::Zero(p.tensor.size()));
      second_.push_back(Vec<S>::Zero(p.tensor.size()));
    }
  }

  const OptimizerConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }
  std::vector<Vec<S>>& first_moments() { return first_; }
  std::vector<Vec<S>>& second_moments() { return second_; }
  const std::vector<Vec<S>>& first_moments() const { return first_; }
  const std::vector<Vec<S>>& second_moments() const { return second_; }

  /// Returns the pre-clip global gradient norm.
  double step(ParameterRegistry<S>& params) {
    const auto& entries = params.entries();
    if (entries.size() != first_.size()) throw ValueError("optimizer state does not match parameter registry");
    double sq = 0;
    for (const auto& p : entries) {
      if (p.tensor.has_grad()) sq += static_cast<double>(p.tensor.grad().squaredNorm());
    }
    const double norm = std::sqrt(sq);
    const S clip = (config_.clip_norm > 0 && norm > config_.clip_norm) ? S(config_.clip_norm / norm) : S(1);

    ++steps_;
    const S lr = S(config_.lr);
    const S b1 = S(config_.beta1), b2 = S(config_.beta2), eps = S(config_.eps);
    const S c1 = S(1) - S(std::pow(config_.beta1, static_cast<double>(steps_)));
    const S c2 = S(1) - S(std::pow(config_.beta2, static_cast<double>(steps_)));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Tensor<S> t = entries[i].tensor;
      if (!t.has_grad()) continue;
      const Vec<S> g = t.grad() * clip;
      Vec<S>& w = t.mutable_values();
      if (config_.kind == OptimizerKind::sgd) {
        w -= lr * g;
        continue;
      }
      first_[i] = b1 * first_[i] + (S(1) - b1) * g;
      second_[i] = b2 * second_[i] + (S(1) - b2) * g.cwiseAbs2();
      w.array() -= lr * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + eps);
    }
    return norm;
  }

 private:
  OptimizerConfig config_;
  std::int64_t steps_ = 0;
  std::vector<Vec<S>> first_;
  std::vector<Vec<S>> second_;
};

}  // namespace iwm

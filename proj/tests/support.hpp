#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "iwm/diffcore/nn.hpp"

namespace iwm::testing {

using T64 = Tensor<double>;

inline T64 random_tensor(const Shape& shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vec<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return T64(shape, v, requires_grad);
}

/// Normwise relative error between two gradient vectors. The denominator is
/// floored at 1e-6 so identically-zero gradients (e.g. key biases, which
/// softmax cancels) are not dominated by finite-difference roundoff.
inline double relative_error(const Vec<double>& a, const Vec<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-6});
  return (a - b).norm() / scale;
}

/// Central-difference check of d loss / d input for every input. Returns the
/// worst normwise relative error across inputs.
inline double gradcheck(std::vector<T64> inputs, const std::function<T64()>& loss_fn, double h = 1e-5,
                        std::vector<double>* per_input = nullptr) {
  for (auto& t : inputs) t.zero_grad();
  loss_fn().backward();
  double worst = 0;
  for (auto& t : inputs) {
    const Vec<double> analytic = t.grad();
    Vec<double> numeric(t.size());
    NoGradGuard guard;
    for (Index i = 0; i < t.size(); ++i) {
      const double saved = t.values()[i];
      t.mutable_values()[i] = saved + h;
      const double up = loss_fn().item();
      t.mutable_values()[i] = saved - h;
      const double down = loss_fn().item();
      t.mutable_values()[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    const double err = relative_error(analytic, numeric);
    if (per_input) per_input->push_back(err);
    worst = std::max(worst, err);
  }
  return worst;
}

/// Weighted sum with fixed random weights, so every output element matters.
inline T64 probe(const T64& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng, false)));
}

// Literal attention formula with explicit loops; shares nothing with the
// library's attention kernel except the parameter values.
inline RowMat<double> attention_oracle(const RowMat<double>& queries, const RowMat<double>& context,
                                const AttentionParams<double>& p) {
  auto affine = [](const RowMat<double>& x, const Linear<double>& l) {
    const auto W = l.weight.matrix();
    RowMat<double> y(x.rows(), W.cols());
    for (Index r = 0; r < x.rows(); ++r)
      for (Index c = 0; c < W.cols(); ++c) {
        double acc = l.bias[c];
        for (Index i = 0; i < x.cols(); ++i) acc += x(r, i) * W(i, c);
        y(r, c) = acc;
      }
    return y;
  };
  const RowMat<double> Q = affine(queries, p.query), K = affine(context, p.key), V = affine(context, p.value);
  const Index D = Q.cols(), dh = D / p.heads;
  RowMat<double> out = RowMat<double>::Zero(Q.rows(), D);
  for (Index h = 0; h < p.heads; ++h) {
    for (Index i = 0; i < Q.rows(); ++i) {
      std::vector<double> w(static_cast<std::size_t>(K.rows()));
      double mx = -1e300;
      for (Index j = 0; j < K.rows(); ++j) {
        double s = 0;
        for (Index c = 0; c < dh; ++c) s += Q(i, h * dh + c) * K(j, h * dh + c);
        w[static_cast<std::size_t>(j)] = s / std::sqrt(double(dh));
        mx = std::max(mx, w[static_cast<std::size_t>(j)]);
      }
      double z = 0;
      for (auto& x : w) z += (x = std::exp(x - mx));
      for (Index j = 0; j < K.rows(); ++j)
        for (Index c = 0; c < dh; ++c) out(i, h * dh + c) += w[static_cast<std::size_t>(j)] / z * V(j, h * dh + c);
    }
  }
  return affine(out, p.output);
}

}  // namespace iwm::testing

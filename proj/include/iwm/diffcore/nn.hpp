#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "iwm/diffcore/ops.hpp"

namespace iwm {

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;
};

/// Owns every trainable tensor of a model under a unique dotted name.
/// Initialization draws uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a
/// seeded generator, in registration order.
template <typename S>
class ParameterRegistry {
 public:
  explicit ParameterRegistry(std::uint64_t seed = 0) : rng_(seed) {}

  // Handles held by layers alias registry entries; copying would split them.
  ParameterRegistry(const ParameterRegistry&) = delete;
  ParameterRegistry& operator=(const ParameterRegistry&) = delete;
  ParameterRegistry(ParameterRegistry&&) = default;
  ParameterRegistry& operator=(ParameterRegistry&&) = default;

  Tensor<S> create(const std::string& name, Shape shape, Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Vec<S> values(numel(shape));
    for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<S>(dist(rng_));
    return insert(name, Tensor<S>(std::move(shape), std::move(values), true));
  }

  Tensor<S> create_zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor<S>::zeros(shape, true));
  }

  const std::vector<Parameter<S>>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  const Tensor<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].tensor;
  }
  Tensor<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  Index scalar_count() const {
    Index total = 0;
    for (const auto& p : params_) total += p.tensor.size();
    return total;
  }

 private:
  Tensor<S> insert(const std::string& name, Tensor<S> t) {
    if (!index_.emplace(name, params_.size()).second) throw ValueError("duplicate parameter name " + name);
    params_.push_back({name, t});
    return t;
  }

  std::vector<Parameter<S>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::mt19937_64 rng_;
};

/// y = x W + b with W[in, out].
template <typename S>
struct Linear {
  Tensor<S> weight;
  Tensor<S> bias;

  Linear() = default;
  Linear(ParameterRegistry<S>& reg, const std::string& name, Index in, Index out)
      : weight(reg.create(name + ".weight", {in, out}, in)), bias(reg.create(name + ".bias", {out}, in)) {}

  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }

  Tensor<S> operator()(const Tensor<S>& x) const {
    if (x.dim(-1) != in_features()) throw ShapeError("linear", x.shape(), weight.shape());
    return add(matmul(x, weight), bias);
  }
};

/// Affine layers with GELU between consecutive layers (none after the last).
template <typename S>
struct Mlp {
  std::vector<Linear<S>> layers;

  Mlp() = default;
  /// widths = {d_in, hidden..., d_out}.
  Mlp(ParameterRegistry<S>& reg, const std::string& name, const std::vector<Index>& widths) {
    if (widths.size() < 2) throw ValueError("mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(reg, name + "." + std::to_string(i), widths[i], widths[i + 1]);
    }
  }

  Tensor<S> operator()(Tensor<S> x) const {
    if (x.dim(-1) != layers.front().in_features()) throw ShapeError("mlp", x.shape(), layers.front().weight.shape());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = gelu(x);
    }
    return x;
  }
};

/// Query/key/value/output projections for multi-head attention.
template <typename S>
struct AttentionParams {
  Linear<S> query, key, value, output;
  Index heads = 1;

  AttentionParams() = default;
  AttentionParams(ParameterRegistry<S>& reg, const std::string& name, Index dim, Index context_dim, Index heads_)
      : heads(heads_) {
    if (heads_ <= 0 || dim % heads_ != 0) {
      throw ShapeError("attention", "width " + std::to_string(dim) + " not divisible by " + std::to_string(heads_) + " heads");
    }
    query = Linear<S>(reg, name + ".query", dim, dim);
    key = Linear<S>(reg, name + ".key", context_dim, dim);
    value = Linear<S>(reg, name + ".value", context_dim, dim);
    output = Linear<S>(reg, name + ".output", dim, dim);
  }
};

/// queries[Q, D] attend over context[C, Dc]. No positional terms: the result
/// is equivariant in query order and invariant to context order.
template <typename S>
Tensor<S> cross_attention(const Tensor<S>& queries, const Tensor<S>& context, const AttentionParams<S>& p) {
  return p.output(attention(p.query(queries), p.key(context), p.value(context), p.heads));
}

template <typename S>
Tensor<S> self_attention(const Tensor<S>& tokens, const AttentionParams<S>& p) {
  return cross_attention(tokens, tokens, p);
}

}  // namespace iwm

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "iwm/diffcore/tensor.hpp"

namespace iwm {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename S>
Node<S>* parent(Node<S>& n, std::size_t i) {
  Node<S>* p = n.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

inline Index normalize_axis(Index axis, Index rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(op, "axis out of range");
  return axis;
}

inline Index prod(const Shape& s, std::size_t begin, std::size_t end) {
  Index p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may broadcast when its shape is a
// suffix of the left operand's shape (bias rows, shared query vectors).

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) {
    return make_result<S>(a.shape(), a.values() + b.values(), {a, b}, [](Node<S>& n) {
      if (auto* pa = detail::parent(n, 0)) pa->ensure_grad() += n.grad;
      if (auto* pb = detail::parent(n, 1)) pb->ensure_grad() += n.grad;
    });
  }
  if (!detail::is_suffix(b.shape(), a.shape())) {
    if (detail::is_suffix(a.shape(), b.shape())) return add(b, a);
    throw ShapeError("add", a.shape(), b.shape());
  }
  const Index inner = b.size();
  const Index outer = a.size() / inner;
  Vec<S> out = a.values();
  RowMatMap<S>(out.data(), outer, inner).rowwise() += b.values().transpose();
  return make_result<S>(a.shape(), std::move(out), {a, b}, [outer, inner](Node<S>& n) {
    if (auto* pa = detail::parent(n, 0)) pa->ensure_grad() += n.grad;
    if (auto* pb = detail::parent(n, 1)) {
      pb->ensure_grad() += ConstRowMatMap<S>(n.grad.data(), outer, inner).colwise().sum().transpose();
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return make_result<S>(a.shape(), a.values() * factor, {a}, [factor](Node<S>& n) {
    if (auto* pa = detail::parent(n, 0)) pa->ensure_grad() += n.grad * factor;
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
  return make_result<S>(a.shape(), a.values().cwiseProduct(b.values()), {a, b}, [](Node<S>& n) {
    const auto& va = n.parents[0]->value;
    const auto& vb = n.parents[1]->value;
    if (auto* pa = detail::parent(n, 0)) pa->ensure_grad() += n.grad.cwiseProduct(vb);
    if (auto* pb = detail::parent(n, 1)) pb->ensure_grad() += n.grad.cwiseProduct(va);
  });
}

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S c) { return scale(a, c); }
template <typename S> Tensor<S> operator*(S c, const Tensor<S>& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) throw ShapeError("reshape", a.shape(), shape);
  return make_result<S>(std::move(shape), a.values(), {a}, [](Node<S>& n) {
    if (auto* pa = detail::parent(n, 0)) pa->ensure_grad() += n.grad;
  });
}

/// Swaps the last two axes.
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() < 2) throw ShapeError("transpose", "rank must be >= 2, got " + to_string(a.shape()));
  const Index r = a.dim(-2), c = a.dim(-1), batch = a.size() / (r * c);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Vec<S> out(a.size());
  for (Index b = 0; b < batch; ++b) {
    RowMatMap<S>(out.data() + b * r * c, c, r) = ConstRowMatMap<S>(a.values().data() + b * r * c, r, c).transpose();
  }
  return make_result<S>(std::move(shape), std::move(out), {a}, [r, c, batch](Node<S>& n) {
    if (auto* pa = detail::parent(n, 0)) {
      auto& g = pa->ensure_grad();
      for (Index b = 0; b < batch; ++b) {
        RowMatMap<S>(g.data() + b * r * c, r, c) += ConstRowMatMap<S>(n.grad.data() + b * r * c, c, r).transpose();
      }
    }
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& ref = parts.front().shape();
  axis = detail::normalize_axis(axis, static_cast<Index>(ref.size()), "concat");
  const auto ax = static_cast<std::size_t>(axis);
  const Index outer = detail::prod(ref, 0, ax);
  const Index inner = detail::prod(ref, ax + 1, ref.size());
  std::vector<Index> lens;
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw ShapeError("concat", ref, s);
    s[ax] = ref[ax];
    if (s != ref) throw ShapeError("concat", ref, p.shape());
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[ax] = total;
  Vec<S> out(numel(shape));
  Index offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Index block = lens[i] * inner;
    for (Index o = 0; o < outer; ++o) {
      out.segment(o * total * inner + offset * inner, block) = parts[i].values().segment(o * block, block);
    }
    offset += lens[i];
  }
  return make_result<S>(std::move(shape), std::move(out), parts, [lens, outer, inner, total](Node<S>& n) {
    Index offset = 0;
    for (std::size_t i = 0; i < lens.size(); ++i) {
      const Index block = lens[i] * inner;
      if (auto* p = detail::parent(n, i)) {
        auto& g = p->ensure_grad();
        for (Index o = 0; o < outer; ++o) {
          g.segment(o * block, block) += n.grad.segment(o * total * inner + offset * inner, block);
        }
      }
      offset += lens[i];
    }
  });
}

/// Elements [begin, begin + count) along `axis`.
template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index begin, Index count) {
  axis = detail::normalize_axis(axis, a.rank(), "slice");
  const auto ax = static_cast<std::size_t>(axis);
  const Index len = a.shape()[ax];
  if (begin < 0 || count <= 0 || begin + count > len) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                  ") outside extent " + std::to_string(len));
  }
  const Index outer = detail::prod(a.shape(), 0, ax);
  const Index inner = detail::prod(a.shape(), ax + 1, a.shape().size());
  Shape shape = a.shape();
  shape[ax] = count;
  Vec<S> out(numel(shape));
  for (Index o = 0; o < outer; ++o) {
    out.segment(o * count * inner, count * inner) = a.values().segment((o * len + begin) * inner, count * inner);
  }
  return make_result<S>(std::move(shape), std::move(out), {a}, [outer, inner, len, begin, count](Node<S>& n) {
    if (auto* pa = detail::parent(n, 0)) {
      auto& g = pa->ensure_grad();
      for (Index o = 0; o < outer; ++o) {
        g.segment((o * len + begin) * inner, count * inner) += n.grad.segment(o * count * inner, count * inner);
      }
    }
  });
}

/// Sub-tensor at `index` along the first axis, with that axis dropped.
template <typename S>
Tensor<S> select(const Tensor<S>& a, Index index) {
  Shape rest(a.shape().begin() + 1, a.shape().end());
  if (rest.empty()) rest = {1};
  return reshape(slice(a, 0, index, 1), rest);
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& parts) {
  std::vector<Tensor<S>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted, 0);
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// a[..., m, k] x b[k, n], a[m, k] x b[..., k, n], or equal-batch products.
/// A rank-1 left operand is treated as a single row.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.rank() < 2) throw ShapeError("matmul", a.shape(), b.shape());
  const Index k = a.dim(-1);
  if (b.dim(-2) != k) throw ShapeError("matmul", a.shape(), b.shape());
  const Index n = b.dim(-1);

  if (b.rank() == 2) {
    const Index rows = a.size() / k;
    Shape shape = a.shape();
    shape.back() = n;
    Vec<S> out(rows * n);
    RowMatMap<S>(out.data(), rows, n).noalias() = ConstRowMatMap<S>(a.values().data(), rows, k) * b.matrix();
    return make_result<S>(std::move(shape), std::move(out), {a, b}, [rows, k, n](Node<S>& nd) {
      ConstRowMatMap<S> g(nd.grad.data(), rows, n);
      const auto& va = nd.parents[0]->value;
      const auto& vb = nd.parents[1]->value;
      if (auto* pa = detail::parent(nd, 0)) {
        RowMatMap<S>(pa->ensure_grad().data(), rows, k).noalias() += g * ConstRowMatMap<S>(vb.data(), k, n).transpose();
      }
      if (auto* pb = detail::parent(nd, 1)) {
        RowMatMap<S>(pb->ensure_grad().data(), k, n).noalias() += ConstRowMatMap<S>(va.data(), rows, k).transpose() * g;
      }
    });
  }

  if (a.rank() < 2) throw ShapeError("matmul", a.shape(), b.shape());
  const Index m = a.dim(-2);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  if (!a_batch.empty() && a_batch != b_batch) throw ShapeError("matmul", a.shape(), b.shape());
  const Index batch = numel(b_batch);
  const bool a_shared = a_batch.empty();
  Shape shape = b_batch;
  shape.push_back(m);
  shape.push_back(n);
  Vec<S> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    const S* pa = a.values().data() + (a_shared ? 0 : i * m * k);
    RowMatMap<S>(out.data() + i * m * n, m, n).noalias() =
        ConstRowMatMap<S>(pa, m, k) * ConstRowMatMap<S>(b.values().data() + i * k * n, k, n);
  }
  return make_result<S>(std::move(shape), std::move(out), {a, b}, [batch, m, k, n, a_shared](Node<S>& nd) {
    const auto& va = nd.parents[0]->value;
    const auto& vb = nd.parents[1]->value;
    auto* pa = detail::parent(nd, 0);
    auto* pb = detail::parent(nd, 1);
    for (Index i = 0; i < batch; ++i) {
      ConstRowMatMap<S> g(nd.grad.data() + i * m * n, m, n);
      const Index aoff = a_shared ? 0 : i * m * k;
      if (pa) {
        RowMatMap<S>(pa->ensure_grad().data() + aoff, m, k).noalias() +=
            g * ConstRowMatMap<S>(vb.data() + i * k * n, k, n).transpose();
      }
      if (pb) {
        RowMatMap<S>(pb->ensure_grad().data() + i * k * n, k, n).noalias() +=
            ConstRowMatMap<S>(va.data() + aoff, m, k).transpose() * g;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions.

/// Tanh-approximated GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a3 = 0.044715;
  Vec<S> out(x.size());
  const auto& v = x.values();
  for (Index i = 0; i < v.size(); ++i) {
    const S xi = v[i];
    out[i] = S(0.5) * xi * (S(1) + std::tanh(S(c) * (xi + S(a3) * xi * xi * xi)));
  }
  return make_result<S>(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto* px = detail::parent(n, 0);
    if (!px) return;
    auto& g = px->ensure_grad();
    const auto& v = n.parents[0]->value;
    for (Index i = 0; i < v.size(); ++i) {
      const S xi = v[i];
      const S t = std::tanh(S(c) * (xi + S(a3) * xi * xi * xi));
      const S dt = S(c) * (S(1) + S(3 * a3) * xi * xi);
      g[i] += n.grad[i] * (S(0.5) * (S(1) + t) + S(0.5) * xi * (S(1) - t * t) * dt);
    }
  });
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Index axis = -1) {
  axis = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto ax = static_cast<std::size_t>(axis);
  const Index outer = detail::prod(x.shape(), 0, ax);
  const Index len = x.shape()[ax];
  const Index inner = detail::prod(x.shape(), ax + 1, x.shape().size());
  Vec<S> out(x.size());
  const auto& v = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      S mx = v[base];
      for (Index j = 1; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
      S total = 0;
      for (Index j = 0; j < len; ++j) total += (out[base + j * inner] = std::exp(v[base + j * inner] - mx));
      for (Index j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<S>(x.shape(), std::move(out), {x}, [outer, len, inner](Node<S>& n) {
    auto* px = detail::parent(n, 0);
    if (!px) return;
    auto& g = px->ensure_grad();
    const auto& y = n.value;
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        S dot = 0;
        for (Index j = 0; j < len; ++j) dot += n.grad[base + j * inner] * y[base + j * inner];
        for (Index j = 0; j < len; ++j) {
          g[base + j * inner] += y[base + j * inner] * (n.grad[base + j * inner] - dot);
        }
      }
    }
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  return make_result<S>({1}, Vec<S>::Constant(1, x.values().sum()), {x}, [](Node<S>& n) {
    if (auto* px = detail::parent(n, 0)) px->ensure_grad().array() += n.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / S(x.size()));
}

/// Mean over every axis but the last: [..., D] -> [D].
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  const Index rows = x.rows(), cols = x.cols();
  Vec<S> out = x.matrix().colwise().mean().transpose();
  return make_result<S>({cols}, std::move(out), {x}, [rows, cols](Node<S>& n) {
    if (auto* px = detail::parent(n, 0)) {
      RowMatMap<S>(px->ensure_grad().data(), rows, cols).rowwise() += n.grad.transpose() / S(rows);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution over channels-last images.

/// x[B, H, W, C] convolved with weight[kh * kw * C, O] (row index
/// (ky * kw + kx) * C + c) plus bias[O]; zero padding.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Index kernel, Index stride,
                 Index pad) {
  if (x.rank() != 4) throw ShapeError("conv2d", "input must be [B,H,W,C], got " + to_string(x.shape()));
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const Index patch = kernel * kernel * C;
  if (weight.rank() != 2 || weight.dim(0) != patch) throw ShapeError("conv2d", x.shape(), weight.shape());
  const Index O = weight.dim(1);
  if (bias.size() != O) throw ShapeError("conv2d", weight.shape(), bias.shape());
  const Index Ho = (H + 2 * pad - kernel) / stride + 1;
  const Index Wo = (W + 2 * pad - kernel) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d", "kernel larger than padded input");
  const Index out_rows = B * Ho * Wo;

  auto cols = std::make_shared<RowMat<S>>(RowMat<S>::Zero(out_rows, patch));
  const S* xv = x.values().data();
  for (Index b = 0; b < B; ++b)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        const Index r = (b * Ho + oy) * Wo + ox;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            const S* src = xv + ((b * H + iy) * W + ix) * C;
            std::copy(src, src + C, cols->data() + r * patch + (ky * kernel + kx) * C);
          }
        }
      }
  Vec<S> out(out_rows * O);
  RowMatMap<S> om(out.data(), out_rows, O);
  om.noalias() = (*cols) * weight.matrix();
  om.rowwise() += bias.values().transpose();
  return make_result<S>({B, Ho, Wo, O}, std::move(out), {x, weight, bias},
                        [cols, B, H, W, C, Ho, Wo, O, kernel, stride, pad, patch, out_rows](Node<S>& n) {
    ConstRowMatMap<S> g(n.grad.data(), out_rows, O);
    if (auto* pw = detail::parent(n, 1)) {
      RowMatMap<S>(pw->ensure_grad().data(), patch, O).noalias() += cols->transpose() * g;
    }
    if (auto* pb = detail::parent(n, 2)) pb->ensure_grad() += g.colwise().sum().transpose();
    if (auto* px = detail::parent(n, 0)) {
      const auto& wv = n.parents[1]->value;
      RowMat<S> dcols = g * ConstRowMatMap<S>(wv.data(), patch, O).transpose();
      auto& gx = px->ensure_grad();
      for (Index b = 0; b < B; ++b)
        for (Index oy = 0; oy < Ho; ++oy)
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index r = (b * Ho + oy) * Wo + ox;
            for (Index ky = 0; ky < kernel; ++ky) {
              const Index iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (Index kx = 0; kx < kernel; ++kx) {
                const Index ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                gx.segment(((b * H + iy) * W + ix) * C, C) +=
                    dcols.row(r).segment((ky * kernel + kx) * C, C).transpose();
              }
            }
          }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention core.

/// Multi-head scaled dot-product attention on already projected inputs:
/// q[Tq, D], k[Tk, D], v[Tk, D]; head h uses columns [h*D/H, (h+1)*D/H).
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw ShapeError("attention", "expects rank-2 q, k, v; got " + to_string(q.shape()) + " " + to_string(k.shape()));
  }
  const Index Tq = q.dim(0), Tk = k.dim(0), D = q.dim(1);
  if (k.dim(1) != D) throw ShapeError("attention", q.shape(), k.shape());
  if (v.dim(0) != Tk || v.dim(1) != D) throw ShapeError("attention", k.shape(), v.shape());
  if (heads <= 0 || D % heads != 0) {
    throw ShapeError("attention", "width " + std::to_string(D) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const Index dh = D / heads;
  const S inv_sqrt = S(1) / std::sqrt(S(dh));
  auto probs = std::make_shared<std::vector<RowMat<S>>>(heads);
  ConstRowMatMap<S> Q = q.matrix(), K = k.matrix(), V = v.matrix();
  Vec<S> out(Tq * D);
  RowMatMap<S> O(out.data(), Tq, D);
  for (Index h = 0; h < heads; ++h) {
    RowMat<S> scores = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv_sqrt;
    for (Index r = 0; r < Tq; ++r) {
      auto row = scores.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    O.middleCols(h * dh, dh).noalias() = scores * V.middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(scores);
  }
  return make_result<S>({Tq, D}, std::move(out), {q, k, v}, [probs, heads, dh, Tq, Tk, D, inv_sqrt](Node<S>& n) {
    ConstRowMatMap<S> G(n.grad.data(), Tq, D);
    ConstRowMatMap<S> Q(n.parents[0]->value.data(), Tq, D);
    ConstRowMatMap<S> K(n.parents[1]->value.data(), Tk, D);
    ConstRowMatMap<S> V(n.parents[2]->value.data(), Tk, D);
    auto* pq = detail::parent(n, 0);
    auto* pk = detail::parent(n, 1);
    auto* pv = detail::parent(n, 2);
    for (Index h = 0; h < heads; ++h) {
      const RowMat<S>& P = (*probs)[static_cast<std::size_t>(h)];
      const auto Gh = G.middleCols(h * dh, dh);
      if (pv) RowMatMap<S>(pv->ensure_grad().data(), Tk, D).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
      if (!pq && !pk) continue;
      RowMat<S> dP = Gh * V.middleCols(h * dh, dh).transpose();
      Vec<S> dots = (dP.cwiseProduct(P)).rowwise().sum();
      RowMat<S> dS = P.cwiseProduct(dP.colwise() - dots) * inv_sqrt;
      if (pq) RowMatMap<S>(pq->ensure_grad().data(), Tq, D).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
      if (pk) RowMatMap<S>(pk->ensure_grad().data(), Tk, D).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
    }
  });
}

}  // namespace iwm

// Differentiable primitives over Tensor<T>. Broadcasting follows trailing-axis
// alignment. Every op validates shapes up front and throws ShapeError naming
// the op and both shapes. All kernels are single-threaded with a fixed
// reduction order, so results are bitwise reproducible.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hdmba/tensor.hpp"

namespace hdmba {

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `s` aligned to the trailing axes of an `r`-rank output,
// zeroed on broadcast axes.
inline std::vector<int64_t> aligned_strides(const Shape& s, const Shape& out) {
  size_t r = out.size();
  std::vector<int64_t> st(r, 0);
  int64_t stride = 1;
  for (size_t i = s.size(); i-- > 0;) {
    size_t oi = i + (r - s.size());
    st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= s[i];
  }
  return st;
}

// Visit every element of `out`, handing the callback the output index and the
// broadcast-mapped offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const int64_t n = numel_of(out);
  const size_t r = out.size();
  auto sa = aligned_strides(a, out);
  auto sb = aligned_strides(b, out);
  std::vector<int64_t> coord(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (size_t ax = r; ax-- > 0;) {
      ++coord[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (coord[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      coord[ax] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da,
                    DB db) {
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(static_cast<size_t>(numel_of(os)));
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(os, a.shape(), b.shape(),
                       [&](int64_t i, int64_t ia, int64_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  }
  auto ai = a.impl();
  auto bi = b.impl();
  Shape as = a.shape(), bs = b.shape();
  return make_node<T>(
      os, std::move(out), {a, b},
      [ai, bi, as, bs, os, da, db](TensorImpl<T>& self) {
        const auto& dy = self.grad;
        for_each_broadcast(os, as, bs, [&](int64_t i, int64_t ia, int64_t ib) {
          if (ai->requires_grad) ai->grad[ia] += da(dy[i], ai->values[ia], bi->values[ib]);
          if (bi->requires_grad) bi->grad[ib] += db(dy[i], ai->values[ia], bi->values[ib]);
        });
      });
}

template <typename T, typename Fwd, typename Dfdx>
Tensor<T> unary_op(const char* /*name*/, const Tensor<T>& x, Fwd fwd, Dfdx dfdx) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  return make_node<T>(x.shape(), std::move(out), {x}, [xi, dfdx](TensorImpl<T>& self) {
    if (!xi->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i)
      xi->grad[i] += self.grad[i] * dfdx(xi->values[i], self.values[i]);
  });
}

// out[i] = x[src[i]] with src[i] == -1 reading as zero. Covers transpose,
// slice, pad, flip and the window permutations; backward scatter-adds through
// the same map, so pure permutations round-trip bitwise.
template <typename T>
Tensor<T> gather_op(const Tensor<T>& x, Shape out_shape, std::vector<int64_t> src) {
  const auto& xv = x.values();
  std::vector<T> out(src.size());
  for (size_t i = 0; i < src.size(); ++i) out[i] = src[i] >= 0 ? xv[src[i]] : T(0);
  auto xi = x.impl();
  return make_node<T>(std::move(out_shape), std::move(out), {x},
                      [xi, src = std::move(src)](TensorImpl<T>& self) {
                        if (!xi->requires_grad) return;
                        for (size_t i = 0; i < src.size(); ++i)
                          if (src[i] >= 0) xi->grad[src[i]] += self.grad[i];
                      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op(
      "scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// Elementwise transcendental / activations

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return detail::unary_op(
      "reciprocal", x, [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      "silu", x,
      [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // Exact erf form.
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_op(
      "gelu", x,
      [=](T v) { return static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2))); },
      [=](T v, T) {
        double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v));
        return static_cast<T>(phi + double(v) * pdf);
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      "softplus", x,
      [](T v) {
        return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// |x| with subgradient 0 at x == 0, so the L1 loss term is deterministic.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op(
      "abs", x, [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  auto xi = x.impl();
  return detail::make_node<T>(Shape{}, {acc}, {x}, [xi](detail::TensorImpl<T>& self) {
    if (!xi->requires_grad) return;
    T g = self.grad[0];
    for (auto& gv : xi->grad) gv += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  T acc = T(0);
  for (T v : x.values()) acc += v;
  T inv = T(1) / static_cast<T>(x.numel());
  auto xi = x.impl();
  return detail::make_node<T>(Shape{}, {acc * inv}, {x}, [xi, inv](detail::TensorImpl<T>& self) {
    if (!xi->requires_grad) return;
    T g = self.grad[0] * inv;
    for (auto& gv : xi->grad) gv += g;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xi = x.impl();
  return detail::make_node<T>(std::move(shape), x.values(), {x},
                              [xi](detail::TensorImpl<T>& self) {
                                if (!xi->requires_grad) return;
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  xi->grad[i] += self.grad[i];
                              });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  const Shape& s = x.shape();
  size_t r = s.size();
  if (perm.size() != r) throw ShapeError("transpose: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> used(r, false);
  Shape os(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t p = perm[i];
    if (p < 0 || p >= static_cast<int64_t>(r) || used[p])
      throw ShapeError("transpose: invalid permutation for " + shape_str(s));
    used[p] = true;
    os[i] = s[p];
  }
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<int64_t> src(static_cast<size_t>(x.numel()));
  std::vector<int64_t> coord(r, 0);
  for (size_t i = 0; i < src.size(); ++i) {
    int64_t off = 0;
    for (size_t ax = 0; ax < r; ++ax) off += coord[ax] * in_strides[perm[ax]];
    src[i] = off;
    for (size_t ax = r; ax-- > 0;) {
      if (++coord[ax] < os[ax]) break;
      coord[ax] = 0;
    }
  }
  return detail::gather_op(x, std::move(os), std::move(src));
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  Shape os = detail::broadcast_shape("broadcast", x.shape(), shape);
  if (os != shape)
    throw ShapeError("broadcast: cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
  const auto& xv = x.values();
  std::vector<T> out(static_cast<size_t>(numel_of(os)));
  detail::for_each_broadcast(os, x.shape(), os,
                             [&](int64_t i, int64_t ia, int64_t) { out[i] = xv[ia]; });
  auto xi = x.impl();
  Shape xs = x.shape();
  return detail::make_node<T>(os, std::move(out), {x},
                              [xi, xs, os](detail::TensorImpl<T>& self) {
                                if (!xi->requires_grad) return;
                                detail::for_each_broadcast(
                                    os, xs, os,
                                    [&](int64_t i, int64_t ia, int64_t) { xi->grad[ia] += self.grad[i]; });
                              });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, const std::vector<int64_t>& starts,
                const std::vector<int64_t>& sizes) {
  const Shape& s = x.shape();
  size_t r = s.size();
  if (starts.size() != r || sizes.size() != r)
    throw ShapeError("slice: starts/sizes rank mismatch for " + shape_str(s));
  Shape os(r);
  for (size_t i = 0; i < r; ++i) {
    if (starts[i] < 0 || sizes[i] < 1 || starts[i] + sizes[i] > s[i])
      throw ShapeError("slice: window out of range for " + shape_str(s));
    os[i] = sizes[i];
  }
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<int64_t> src(static_cast<size_t>(numel_of(os)));
  std::vector<int64_t> coord(r, 0);
  for (size_t i = 0; i < src.size(); ++i) {
    int64_t off = 0;
    for (size_t ax = 0; ax < r; ++ax) off += (starts[ax] + coord[ax]) * in_strides[ax];
    src[i] = off;
    for (size_t ax = r; ax-- > 0;) {
      if (++coord[ax] < os[ax]) break;
      coord[ax] = 0;
    }
  }
  return detail::gather_op(x, std::move(os), std::move(src));
}

enum class PadMode { Zero, Reflect };

namespace detail {
// Mirror-without-repeat folding; handles pads wider than the extent.
inline int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  int64_t p = 2 * (n - 1);
  i = ((i % p) + p) % p;
  return i < n ? i : p - i;
}
}  // namespace detail

template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::pair<int64_t, int64_t>>& pads,
              PadMode mode = PadMode::Zero) {
  const Shape& s = x.shape();
  size_t r = s.size();
  if (pads.size() != r) throw ShapeError("pad: pads rank mismatch for " + shape_str(s));
  Shape os(r);
  for (size_t i = 0; i < r; ++i) {
    if (pads[i].first < 0 || pads[i].second < 0) throw ShapeError("pad: negative pad amount");
    os[i] = s[i] + pads[i].first + pads[i].second;
  }
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<int64_t> src(static_cast<size_t>(numel_of(os)));
  std::vector<int64_t> coord(r, 0);
  for (size_t i = 0; i < src.size(); ++i) {
    int64_t off = 0;
    bool valid = true;
    for (size_t ax = 0; ax < r && valid; ++ax) {
      int64_t c = coord[ax] - pads[ax].first;
      if (mode == PadMode::Reflect) {
        c = detail::reflect_index(c, s[ax]);
      } else if (c < 0 || c >= s[ax]) {
        valid = false;
      }
      if (valid) off += c * in_strides[ax];
    }
    src[i] = valid ? off : -1;
    for (size_t ax = r; ax-- > 0;) {
      if (++coord[ax] < os[ax]) break;
      coord[ax] = 0;
    }
  }
  return detail::gather_op(x, std::move(os), std::move(src));
}

template <typename T>
Tensor<T> flip(const Tensor<T>& x, int64_t axis) {
  const Shape& s = x.shape();
  size_t r = s.size();
  if (axis < 0 || axis >= static_cast<int64_t>(r))
    throw ShapeError("flip: axis out of range for " + shape_str(s));
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<int64_t> src(static_cast<size_t>(x.numel()));
  std::vector<int64_t> coord(r, 0);
  for (size_t i = 0; i < src.size(); ++i) {
    int64_t off = 0;
    for (size_t ax = 0; ax < r; ++ax) {
      int64_t c = (static_cast<int64_t>(ax) == axis) ? s[ax] - 1 - coord[ax] : coord[ax];
      off += c * in_strides[ax];
    }
    src[i] = off;
    for (size_t ax = r; ax-- > 0;) {
      if (++coord[ax] < s[ax]) break;
      coord[ax] = 0;
    }
  }
  return detail::gather_op(x, s, std::move(src));
}

template <typename T>
Tensor<T> stack0(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack0: no tensors");
  const Shape& s = xs[0].shape();
  for (const auto& t : xs)
    if (t.shape() != s)
      throw ShapeError("stack0: mismatched shapes " + shape_str(s) + " and " + shape_str(t.shape()));
  int64_t chunk = xs[0].numel();
  Shape os;
  os.push_back(static_cast<int64_t>(xs.size()));
  os.insert(os.end(), s.begin(), s.end());
  std::vector<T> out;
  out.reserve(static_cast<size_t>(chunk) * xs.size());
  for (const auto& t : xs) out.insert(out.end(), t.values().begin(), t.values().end());
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  for (const auto& t : xs) impls.push_back(t.impl());
  return detail::make_node<T>(std::move(os), std::move(out), xs,
                              [impls, chunk](detail::TensorImpl<T>& self) {
                                for (size_t j = 0; j < impls.size(); ++j) {
                                  if (!impls[j]->requires_grad) continue;
                                  const T* g = self.grad.data() + j * chunk;
                                  for (int64_t i = 0; i < chunk; ++i) impls[j]->grad[i] += g[i];
                                }
                              });
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || as.empty())
    throw ShapeError("concat: shapes " + shape_str(as) + " and " + shape_str(bs));
  for (size_t i = 0; i + 1 < as.size(); ++i)
    if (as[i] != bs[i])
      throw ShapeError("concat: shapes " + shape_str(as) + " and " + shape_str(bs));
  int64_t ca = as.back(), cb = bs.back();
  Shape os = as;
  os.back() = ca + cb;
  int64_t rows = numel_of(os) / (ca + cb);
  std::vector<T> out(static_cast<size_t>(numel_of(os)));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + r * ca, ca, out.begin() + r * (ca + cb));
    std::copy_n(bv.begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_node<T>(std::move(os), std::move(out), {a, b},
                              [ai, bi, ca, cb, rows](detail::TensorImpl<T>& self) {
                                for (int64_t r = 0; r < rows; ++r) {
                                  const T* g = self.grad.data() + r * (ca + cb);
                                  if (ai->requires_grad)
                                    for (int64_t i = 0; i < ca; ++i) ai->grad[r * ca + i] += g[i];
                                  if (bi->requires_grad)
                                    for (int64_t i = 0; i < cb; ++i) bi->grad[r * cb + i] += g[ca + i];
                                }
                              });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are not composable");
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      T av_ik = av[i * k + kk];
      const T* brow = bv.data() + kk * n;
      T* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av_ik * brow[j];
    }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_node<T>(
      Shape{m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        if (ai->requires_grad) {
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              T acc = T(0);
              const T* dyrow = dy.data() + i * n;
              const T* brow = bi->values.data() + kk * n;
              for (int64_t j = 0; j < n; ++j) acc += dyrow[j] * brow[j];
              ai->grad[i * k + kk] += acc;
            }
        }
        if (bi->requires_grad) {
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              T av_ik = ai->values[i * k + kk];
              const T* dyrow = dy.data() + i * n;
              T* grow = bi->grad.data() + kk * n;
              for (int64_t j = 0; j < n; ++j) grow[j] += av_ik * dyrow[j];
            }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return matmul(x, weight);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (!bias.defined()) return matmul(x, weight);
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Convolutions

// 2-d convolution over (H, W, Cin), kernel (kh, kw, Cin, Cout) with odd kh/kw,
// stride 1, zero "same" padding. Bias may be an undefined tensor.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (x.rank() != 3 || weight.rank() != 4 || x.shape()[2] != weight.shape()[2])
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(weight.shape()));
  const int64_t h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  const int64_t kh = weight.shape()[0], kw = weight.shape()[1], cout = weight.shape()[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (bias.defined() && bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs kernel " +
                     shape_str(weight.shape()));
  const int64_t ph = kh / 2, pw = kw / 2;
  const auto& xv = x.values();
  const auto& wv = weight.values();
  std::vector<T> out(static_cast<size_t>(h * w * cout), T(0));
  if (bias.defined()) {
    const auto& bv = bias.values();
    for (int64_t p = 0; p < h * w; ++p)
      for (int64_t o = 0; o < cout; ++o) out[p * cout + o] = bv[o];
  }
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      T* orow = out.data() + (i * w + j) * cout;
      for (int64_t di = 0; di < kh; ++di) {
        int64_t ii = i + di - ph;
        if (ii < 0 || ii >= h) continue;
        for (int64_t dj = 0; dj < kw; ++dj) {
          int64_t jj = j + dj - pw;
          if (jj < 0 || jj >= w) continue;
          const T* xrow = xv.data() + (ii * w + jj) * cin;
          const T* wrow = wv.data() + (di * kw + dj) * cin * cout;
          for (int64_t c = 0; c < cin; ++c) {
            T xval = xrow[c];
            const T* wk = wrow + c * cout;
            for (int64_t o = 0; o < cout; ++o) orow[o] += xval * wk[o];
          }
        }
      }
    }
  auto xi = x.impl();
  auto wi = weight.impl();
  auto bim = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_node<T>(
      Shape{h, w, cout}, std::move(out), std::move(inputs),
      [xi, wi, bim, h, w, cin, kh, kw, cout, ph, pw](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        if (bim && bim->requires_grad) {
          for (int64_t p = 0; p < h * w; ++p)
            for (int64_t o = 0; o < cout; ++o) bim->grad[o] += dy[p * cout + o];
        }
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j) {
            const T* grow = dy.data() + (i * w + j) * cout;
            for (int64_t di = 0; di < kh; ++di) {
              int64_t ii = i + di - ph;
              if (ii < 0 || ii >= h) continue;
              for (int64_t dj = 0; dj < kw; ++dj) {
                int64_t jj = j + dj - pw;
                if (jj < 0 || jj >= w) continue;
                const int64_t xoff = (ii * w + jj) * cin;
                const int64_t woff = (di * kw + dj) * cin * cout;
                for (int64_t c = 0; c < cin; ++c) {
                  if (wi->requires_grad) {
                    T xval = xi->values[xoff + c];
                    T* wg = wi->grad.data() + woff + c * cout;
                    for (int64_t o = 0; o < cout; ++o) wg[o] += xval * grow[o];
                  }
                  if (xi->requires_grad) {
                    const T* wk = wi->values.data() + woff + c * cout;
                    T acc = T(0);
                    for (int64_t o = 0; o < cout; ++o) acc += wk[o] * grow[o];
                    xi->grad[xoff + c] += acc;
                  }
                }
              }
            }
          }
      });
}

// Depth-wise 1-d convolution along token order: input (L, C), kernel (K, C),
// left-padded with zeros (causal). Bias may be undefined.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[1])
    throw ShapeError("depthwise_conv: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(weight.shape()));
  const int64_t l = x.shape()[0], c = x.shape()[1], k = weight.shape()[0];
  if (bias.defined() && bias.shape() != Shape{c})
    throw ShapeError("depthwise_conv: bias " + shape_str(bias.shape()) + " vs kernel " +
                     shape_str(weight.shape()));
  const auto& xv = x.values();
  const auto& wv = weight.values();
  std::vector<T> out(static_cast<size_t>(l * c), T(0));
  if (bias.defined()) {
    const auto& bv = bias.values();
    for (int64_t t = 0; t < l; ++t)
      for (int64_t ch = 0; ch < c; ++ch) out[t * c + ch] = bv[ch];
  }
  for (int64_t t = 0; t < l; ++t)
    for (int64_t kk = 0; kk < k; ++kk) {
      int64_t s = t - (k - 1) + kk;
      if (s < 0) continue;
      const T* xrow = xv.data() + s * c;
      const T* wrow = wv.data() + kk * c;
      T* orow = out.data() + t * c;
      for (int64_t ch = 0; ch < c; ++ch) orow[ch] += wrow[ch] * xrow[ch];
    }
  auto xi = x.impl();
  auto wi = weight.impl();
  auto bim = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_node<T>(
      Shape{l, c}, std::move(out), std::move(inputs),
      [xi, wi, bim, l, c, k](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        if (bim && bim->requires_grad) {
          for (int64_t t = 0; t < l; ++t)
            for (int64_t ch = 0; ch < c; ++ch) bim->grad[ch] += dy[t * c + ch];
        }
        for (int64_t t = 0; t < l; ++t)
          for (int64_t kk = 0; kk < k; ++kk) {
            int64_t s = t - (k - 1) + kk;
            if (s < 0) continue;
            const T* grow = dy.data() + t * c;
            for (int64_t ch = 0; ch < c; ++ch) {
              if (wi->requires_grad) wi->grad[kk * c + ch] += grow[ch] * xi->values[s * c + ch];
              if (xi->requires_grad) xi->grad[s * c + ch] += grow[ch] * wi->values[kk * c + ch];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Normalization

// Layer normalization over the trailing axis with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const int64_t c = x.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(c) + "] for input " +
                     shape_str(x.shape()));
  const int64_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<T> out(xv.size());
  std::vector<T> mu(rows), inv(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T m = T(0);
    for (int64_t i = 0; i < c; ++i) m += row[i];
    m /= static_cast<T>(c);
    T var = T(0);
    for (int64_t i = 0; i < c; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<T>(c);
    T iv = T(1) / std::sqrt(var + eps);
    mu[r] = m;
    inv[r] = iv;
    T* orow = out.data() + r * c;
    for (int64_t i = 0; i < c; ++i) orow[i] = (row[i] - m) * iv * gv[i] + bv[i];
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return detail::make_node<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [xi, gi, bi, rows, c, mu = std::move(mu), inv = std::move(inv)](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
          const T* row = xi->values.data() + r * c;
          const T* grow = dy.data() + r * c;
          const T m = mu[r], iv = inv[r];
          if (gi->requires_grad || bi->requires_grad) {
            for (int64_t i = 0; i < c; ++i) {
              T xhat = (row[i] - m) * iv;
              if (gi->requires_grad) gi->grad[i] += grow[i] * xhat;
              if (bi->requires_grad) bi->grad[i] += grow[i];
            }
          }
          if (xi->requires_grad) {
            T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
            for (int64_t i = 0; i < c; ++i) {
              T dxhat = grow[i] * gi->values[i];
              T xhat = (row[i] - m) * iv;
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            T invc = T(1) / static_cast<T>(c);
            for (int64_t i = 0; i < c; ++i) {
              T dxhat = grow[i] * gi->values[i];
              T xhat = (row[i] - m) * iv;
              xi->grad[r * c + i] +=
                  iv * (dxhat - invc * sum_dxhat - xhat * invc * sum_dxhat_xhat);
            }
          }
        }
      });
}

// RMS normalization over the trailing axis, gain only.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
  if (x.rank() < 1) throw ShapeError("rms_norm: scalar input");
  const int64_t c = x.shape().back();
  if (gain.shape() != Shape{c})
    throw ShapeError("rms_norm: gain must be [" + std::to_string(c) + "] for input " +
                     shape_str(x.shape()));
  const int64_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  std::vector<T> out(xv.size());
  std::vector<T> invr(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T msq = T(0);
    for (int64_t i = 0; i < c; ++i) msq += row[i] * row[i];
    msq /= static_cast<T>(c);
    T iv = T(1) / std::sqrt(msq + eps);
    invr[r] = iv;
    T* orow = out.data() + r * c;
    for (int64_t i = 0; i < c; ++i) orow[i] = row[i] * iv * gv[i];
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  return detail::make_node<T>(
      x.shape(), std::move(out), {x, gain},
      [xi, gi, rows, c, invr = std::move(invr)](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
          const T* row = xi->values.data() + r * c;
          const T* grow = dy.data() + r * c;
          const T iv = invr[r];
          if (gi->requires_grad) {
            for (int64_t i = 0; i < c; ++i) gi->grad[i] += grow[i] * row[i] * iv;
          }
          if (xi->requires_grad) {
            T dot = T(0);
            for (int64_t i = 0; i < c; ++i) dot += grow[i] * gi->values[i] * row[i];
            T k = dot * iv * iv * iv / static_cast<T>(c);
            for (int64_t i = 0; i < c; ++i)
              xi->grad[r * c + i] += grow[i] * gi->values[i] * iv - row[i] * k;
          }
        }
      });
}

}  // namespace hdmba

// Selective state-space scan: input-dependent (delta, B, C) projections,
// zero-order-hold discretization, and the linear recurrence
//   h_t = Abar_t (*) h_{t-1} + Bbar_t * u_t,   y_t = C_t . h_t + D (*) u_t
// run per channel over a token sequence. The sequential scan is the ground
// truth; a chunked evaluation is available for no-grad forward passes and must
// stay within 1e-10 of it.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "hdmba/common.hpp"
#include "hdmba/ops.hpp"
#include "hdmba/rng.hpp"
#include "hdmba/tensor.hpp"

namespace hdmba::ssm {

struct SsmConfig {
  int64_t state_size = 16;  // N
  int64_t dt_rank = 0;      // 0 -> ceil(C_inner / 16)
  bool bidirectional = false;
};

inline int64_t resolve_dt_rank(int64_t dt_rank, int64_t inner_channels) {
  return dt_rank > 0 ? dt_rank : (inner_channels + 15) / 16;
}

// Continuous parameters plus the input-dependent projection weights.
// A is stored as log(-A) so the state transition stays strictly negative.
template <typename T>
struct SsmParameters {
  Tensor<T> a_log;          // (C_inner, N)
  Tensor<T> skip_gain;      // D, (C_inner)
  Tensor<T> x_proj_weight;  // (C_inner, dt_rank + 2N), bias-free
  Tensor<T> dt_proj_weight; // (dt_rank, C_inner)
  Tensor<T> dt_proj_bias;   // (C_inner); initialization pins softplus(bias)
  int64_t inner_channels = 0;
  int64_t state_size = 0;
  int64_t dt_rank = 0;
  bool bidirectional = false;
};

// S4D-real initialization: state column n of every channel starts at
// A = -(n+1). The delta bias is drawn so softplus(bias) spans
// [1e-3, 1e-1] log-uniformly per channel.
template <typename T>
SsmParameters<T> init_ssm_parameters(int64_t inner_channels, const SsmConfig& cfg, Pcg32& rng) {
  if (inner_channels < 1 || cfg.state_size < 1)
    throw ValueError("ssm: inner_channels and state_size must be >= 1");
  SsmParameters<T> p;
  p.inner_channels = inner_channels;
  p.state_size = cfg.state_size;
  p.dt_rank = resolve_dt_rank(cfg.dt_rank, inner_channels);
  p.bidirectional = cfg.bidirectional;

  std::vector<T> a_log(static_cast<size_t>(inner_channels * cfg.state_size));
  for (int64_t c = 0; c < inner_channels; ++c)
    for (int64_t n = 0; n < cfg.state_size; ++n)
      a_log[c * cfg.state_size + n] = static_cast<T>(std::log(double(n + 1)));
  p.a_log = Tensor<T>(Shape{inner_channels, cfg.state_size}, std::move(a_log));
  p.a_log.set_requires_grad();

  p.skip_gain = Tensor<T>::full(Shape{inner_channels}, T(1));
  p.skip_gain.set_requires_grad();

  auto fan_in_uniform = [&rng](Shape shape, int64_t fan_in) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    std::vector<T> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    Tensor<T> t(std::move(shape), std::move(v));
    t.set_requires_grad();
    return t;
  };
  p.x_proj_weight = fan_in_uniform(Shape{inner_channels, p.dt_rank + 2 * cfg.state_size},
                                   inner_channels);
  p.dt_proj_weight = fan_in_uniform(Shape{p.dt_rank, inner_channels}, p.dt_rank);

  std::vector<T> dt_bias(static_cast<size_t>(inner_channels));
  for (auto& b : dt_bias) {
    double target = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b = static_cast<T>(std::log(std::expm1(target)));  // softplus^-1
  }
  p.dt_proj_bias = Tensor<T>(Shape{inner_channels}, std::move(dt_bias));
  p.dt_proj_bias.set_requires_grad();
  return p;
}

// Zero-order hold for the state transition, Euler-simplified input matrix:
//   Abar[l,c,n] = exp(delta[l,c] * A[c,n]),  Bbar[l,c,n] = delta[l,c] * B[l,n]
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& a, const Tensor<T>& b,
                                           const Tensor<T>& delta) {
  if (a.rank() != 2 || b.rank() != 2 || delta.rank() != 2)
    throw ShapeError("discretize: expected A (C,N), B (L,N), delta (L,C); got " +
                     shape_str(a.shape()) + ", " + shape_str(b.shape()) + ", " +
                     shape_str(delta.shape()));
  const int64_t c = a.shape()[0], n = a.shape()[1], l = delta.shape()[0];
  if (delta.shape()[1] != c || b.shape()[0] != l || b.shape()[1] != n)
    throw ShapeError("discretize: inconsistent shapes A " + shape_str(a.shape()) + ", B " +
                     shape_str(b.shape()) + ", delta " + shape_str(delta.shape()));
  for (T d : delta.values())
    if (!(d > T(0)))
      throw ValueError("discretize: delta must be strictly positive (broken softplus upstream?)");
  auto delta_lc1 = reshape(delta, Shape{l, c, 1});
  auto abar = exp(mul(delta_lc1, reshape(a, Shape{1, c, n})));
  auto bbar = mul(delta_lc1, reshape(b, Shape{l, 1, n}));
  return {abar, bbar};
}

// Chunked evaluation of the same recurrence: per-chunk transition products are
// composed first, then states are stitched chunk by chunk. Reassociates the
// arithmetic but computes the same quantity. Forward only.
template <typename T>
std::vector<T> linear_recurrence_chunked(const std::vector<T>& av, const std::vector<T>& bv,
                                         const std::vector<T>& cv, const std::vector<T>& dv,
                                         const std::vector<T>& uv, int64_t l, int64_t c, int64_t n,
                                         int64_t chunk = 16) {
  std::vector<T> y(static_cast<size_t>(l * c), T(0));
  std::vector<T> h(static_cast<size_t>(c * n), T(0));
  std::vector<T> carry_a(static_cast<size_t>(c * n));
  std::vector<T> carry_b(static_cast<size_t>(c * n));
  for (int64_t t0 = 0; t0 < l; t0 += chunk) {
    const int64_t t1 = std::min(l, t0 + chunk);
    // compose the chunk's cumulative transition: h_out = carry_a (*) h_in + carry_b
    std::fill(carry_a.begin(), carry_a.end(), T(1));
    std::fill(carry_b.begin(), carry_b.end(), T(0));
    for (int64_t t = t0; t < t1; ++t)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (t * c + ch) * n;
        for (int64_t s = 0; s < n; ++s) {
          carry_a[ch * n + s] *= av[base + s];
          carry_b[ch * n + s] =
              av[base + s] * carry_b[ch * n + s] + bv[base + s] * uv[t * c + ch];
        }
      }
    // emit outputs inside the chunk from the incoming state
    std::vector<T> hl(h);
    for (int64_t t = t0; t < t1; ++t)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (t * c + ch) * n;
        T acc = T(0);
        for (int64_t s = 0; s < n; ++s) {
          hl[ch * n + s] = av[base + s] * hl[ch * n + s] + bv[base + s] * uv[t * c + ch];
          acc += cv[t * n + s] * hl[ch * n + s];
        }
        y[t * c + ch] = acc + dv[ch] * uv[t * c + ch];
      }
    // advance the carried state with the composed transition
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t s = 0; s < n; ++s)
        h[ch * n + s] = carry_a[ch * n + s] * h[ch * n + s] + carry_b[ch * n + s];
  }
  return y;
}

// The recurrence itself as one autograd node. Saves the hidden-state history
// from the forward pass and walks it backwards.
template <typename T>
Tensor<T> linear_recurrence(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& cmat,
                            const Tensor<T>& skip, const Tensor<T>& u) {
  if (abar.rank() != 3 || bbar.shape() != abar.shape())
    throw ShapeError("scan: Abar " + shape_str(abar.shape()) + " vs Bbar " +
                     shape_str(bbar.shape()));
  const int64_t l = abar.shape()[0], c = abar.shape()[1], n = abar.shape()[2];
  if (l < 1) throw ValueError("scan: empty sequence");
  if (cmat.shape() != Shape{l, n} || skip.shape() != Shape{c} || u.shape() != Shape{l, c})
    throw ShapeError("scan: C " + shape_str(cmat.shape()) + ", D " + shape_str(skip.shape()) +
                     ", u " + shape_str(u.shape()) + " inconsistent with Abar " +
                     shape_str(abar.shape()));

  const auto& av = abar.values();
  const auto& bv = bbar.values();
  const auto& cv = cmat.values();
  const auto& dv = skip.values();
  const auto& uv = u.values();

  // Grad-free inference may take the chunked path when deterministic mode is
  // off (HDMBA_DETERMINISTIC=0); it reassociates sums within 1e-10.
  if (!grad_enabled() && !deterministic_mode() && l > 32)
    return Tensor<T>(Shape{l, c}, linear_recurrence_chunked(av, bv, cv, dv, uv, l, c, n));

  std::vector<T> h(static_cast<size_t>(l * c * n), T(0));  // full history for backward
  std::vector<T> y(static_cast<size_t>(l * c), T(0));
  for (int64_t t = 0; t < l; ++t) {
    const T* hprev = t > 0 ? h.data() + (t - 1) * c * n : nullptr;
    T* ht = h.data() + t * c * n;
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t base = (t * c + ch) * n;
      T acc = T(0);
      for (int64_t s = 0; s < n; ++s) {
        T prev = hprev ? hprev[ch * n + s] : T(0);
        T hv = av[base + s] * prev + bv[base + s] * uv[t * c + ch];
        ht[ch * n + s] = hv;
        acc += cv[t * n + s] * hv;
      }
      y[t * c + ch] = acc + dv[ch] * uv[t * c + ch];
    }
  }

  auto ai = abar.impl();
  auto bi = bbar.impl();
  auto ci = cmat.impl();
  auto di = skip.impl();
  auto ui = u.impl();
  return detail::make_node<T>(
      Shape{l, c}, std::move(y), {abar, bbar, cmat, skip, u},
      [ai, bi, ci, di, ui, l, c, n, h = std::move(h)](detail::TensorImpl<T>& self) {
        const auto& dy = self.grad;
        std::vector<T> dh(static_cast<size_t>(c * n), T(0));
        for (int64_t t = l - 1; t >= 0; --t) {
          const T* ht = h.data() + t * c * n;
          const T* hprev = t > 0 ? h.data() + (t - 1) * c * n : nullptr;
          for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base = (t * c + ch) * n;
            const T g = dy[t * c + ch];
            if (di->requires_grad) di->grad[ch] += g * ui->values[t * c + ch];
            T du_acc = di->values[ch] * g;
            for (int64_t s = 0; s < n; ++s) {
              T& dhs = dh[ch * n + s];
              dhs += g * ci->values[t * n + s];
              if (ci->requires_grad) ci->grad[t * n + s] += g * ht[ch * n + s];
              if (ai->requires_grad)
                ai->grad[base + s] += dhs * (hprev ? hprev[ch * n + s] : T(0));
              if (bi->requires_grad) bi->grad[base + s] += dhs * ui->values[t * c + ch];
              du_acc += dhs * bi->values[base + s];
              dhs *= ai->values[base + s];
            }
            if (ui->requires_grad) ui->grad[t * c + ch] += du_acc;
          }
        }
      });
}

namespace detail_scan {

template <typename T>
Tensor<T> scan_one_direction(const Tensor<T>& u, const SsmParameters<T>& p) {
  const int64_t l = u.shape()[0];
  const int64_t n = p.state_size;
  auto proj = matmul(u, p.x_proj_weight);  // (L, dt_rank + 2N)
  auto dt_seed = slice(proj, {0, 0}, {l, p.dt_rank});
  auto b = slice(proj, {0, p.dt_rank}, {l, n});
  auto cmat = slice(proj, {0, p.dt_rank + n}, {l, n});
  auto delta = softplus(linear(dt_seed, p.dt_proj_weight, p.dt_proj_bias));  // (L, C) > 0
  auto a_cont = scale(exp(p.a_log), T(-1));
  auto [abar, bbar] = discretize(a_cont, b, delta);
  return linear_recurrence(abar, bbar, cmat, p.skip_gain, u);
}

}  // namespace detail_scan

// Full selective scan over one token sequence u (L, C_inner). With the
// bidirectional flag a second scan runs over the reversed sequence with the
// same parameters and the two outputs are summed.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const SsmParameters<T>& p) {
  if (u.rank() != 2 || u.shape()[1] != p.inner_channels)
    throw ShapeError("selective_scan: input " + shape_str(u.shape()) + " vs inner channels " +
                     std::to_string(p.inner_channels));
  if (u.shape()[0] < 1) throw ValueError("selective_scan: empty sequence");
  auto y = detail_scan::scan_one_direction(u, p);
  if (p.bidirectional) {
    auto yr = flip(detail_scan::scan_one_direction(flip(u, 0), p), 0);
    y = add(y, yr);
  }
  return y;
}

}  // namespace hdmba::ssm

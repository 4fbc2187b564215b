// Window Selective Scan Module: tile a feature map into M x M windows, run the
// gated Mamba block over each window's token sequence, and stitch the tiles
// back. Windows are non-overlapping (stride M); spatial extents that do not
// divide by M are reflect-padded and cropped after the reverse. When M covers
// the whole image in both directions the image itself becomes the single
// window, so the degenerate case reduces to one global block over the
// row-major flatten.
#pragma once

#include <vector>

#include "hdmba/ops.hpp"
#include "hdmba/ssm.hpp"

namespace hdmba::wssm {

template <typename T>
struct WindowBatch {
  Tensor<T> windows;  // (num_windows, tokens_per_window, C)
  int64_t window = 0;        // effective window edge; orig extents if whole_image
  int64_t grid_h = 0;        // windows per column (row-major over the grid)
  int64_t grid_w = 0;
  int64_t orig_h = 0, orig_w = 0, channels = 0;
  int64_t padded_h = 0, padded_w = 0;
  bool whole_image = false;
};

namespace detail_win {

// Gather map from a padded (H, W, C) image to (nW, M*M, C) token stacks.
// Window grid and intra-window tokens are both row-major.
inline std::vector<int64_t> partition_map(int64_t h, int64_t w, int64_t c, int64_t m) {
  const int64_t gh = h / m, gw = w / m;
  std::vector<int64_t> src(static_cast<size_t>(h * w * c));
  size_t i = 0;
  for (int64_t wr = 0; wr < gh; ++wr)
    for (int64_t wc = 0; wc < gw; ++wc)
      for (int64_t lr = 0; lr < m; ++lr)
        for (int64_t lc = 0; lc < m; ++lc) {
          const int64_t row = wr * m + lr, col = wc * m + lc;
          for (int64_t ch = 0; ch < c; ++ch) src[i++] = (row * w + col) * c + ch;
        }
  return src;
}

inline std::vector<int64_t> invert_permutation(const std::vector<int64_t>& p) {
  std::vector<int64_t> inv(p.size());
  for (size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<int64_t>(i);
  return inv;
}

}  // namespace detail_win

template <typename T>
WindowBatch<T> window_partition(const Tensor<T>& z, int64_t m) {
  if (z.rank() != 3)
    throw ShapeError("window_partition: expected (H, W, C), got " + shape_str(z.shape()));
  const int64_t h = z.shape()[0], w = z.shape()[1], c = z.shape()[2];
  if (h < 1 || w < 1 || m < 1)
    throw ValueError("window_partition: extents and window size must be >= 1");

  WindowBatch<T> batch;
  batch.orig_h = h;
  batch.orig_w = w;
  batch.channels = c;

  if (m >= h && m >= w) {
    // Degenerate partition: one window, sequence = row-major flatten, no pad.
    batch.whole_image = true;
    batch.window = m;
    batch.grid_h = batch.grid_w = 1;
    batch.padded_h = h;
    batch.padded_w = w;
    batch.windows = reshape(z, Shape{1, h * w, c});
    return batch;
  }

  const int64_t ph = (h + m - 1) / m * m;
  const int64_t pw = (w + m - 1) / m * m;
  Tensor<T> padded = z;
  if (ph != h || pw != w)
    padded = pad(z, {{0, ph - h}, {0, pw - w}, {0, 0}}, PadMode::Reflect);
  batch.window = m;
  batch.grid_h = ph / m;
  batch.grid_w = pw / m;
  batch.padded_h = ph;
  batch.padded_w = pw;
  auto src = detail_win::partition_map(ph, pw, c, m);
  batch.windows =
      hdmba::detail::gather_op(padded, Shape{batch.grid_h * batch.grid_w, m * m, c}, std::move(src));
  return batch;
}

template <typename T>
Tensor<T> window_reverse(const WindowBatch<T>& batch) {
  const int64_t tokens = batch.whole_image ? batch.orig_h * batch.orig_w
                                           : batch.window * batch.window;
  const Shape expect{batch.grid_h * batch.grid_w, tokens, batch.channels};
  if (!batch.windows.defined() || batch.windows.shape() != expect)
    throw ShapeError("window_reverse: batch tensor " +
                     (batch.windows.defined() ? shape_str(batch.windows.shape()) : "(undefined)") +
                     " inconsistent with grid metadata expecting " + shape_str(expect));
  if (batch.whole_image)
    return reshape(batch.windows, Shape{batch.orig_h, batch.orig_w, batch.channels});

  auto fwd = detail_win::partition_map(batch.padded_h, batch.padded_w, batch.channels, batch.window);
  auto image = hdmba::detail::gather_op(
      batch.windows, Shape{batch.padded_h, batch.padded_w, batch.channels},
      detail_win::invert_permutation(fwd));
  if (batch.padded_h != batch.orig_h || batch.padded_w != batch.orig_w)
    image = slice(image, {0, 0, 0}, {batch.orig_h, batch.orig_w, batch.channels});
  return image;
}

// ---------------------------------------------------------------------------
// Gated Mamba block over one token sequence

struct MambaBlockConfig {
  int64_t channels = 0;   // C
  int64_t expansion = 2;  // C_inner = expansion * C
  int64_t dconv_kernel = 4;
  ssm::SsmConfig ssm;
  bool use_ssm = true;
  bool use_dconv = true;
  bool use_gate = true;

  int64_t inner() const { return expansion * channels; }

  void validate() const {
    if (channels < 1 || expansion < 1 || dconv_kernel < 1)
      throw ValueError("mamba block: channels, expansion, dconv_kernel must be >= 1");
  }
};

template <typename T>
struct MambaBlockParams {
  MambaBlockConfig config;
  Tensor<T> rms_gain;        // (C)
  Tensor<T> in_proj_weight;  // (C, (use_gate ? 2 : 1) * C_inner), bias-free
  Tensor<T> dconv_weight;    // (K, C_inner), present iff use_dconv
  Tensor<T> dconv_bias;      // (C_inner), zero-initialized
  Tensor<T> out_proj_weight; // (C_inner, C), bias-free
  ssm::SsmParameters<T> ssm; // present iff use_ssm
};

namespace detail_win {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, int64_t fan_in, Pcg32& rng) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  std::vector<T> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

}  // namespace detail_win

template <typename T>
MambaBlockParams<T> init_mamba_block(const MambaBlockConfig& cfg, Pcg32& rng) {
  cfg.validate();
  MambaBlockParams<T> p;
  p.config = cfg;
  const int64_t c = cfg.channels, ci = cfg.inner();
  p.rms_gain = Tensor<T>::full(Shape{c}, T(1));
  p.rms_gain.set_requires_grad();
  p.in_proj_weight =
      detail_win::fan_in_uniform<T>(Shape{c, (cfg.use_gate ? 2 : 1) * ci}, c, rng);
  if (cfg.use_dconv) {
    p.dconv_weight = detail_win::fan_in_uniform<T>(Shape{cfg.dconv_kernel, ci}, cfg.dconv_kernel, rng);
    p.dconv_bias = Tensor<T>::zeros(Shape{ci});
    p.dconv_bias.set_requires_grad();
  }
  if (cfg.use_ssm) p.ssm = ssm::init_ssm_parameters<T>(ci, cfg.ssm, rng);
  p.out_proj_weight = detail_win::fan_in_uniform<T>(Shape{ci, c}, ci, rng);
  return p;
}

// z_op1 = SSM(SiLU(DConv(Linear_main(RMSNorm(z)))))
// z_op2 = SiLU(Linear_gate(RMSNorm(z)))
// z_op  = Linear_out(z_op1 (*) z_op2)
// Ablations drop the corresponding stage (SSM off -> identity pass-through).
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& z, const MambaBlockParams<T>& p) {
  const auto& cfg = p.config;
  if (z.rank() != 2 || z.shape()[1] != cfg.channels)
    throw ShapeError("mamba_block: input " + shape_str(z.shape()) + " vs channels " +
                     std::to_string(cfg.channels));
  if (z.shape()[0] < 1) throw ValueError("mamba_block: empty sequence");
  const int64_t l = z.shape()[0], ci = cfg.inner();

  auto zn = rms_norm(z, p.rms_gain, T(1e-6));
  auto proj = matmul(zn, p.in_proj_weight);
  auto main = cfg.use_gate ? slice(proj, {0, 0}, {l, ci}) : proj;
  if (cfg.use_dconv) main = depthwise_conv1d(main, p.dconv_weight, p.dconv_bias);
  main = silu(main);
  if (cfg.use_ssm) main = ssm::selective_scan(main, p.ssm);
  if (cfg.use_gate) {
    auto gate = silu(slice(proj, {0, ci}, {l, ci}));
    main = mul(main, gate);
  }
  return matmul(main, p.out_proj_weight);
}

// Partition, per-window Mamba block, reverse.
template <typename T>
Tensor<T> wssm_forward(const Tensor<T>& z, const MambaBlockParams<T>& p, int64_t m) {
  auto batch = window_partition(z, m);
  const int64_t n_windows = batch.windows.shape()[0];
  const int64_t tokens = batch.windows.shape()[1];
  std::vector<Tensor<T>> outs;
  outs.reserve(static_cast<size_t>(n_windows));
  for (int64_t wdx = 0; wdx < n_windows; ++wdx) {
    auto seq = reshape(slice(batch.windows, {wdx, 0, 0}, {1, tokens, batch.channels}),
                       Shape{tokens, batch.channels});
    outs.push_back(mamba_block(seq, p));
  }
  WindowBatch<T> out = batch;
  out.windows = reshape(stack0(outs), Shape{n_windows, tokens, batch.channels});
  return window_reverse(out);
}

}  // namespace hdmba::wssm

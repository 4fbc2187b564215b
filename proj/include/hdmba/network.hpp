// HDMba network assembly: head convolution, residual DehazeMamba (RDM) blocks
// built from DehazeMamba layers (DML = norm->WSSM residual, norm->MLP
// residual), and the two-conv tail with shallow-feature and global skips.
// Spatial dimensions are preserved end to end; the output has the input's
// shape. With the last tail conv zero-initialized the network is the identity
// at initialization.
#pragma once

#include <string>
#include <vector>

#include "hdmba/wssm.hpp"

namespace hdmba::net {

struct ModelConfig {
  int64_t bands = 16;       // B
  int64_t channels = 64;    // C (feature width; see docs for the 4.60M calibration)
  int64_t rdm_count = 4;    // I
  int64_t dml_per_rdm = 4;  // K
  int64_t window = 8;       // M
  int64_t state_size = 16;  // N
  int64_t expansion = 2;
  int64_t dt_rank = 0;      // 0 -> ceil(C_inner/16)
  int64_t mlp_ratio = 2;
  bool use_ssm = true;
  bool use_dconv = true;
  bool use_gate = true;
  bool use_mlp = true;
  bool bidirectional = false;
  bool tail_concat = false;  // concat shallow features instead of adding them
  double theta1 = 1.0;
  double theta2 = 0.1;

  void validate() const {
    if (bands < 1 || channels < 1 || rdm_count < 1 || dml_per_rdm < 1 || window < 1 ||
        state_size < 1 || expansion < 1 || mlp_ratio < 1)
      throw ValueError("model config: all counts must be >= 1");
    if (theta1 < 0 || theta2 < 0) throw ValueError("model config: loss weights must be >= 0");
  }

  wssm::MambaBlockConfig mamba_config() const {
    wssm::MambaBlockConfig m;
    m.channels = channels;
    m.expansion = expansion;
    m.ssm.state_size = state_size;
    m.ssm.dt_rank = dt_rank;
    m.ssm.bidirectional = bidirectional;
    m.use_ssm = use_ssm;
    m.use_dconv = use_dconv;
    m.use_gate = use_gate;
    return m;
  }
};

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // (kh, kw, Cin, Cout)
  Tensor<T> bias;    // (Cout)
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // (Cin, Cout)
  Tensor<T> bias;    // (Cout)
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct MlpParams {
  LinearParams<T> fc1, fc2;
};

template <typename T>
struct DmlParams {
  LayerNormParams<T> ln1;
  wssm::MambaBlockParams<T> mamba;
  LayerNormParams<T> ln2;  // present iff use_mlp
  MlpParams<T> mlp;        // present iff use_mlp
  bool use_mlp = true;
};

template <typename T>
struct RdmParams {
  std::vector<DmlParams<T>> dmls;
  Conv2dParams<T> conv;
};

template <typename T>
struct DehazeModel {
  ModelConfig config;
  Conv2dParams<T> head;   // B -> C
  std::vector<RdmParams<T>> rdms;
  Conv2dParams<T> tail1;  // C (or 2C when tail_concat) -> C
  Conv2dParams<T> tail2;  // C -> B, zero-initialized
  std::vector<Parameter<T>> parameters;  // unique dotted names, collection order fixed
};

// ---------------------------------------------------------------------------
// Construction

namespace detail_net {

template <typename T>
Tensor<T> uniform_weight(Shape shape, int64_t fan_in, Pcg32& rng) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  std::vector<T> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  auto t = Tensor<T>::zeros(std::move(shape));
  t.set_requires_grad();
  return t;
}

template <typename T>
Tensor<T> ones_param(Shape shape) {
  auto t = Tensor<T>::full(std::move(shape), T(1));
  t.set_requires_grad();
  return t;
}

// Weights fan-in-scaled uniform, biases zero so the zero-input invariants
// hold exactly at initialization.
template <typename T>
Conv2dParams<T> init_conv(int64_t cin, int64_t cout, Pcg32& rng) {
  Conv2dParams<T> p;
  p.weight = uniform_weight<T>(Shape{3, 3, cin, cout}, 9 * cin, rng);
  p.bias = zero_param<T>(Shape{cout});
  return p;
}

template <typename T>
LinearParams<T> init_linear(int64_t cin, int64_t cout, Pcg32& rng) {
  LinearParams<T> p;
  p.weight = uniform_weight<T>(Shape{cin, cout}, cin, rng);
  p.bias = zero_param<T>(Shape{cout});
  return p;
}

template <typename T>
LayerNormParams<T> init_layer_norm(int64_t c) {
  return {ones_param<T>(Shape{c}), zero_param<T>(Shape{c})};
}

template <typename T>
void collect(std::vector<Parameter<T>>& out, const std::string& prefix, const Tensor<T>& t) {
  if (!t.defined()) return;
  for (const auto& p : out)
    if (p.name == prefix) throw ValueError("model: duplicate parameter name " + prefix);
  out.push_back({prefix, t, true});
}

template <typename T>
void collect_mamba(std::vector<Parameter<T>>& out, const std::string& prefix,
                   const wssm::MambaBlockParams<T>& m) {
  collect(out, prefix + ".rms_gain", m.rms_gain);
  collect(out, prefix + ".in_proj.weight", m.in_proj_weight);
  collect(out, prefix + ".dconv.weight", m.dconv_weight);
  collect(out, prefix + ".dconv.bias", m.dconv_bias);
  collect(out, prefix + ".ssm.a_log", m.ssm.a_log);
  collect(out, prefix + ".ssm.skip", m.ssm.skip_gain);
  collect(out, prefix + ".ssm.x_proj.weight", m.ssm.x_proj_weight);
  collect(out, prefix + ".ssm.dt_proj.weight", m.ssm.dt_proj_weight);
  collect(out, prefix + ".ssm.dt_proj.bias", m.ssm.dt_proj_bias);
  collect(out, prefix + ".out_proj.weight", m.out_proj_weight);
}

}  // namespace detail_net

template <typename T>
DehazeModel<T> build_model(const ModelConfig& cfg, uint64_t seed = 0) {
  cfg.validate();
  DehazeModel<T> model;
  model.config = cfg;
  Pcg32 rng(mix_seed(seed, 0x48444d4241ULL));

  model.head = detail_net::init_conv<T>(cfg.bands, cfg.channels, rng);
  for (int64_t i = 0; i < cfg.rdm_count; ++i) {
    RdmParams<T> rdm;
    for (int64_t k = 0; k < cfg.dml_per_rdm; ++k) {
      DmlParams<T> dml;
      dml.ln1 = detail_net::init_layer_norm<T>(cfg.channels);
      dml.mamba = wssm::init_mamba_block<T>(cfg.mamba_config(), rng);
      dml.use_mlp = cfg.use_mlp;
      if (cfg.use_mlp) {
        dml.ln2 = detail_net::init_layer_norm<T>(cfg.channels);
        dml.mlp.fc1 = detail_net::init_linear<T>(cfg.channels, cfg.mlp_ratio * cfg.channels, rng);
        dml.mlp.fc2 = detail_net::init_linear<T>(cfg.mlp_ratio * cfg.channels, cfg.channels, rng);
      }
      rdm.dmls.push_back(std::move(dml));
    }
    rdm.conv = detail_net::init_conv<T>(cfg.channels, cfg.channels, rng);
    model.rdms.push_back(std::move(rdm));
  }
  model.tail1 =
      detail_net::init_conv<T>(cfg.tail_concat ? 2 * cfg.channels : cfg.channels, cfg.channels, rng);
  // Zero-initialized last conv: the global skip makes the network the identity
  // at initialization.
  model.tail2.weight = detail_net::zero_param<T>(Shape{3, 3, cfg.channels, cfg.bands});
  model.tail2.bias = detail_net::zero_param<T>(Shape{cfg.bands});

  auto& ps = model.parameters;
  detail_net::collect(ps, "head.weight", model.head.weight);
  detail_net::collect(ps, "head.bias", model.head.bias);
  for (int64_t i = 0; i < cfg.rdm_count; ++i) {
    const std::string rp = "rdm." + std::to_string(i);
    for (int64_t k = 0; k < cfg.dml_per_rdm; ++k) {
      const std::string dp = rp + ".dml." + std::to_string(k);
      const auto& dml = model.rdms[i].dmls[k];
      detail_net::collect(ps, dp + ".ln1.gain", dml.ln1.gain);
      detail_net::collect(ps, dp + ".ln1.bias", dml.ln1.bias);
      detail_net::collect_mamba(ps, dp + ".wssm", dml.mamba);
      if (dml.use_mlp) {
        detail_net::collect(ps, dp + ".ln2.gain", dml.ln2.gain);
        detail_net::collect(ps, dp + ".ln2.bias", dml.ln2.bias);
        detail_net::collect(ps, dp + ".mlp.fc1.weight", dml.mlp.fc1.weight);
        detail_net::collect(ps, dp + ".mlp.fc1.bias", dml.mlp.fc1.bias);
        detail_net::collect(ps, dp + ".mlp.fc2.weight", dml.mlp.fc2.weight);
        detail_net::collect(ps, dp + ".mlp.fc2.bias", dml.mlp.fc2.bias);
      }
    }
    detail_net::collect(ps, rp + ".conv.weight", model.rdms[i].conv.weight);
    detail_net::collect(ps, rp + ".conv.bias", model.rdms[i].conv.bias);
  }
  detail_net::collect(ps, "tail.0.weight", model.tail1.weight);
  detail_net::collect(ps, "tail.0.bias", model.tail1.bias);
  detail_net::collect(ps, "tail.1.weight", model.tail2.weight);
  detail_net::collect(ps, "tail.1.bias", model.tail2.bias);
  return model;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& mlp) {
  const int64_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  auto flat = reshape(x, Shape{h * w, c});
  auto hidden = gelu(linear(flat, mlp.fc1.weight, mlp.fc1.bias));
  return reshape(linear(hidden, mlp.fc2.weight, mlp.fc2.bias), Shape{h, w, c});
}

// F' = WSSM(LN(F)) + F;  F = MLP(LN(F')) + F'
template <typename T>
Tensor<T> dml_forward(const Tensor<T>& x, const DmlParams<T>& dml, int64_t window) {
  auto fp = add(wssm::wssm_forward(layer_norm(x, dml.ln1.gain, dml.ln1.bias), dml.mamba, window), x);
  if (!dml.use_mlp) return fp;
  return add(mlp_forward(layer_norm(fp, dml.ln2.gain, dml.ln2.bias), dml.mlp), fp);
}

// conv3x3(DML_K(...DML_1(F))) + F
template <typename T>
Tensor<T> rdm_forward(const Tensor<T>& x, const RdmParams<T>& rdm, int64_t window) {
  auto f = x;
  for (const auto& dml : rdm.dmls) f = dml_forward(f, dml, window);
  return add(conv2d_same(f, rdm.conv.weight, rdm.conv.bias), x);
}

// F0 = head(X); F_I = RDM_I(...RDM_1(F0)); Y = tail2(tail1(F_I (+) F0)) + X
template <typename T>
Tensor<T> hdmba_forward(const Tensor<T>& x, const DehazeModel<T>& model) {
  const auto& cfg = model.config;
  if (x.rank() != 3 || x.shape()[2] != cfg.bands)
    throw ShapeError("hdmba_forward: input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(cfg.bands) + " configured bands");
  auto f0 = conv2d_same(x, model.head.weight, model.head.bias);
  auto f = f0;
  for (const auto& rdm : model.rdms) f = rdm_forward(f, rdm, cfg.window);
  auto fused = cfg.tail_concat ? concat_last(f, f0) : add(f, f0);
  auto t1 = conv2d_same(fused, model.tail1.weight, model.tail1.bias);
  auto t2 = conv2d_same(t1, model.tail2.weight, model.tail2.bias);
  return add(t2, x);
}

// theta1 * mean((Y - T)^2) + theta2 * mean(|Y - T|), against the clean
// reference cube.
template <typename T>
Tensor<T> loss(const Tensor<T>& y, const Tensor<T>& target, double theta1, double theta2) {
  if (y.shape() != target.shape())
    throw ShapeError("loss: prediction " + shape_str(y.shape()) + " vs reference " +
                     shape_str(target.shape()));
  auto r = sub(y, target);
  auto mse = mean(mul(r, r));
  auto l1 = mean(hdmba::abs(r));
  return add(scale(mse, static_cast<T>(theta1)), scale(l1, static_cast<T>(theta2)));
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParameterCount {
  int64_t total = 0;
  std::vector<std::pair<std::string, int64_t>> groups;  // top-level block -> count
};

template <typename T>
ParameterCount parameter_count(const DehazeModel<T>& model) {
  ParameterCount pc;
  auto group_of = [](const std::string& name) {
    if (name.rfind("rdm.", 0) == 0) {
      size_t second = name.find('.', 4);
      return name.substr(0, second);
    }
    size_t dot = name.find('.');
    return name.substr(0, dot);
  };
  for (const auto& p : model.parameters) {
    if (!p.trainable) continue;
    const int64_t n = p.tensor.numel();
    pc.total += n;
    const std::string g = group_of(p.name);
    if (!pc.groups.empty() && pc.groups.back().first == g)
      pc.groups.back().second += n;
    else
      pc.groups.push_back({g, n});
  }
  return pc;
}

}  // namespace hdmba::net

// Training loop: bias-corrected Adam, cosine-annealed learning rate, random
// aligned crop sampling, periodic full-state checkpoints, and bit-exact
// deterministic resume (optimizer moments, step counter, and RNG state all
// live in the checkpoint).
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hdmba/checkpoint.hpp"
#include "hdmba/haze_sim.hpp"
#include "hdmba/network.hpp"

namespace hdmba::train {

using net::ordered_json;

struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t batch = 4;
  int64_t iterations = 10000;
  int64_t crop_train = 64;
  int64_t crop_test = 128;
  double theta1 = 1.0;
  double theta2 = 0.1;
  uint64_t seed = 0;
  double lr_min = 0.0;
  int64_t checkpoint_every = 1000;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  void validate() const {
    if (lr0 < 0 || lr_min < 0 || batch < 1 || iterations < 1 || crop_train < 1 || crop_test < 1)
      throw ValueError("train config: nonpositive field");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0)
      throw ValueError("train config: invalid Adam constants");
    if (theta1 < 0 || theta2 < 0) throw ValueError("train config: loss weights must be >= 0");
  }

  ordered_json to_json() const {
    ordered_json j;
    j["lr0"] = lr0;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["batch"] = batch;
    j["iterations"] = iterations;
    j["crop_train"] = crop_train;
    j["crop_test"] = crop_test;
    j["theta1"] = theta1;
    j["theta2"] = theta2;
    j["seed"] = seed;
    j["lr_min"] = lr_min;
    j["checkpoint_every"] = checkpoint_every;
    j["grad_clip"] = grad_clip;
    return j;
  }
};

// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2, clamped to lr_min past T.
inline double cosine_lr(int64_t t, int64_t total, double lr0, double lr_min) {
  if (t < 0) throw ValueError("cosine_lr: negative step");
  if (t >= total) return lr_min;
  return lr_min + 0.5 * (lr0 - lr_min) *
                      (1.0 + std::cos(3.14159265358979323846 * double(t) / double(total)));
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // aligned with the parameter list
  int64_t step = 0;

  template <typename P>
  static AdamState init(const std::vector<P>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
      st.v.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
    }
    return st;
  }
};

template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size())
    throw ValueError("adam: state does not match the parameter list");
  for (const auto& p : params)
    if (p.trainable && !p.tensor.has_grad())
      throw ValueError("adam: missing gradient for trainable parameter " + p.name);

  double clip_scale = 1.0;
  if (cfg.grad_clip > 0) {
    double sq = 0;
    for (const auto& p : params)
      if (p.trainable)
        for (T g : p.tensor.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto& w = params[i].tensor.mutable_values();
    const auto& g = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = double(g[j]) * clip_scale;
      m[j] = static_cast<T>(cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * gj);
      v[j] = static_cast<T>(cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * gj * gj);
      const double mhat = double(m[j]) / bc1;
      const double vhat = double(v[j]) / bc2;
      w[j] = static_cast<T>(double(w[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Data access

struct TrainPair {
  hsc::HsiCube hazy, clean;
};

struct Dataset {
  std::vector<TrainPair> train, test;

  static Dataset load(const haze::Manifest& manifest) {
    namespace fs = std::filesystem;
    Dataset ds;
    for (const auto& p : manifest.pairs) {
      TrainPair pair{hsc::read_hsc((fs::path(manifest.base_dir) / p.hazy_path).string()),
                     hsc::read_hsc((fs::path(manifest.base_dir) / p.clean_path).string())};
      (p.split == "test" ? ds.test : ds.train).push_back(std::move(pair));
    }
    return ds;
  }
};

template <typename T>
struct CropSample {
  Tensor<T> hazy, clean;
  int64_t pair_index = 0;
  int64_t x0 = 0, y0 = 0;
};

// Uniform pair and origin sampling; hazy/clean crops are spatially aligned.
template <typename T>
std::vector<CropSample<T>> sample_batch(const Dataset& data, int64_t crop, int64_t batch,
                                        Pcg32& rng) {
  if (data.train.empty()) throw ValueError("sample_batch: training split is empty");
  std::vector<CropSample<T>> out;
  out.reserve(static_cast<size_t>(batch));
  for (int64_t i = 0; i < batch; ++i) {
    const int64_t idx = rng.below(static_cast<int64_t>(data.train.size()));
    const auto& pair = data.train[idx];
    if (crop > pair.hazy.width || crop > pair.hazy.height)
      throw ValueError("sample_batch: crop " + std::to_string(crop) + " larger than image " +
                       std::to_string(pair.hazy.width) + "x" + std::to_string(pair.hazy.height));
    const int64_t x0 = rng.below(pair.hazy.width - crop + 1);
    const int64_t y0 = rng.below(pair.hazy.height - crop + 1);
    out.push_back({hsc::to_tensor_crop<T>(pair.hazy, x0, y0, crop, crop),
                   hsc::to_tensor_crop<T>(pair.clean, x0, y0, crop, crop), idx, x0, y0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loop

struct LossRow {
  int64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossRow> curve;
  std::string final_checkpoint;
};

namespace detail_train {

template <typename T>
std::vector<Parameter<T>> optimizer_tensors(const std::vector<Parameter<T>>& params,
                                            AdamState<T>& st) {
  std::vector<Parameter<T>> extras;
  for (size_t i = 0; i < params.size(); ++i) {
    extras.push_back({"optim.m." + params[i].name,
                      Tensor<T>(params[i].tensor.shape(), std::vector<T>(st.m[i])), false});
    extras.push_back({"optim.v." + params[i].name,
                      Tensor<T>(params[i].tensor.shape(), std::vector<T>(st.v[i])), false});
  }
  return extras;
}

}  // namespace detail_train

template <typename T>
void save_train_state(const std::string& path, const net::DehazeModel<T>& model,
                      AdamState<T>& st, const TrainConfig& cfg, int64_t next_iteration,
                      const Pcg32& rng) {
  ordered_json extra;
  extra["iteration"] = next_iteration;
  extra["adam_step"] = st.step;
  extra["rng_state"] = rng.state();
  extra["rng_inc"] = rng.inc();
  extra["train_config"] = cfg.to_json();
  net::save_checkpoint(path, model.config, model.parameters,
                       detail_train::optimizer_tensors(model.parameters, st), extra);
}

// Restores model parameters, optimizer moments, step counter, and RNG
// position. Returns the iteration to continue from.
template <typename T>
int64_t restore_train_state(const net::LoadedCheckpoint<T>& ck, net::DehazeModel<T>& model,
                            AdamState<T>& st, Pcg32& rng) {
  for (auto& p : model.parameters) {
    const Tensor<T>* src = ck.find(p.name);
    if (!src) throw IoError("resume: parameter " + p.name + " missing from checkpoint");
    if (src->shape() != p.tensor.shape())
      throw IoError("resume: parameter " + p.name + " has shape " + shape_str(src->shape()) +
                    ", model expects " + shape_str(p.tensor.shape()));
    p.tensor.mutable_values() = src->values();
  }
  for (size_t i = 0; i < model.parameters.size(); ++i) {
    const Tensor<T>* m = ck.find("optim.m." + model.parameters[i].name);
    const Tensor<T>* v = ck.find("optim.v." + model.parameters[i].name);
    if (!m || !v)
      throw IoError("resume: optimizer state missing for " + model.parameters[i].name);
    if (m->shape() != model.parameters[i].tensor.shape() ||
        v->shape() != model.parameters[i].tensor.shape())
      throw IoError("resume: optimizer state shape mismatch for " + model.parameters[i].name);
    st.m[i] = m->values();
    st.v[i] = v->values();
  }
  st.step = ck.extra.at("adam_step").template get<int64_t>();
  rng.restore(ck.extra.at("rng_state").template get<uint64_t>(),
              ck.extra.at("rng_inc").template get<uint64_t>());
  return ck.extra.at("iteration").template get<int64_t>();
}

// sample -> forward -> loss -> backward -> adam, with (iteration, lr, loss)
// logged to run_dir/loss_curve.csv and full-state checkpoints every
// checkpoint_every iterations plus final.ckpt at the end.
template <typename T>
TrainResult train(net::DehazeModel<T>& model, const Dataset& data, const TrainConfig& cfg,
                  const std::string& run_dir, const std::string& resume_from = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("train: cannot create run directory " + run_dir);

  auto st = AdamState<T>::init(model.parameters);
  Pcg32 rng(mix_seed(cfg.seed, 0x545241494eULL));
  int64_t start = 0;
  if (!resume_from.empty())
    start = restore_train_state(net::load_checkpoint<T>(resume_from), model, st, rng);

  std::ofstream curve_out((fs::path(run_dir) / "loss_curve.csv").string(), std::ios::trunc);
  if (!curve_out) throw IoError("train: cannot write loss curve in " + run_dir);
  curve_out << "iteration,lr,loss\n";
  curve_out.precision(12);

  TrainResult result;
  for (int64_t t = start; t < cfg.iterations; ++t) {
    const double lr = cosine_lr(t, cfg.iterations, cfg.lr0, cfg.lr_min);
    auto batch = sample_batch<T>(data, cfg.crop_train, cfg.batch, rng);

    Tensor<T> total;
    for (const auto& sample : batch) {
      auto y = net::hdmba_forward(sample.hazy, model);
      auto l = net::loss(y, sample.clean, cfg.theta1, cfg.theta2);
      total = total.defined() ? add(total, l) : l;
    }
    auto batch_loss = scale(total, static_cast<T>(1.0 / double(cfg.batch)));
    const double loss_val = double(batch_loss.item());
    if (!std::isfinite(loss_val))
      throw NumericError("training diverged: non-finite loss at iteration " + std::to_string(t));

    for (auto& p : model.parameters) p.tensor.zero_grad();
    batch_loss.backward();
    adam_step(model.parameters, st, lr, cfg);

    result.curve.push_back({t, lr, loss_val});
    curve_out << t << ',' << lr << ',' << loss_val << '\n';

    if (cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 &&
        t + 1 < cfg.iterations) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoint_%06lld.ckpt", static_cast<long long>(t + 1));
      save_train_state((fs::path(run_dir) / name).string(), model, st, cfg, t + 1, rng);
    }
  }

  result.final_checkpoint = (fs::path(run_dir) / "final.ckpt").string();
  save_train_state(result.final_checkpoint, model, st, cfg, cfg.iterations, rng);
  return result;
}

// Per-group gradient L2 norms keyed by parameter-name prefix; catches
// detached subgraphs (a group whose norm stays zero).
template <typename T>
double grad_norm_by_prefix(const std::vector<Parameter<T>>& params, const std::string& prefix) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += double(g) * double(g);
  }
  return std::sqrt(sq);
}

}  // namespace hdmba::train

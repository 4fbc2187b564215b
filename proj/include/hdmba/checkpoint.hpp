// Checkpoint bundle: one-line JSON manifest (version, model config, tensor
// directory with name/shape/dtype/offset) followed by raw little-endian
// payloads. Key order and payload order are fixed, so save -> load -> save is
// byte-identical.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmba/network.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order and pinned little-endian");

namespace hdmba::net {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "HDMBA-CKPT";

inline ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["bands"] = c.bands;
  j["channels"] = c.channels;
  j["rdm_count"] = c.rdm_count;
  j["dml_per_rdm"] = c.dml_per_rdm;
  j["window"] = c.window;
  j["state_size"] = c.state_size;
  j["expansion"] = c.expansion;
  j["dt_rank"] = c.dt_rank;
  j["mlp_ratio"] = c.mlp_ratio;
  j["use_ssm"] = c.use_ssm;
  j["use_dconv"] = c.use_dconv;
  j["use_gate"] = c.use_gate;
  j["use_mlp"] = c.use_mlp;
  j["bidirectional"] = c.bidirectional;
  j["tail_concat"] = c.tail_concat;
  j["theta1"] = c.theta1;
  j["theta2"] = c.theta2;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.bands = j.at("bands").get<int64_t>();
  c.channels = j.at("channels").get<int64_t>();
  c.rdm_count = j.at("rdm_count").get<int64_t>();
  c.dml_per_rdm = j.at("dml_per_rdm").get<int64_t>();
  c.window = j.at("window").get<int64_t>();
  c.state_size = j.at("state_size").get<int64_t>();
  c.expansion = j.at("expansion").get<int64_t>();
  c.dt_rank = j.at("dt_rank").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
  c.use_ssm = j.at("use_ssm").get<bool>();
  c.use_dconv = j.at("use_dconv").get<bool>();
  c.use_gate = j.at("use_gate").get<bool>();
  c.use_mlp = j.at("use_mlp").get<bool>();
  c.bidirectional = j.at("bidirectional").get<bool>();
  c.tail_concat = j.at("tail_concat").get<bool>();
  c.theta1 = j.at("theta1").get<double>();
  c.theta2 = j.at("theta2").get<double>();
  c.validate();
  return c;
}

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (sizeof(T) == 4)
    return "f32";
  else
    return "f64";
}

// Extra tensors (optimizer moments) ride along after the model parameters;
// `extra` carries small JSON state (step counter, RNG state, train config).
template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const std::vector<Parameter<T>>& params,
                     const std::vector<Parameter<T>>& extra_tensors = {},
                     const ordered_json& extra = ordered_json::object()) {
  ordered_json manifest;
  manifest["magic"] = kCheckpointMagic;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = dtype_name<T>();
  manifest["config"] = config_to_json(config);
  manifest["extra"] = extra;
  ordered_json tensors = ordered_json::array();
  uint64_t offset = 0;
  auto describe = [&](const Parameter<T>& p) {
    ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["dtype"] = dtype_name<T>();
    e["offset"] = offset;
    offset += static_cast<uint64_t>(p.tensor.numel()) * sizeof(T);
    tensors.push_back(std::move(e));
  };
  for (const auto& p : params) describe(p);
  for (const auto& p : extra_tensors) describe(p);
  manifest["tensors"] = std::move(tensors);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out << manifest.dump() << '\n';
  auto write_payload = [&](const Parameter<T>& p) {
    const auto& v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
  };
  for (const auto& p : params) write_payload(p);
  for (const auto& p : extra_tensors) write_payload(p);
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

template <typename T>
struct LoadedCheckpoint {
  ModelConfig config;
  std::vector<Parameter<T>> tensors;  // file order, converted to T
  ordered_json extra;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& p : tensors)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw IoError("checkpoint: missing manifest line in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const std::exception& e) {
    throw IoError("checkpoint: bad manifest in " + path + ": " + e.what());
  }
  if (manifest.value("magic", "") != kCheckpointMagic)
    throw IoError("checkpoint: " + path + " is not an HDMba checkpoint");
  if (manifest.value("version", -1) != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version in " + path);

  LoadedCheckpoint<T> ck;
  ck.config = config_from_json(manifest.at("config"));
  ck.extra = manifest.value("extra", nlohmann::json::object());

  const std::streampos payload_start = in.tellg();
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    Shape shape = e.at("shape").get<Shape>();
    const std::string dt = e.at("dtype").get<std::string>();
    const uint64_t offset = e.at("offset").get<uint64_t>();
    const size_t n = static_cast<size_t>(numel_of(shape));
    const size_t elem = dt == "f32" ? 4 : 8;
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    std::vector<char> raw(n * elem);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw IoError("checkpoint: truncated payload for tensor " + name + " in " + path);
    std::vector<T> v(n);
    if (dt == "f32") {
      const float* src = reinterpret_cast<const float*>(raw.data());
      for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(src[i]);
    } else {
      const double* src = reinterpret_cast<const double*>(raw.data());
      for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(src[i]);
    }
    Tensor<T> t(std::move(shape), std::move(v));
    ck.tensors.push_back({name, t, true});
  }
  return ck;
}

// Rebuild a model and overwrite its parameters from a checkpoint. Every model
// parameter must be present with a matching shape.
template <typename T>
DehazeModel<T> model_from_checkpoint(const LoadedCheckpoint<T>& ck) {
  auto model = build_model<T>(ck.config);
  for (auto& p : model.parameters) {
    const Tensor<T>* src = ck.find(p.name);
    if (!src)
      throw IoError("checkpoint: parameter " + p.name + " missing from checkpoint");
    if (src->shape() != p.tensor.shape())
      throw IoError("checkpoint: parameter " + p.name + " has shape " + shape_str(src->shape()) +
                    ", model expects " + shape_str(p.tensor.shape()));
    p.tensor.mutable_values() = src->values();
  }
  return model;
}

}  // namespace hdmba::net

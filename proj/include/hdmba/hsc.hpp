// HSC v1 cube format: a single-line UTF-8 JSON header
//   {"magic":"HSC1","width":W,"height":H,"bands":B,"dtype":"f32",
//    "layout":"BSQ","wavelengths_nm":[...]}
// terminated by '\n', followed by exactly width*height*bands little-endian
// float32 values, band-sequential (all of band 0 in raster order, then band 1,
// and so on).
#pragma once

#include <bit>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmba/common.hpp"
#include "hdmba/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "HSC payloads are written in host order and pinned little-endian");

namespace hdmba::hsc {

struct HsiCube {
  int64_t width = 0;
  int64_t height = 0;
  int64_t bands = 0;
  std::vector<double> wavelengths_nm;  // strictly ascending band centers
  std::vector<float> data;             // BSQ: data[(b*height + y)*width + x]

  float at(int64_t x, int64_t y, int64_t b) const {
    return data[(b * height + y) * width + x];
  }
  float& at(int64_t x, int64_t y, int64_t b) { return data[(b * height + y) * width + x]; }

  void validate() const {
    if (width < 1 || height < 1 || bands < 1)
      throw ValueError("cube: dimensions must be >= 1");
    if (static_cast<int64_t>(wavelengths_nm.size()) != bands)
      throw ValueError("cube: expected " + std::to_string(bands) + " wavelengths, got " +
                       std::to_string(wavelengths_nm.size()));
    for (size_t i = 1; i < wavelengths_nm.size(); ++i)
      if (!(wavelengths_nm[i] > wavelengths_nm[i - 1]))
        throw ValueError("cube: wavelengths must be strictly ascending");
    if (static_cast<int64_t>(data.size()) != width * height * bands)
      throw ValueError("cube: payload size does not match dimensions");
  }
};

inline std::vector<double> default_wavelengths(int64_t bands, double lo = 400.0,
                                               double hi = 2500.0) {
  std::vector<double> w(static_cast<size_t>(bands));
  for (int64_t b = 0; b < bands; ++b)
    w[b] = bands == 1 ? lo : lo + (hi - lo) * double(b) / double(bands - 1);
  return w;
}

inline void write_hsc(const std::string& path, const HsiCube& cube) {
  cube.validate();
  nlohmann::ordered_json header;
  header["magic"] = "HSC1";
  header["width"] = cube.width;
  header["height"] = cube.height;
  header["bands"] = cube.bands;
  header["dtype"] = "f32";
  header["layout"] = "BSQ";
  header["wavelengths_nm"] = cube.wavelengths_nm;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("hsc: cannot open " + path + " for writing");
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(cube.data.data()),
            static_cast<std::streamsize>(cube.data.size() * sizeof(float)));
  if (!out) throw IoError("hsc: write failed for " + path);
}

inline HsiCube read_hsc(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("hsc: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("hsc: missing header line in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw IoError("hsc: bad header in " + path + ": " + e.what());
  }
  if (header.value("magic", "") != "HSC1") throw IoError("hsc: " + path + " is not an HSC1 cube");
  if (header.value("dtype", "") != "f32" || header.value("layout", "") != "BSQ")
    throw IoError("hsc: unsupported dtype/layout in " + path);
  HsiCube cube;
  cube.width = header.at("width").get<int64_t>();
  cube.height = header.at("height").get<int64_t>();
  cube.bands = header.at("bands").get<int64_t>();
  cube.wavelengths_nm = header.at("wavelengths_nm").get<std::vector<double>>();
  cube.data.resize(static_cast<size_t>(cube.width * cube.height * cube.bands));
  in.read(reinterpret_cast<char*>(cube.data.data()),
          static_cast<std::streamsize>(cube.data.size() * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(cube.data.size() * sizeof(float)))
    throw IoError("hsc: truncated payload in " + path);
  cube.validate();
  return cube;
}

// Cube (BSQ) <-> feature tensor (H, W, B) interleaved, the network's layout.
template <typename T>
Tensor<T> to_tensor(const HsiCube& cube) {
  std::vector<T> v(cube.data.size());
  for (int64_t b = 0; b < cube.bands; ++b)
    for (int64_t y = 0; y < cube.height; ++y)
      for (int64_t x = 0; x < cube.width; ++x)
        v[(y * cube.width + x) * cube.bands + b] = static_cast<T>(cube.at(x, y, b));
  return Tensor<T>(Shape{cube.height, cube.width, cube.bands}, std::move(v));
}

// Spatially aligned crop straight to the network layout.
template <typename T>
Tensor<T> to_tensor_crop(const HsiCube& cube, int64_t x0, int64_t y0, int64_t w, int64_t h) {
  if (x0 < 0 || y0 < 0 || x0 + w > cube.width || y0 + h > cube.height)
    throw ValueError("crop: window " + std::to_string(w) + "x" + std::to_string(h) + " at (" +
                     std::to_string(x0) + ", " + std::to_string(y0) + ") outside " +
                     std::to_string(cube.width) + "x" + std::to_string(cube.height));
  std::vector<T> v(static_cast<size_t>(w * h * cube.bands));
  for (int64_t b = 0; b < cube.bands; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        v[(y * w + x) * cube.bands + b] = static_cast<T>(cube.at(x0 + x, y0 + y, b));
  return Tensor<T>(Shape{h, w, cube.bands}, std::move(v));
}

template <typename T>
HsiCube from_tensor(const Tensor<T>& t, std::vector<double> wavelengths) {
  if (t.rank() != 3)
    throw ShapeError("from_tensor: expected (H, W, B), got " + shape_str(t.shape()));
  HsiCube cube;
  cube.height = t.shape()[0];
  cube.width = t.shape()[1];
  cube.bands = t.shape()[2];
  cube.wavelengths_nm = std::move(wavelengths);
  cube.data.resize(t.values().size());
  for (int64_t b = 0; b < cube.bands; ++b)
    for (int64_t y = 0; y < cube.height; ++y)
      for (int64_t x = 0; x < cube.width; ++x)
        cube.at(x, y, b) = static_cast<float>(t.values()[(y * cube.width + x) * cube.bands + b]);
  cube.validate();
  return cube;
}

}  // namespace hdmba::hsc

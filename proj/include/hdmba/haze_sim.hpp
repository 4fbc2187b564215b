// Synthetic paired hazy/clean hyperspectral data. Clean scenes are procedural
// (Voronoi material maps with smooth random spectra plus low-amplitude
// texture); haze is additive path radiance after the dark-object-subtraction
// reading: hazy = clip(clean + abundance * w(lambda) * T(x,y)) with
// w(lambda) = (lambda_min / lambda)^gamma, so short wavelengths are hit
// hardest. Thickness maps are smoothed multi-octave noise whose global mean
// tracks the thickness level. Everything is a pure function of its seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmba/hsc.hpp"
#include "hdmba/rng.hpp"

namespace hdmba::haze {

using hsc::HsiCube;
using ordered_json = nlohmann::ordered_json;

struct HazeSpec {
  int64_t thickness_level = 10;   // 0 .. thickness_levels-1
  int64_t thickness_levels = 20;  // T
  double abundance = 1.0;         // alpha >= 0; 0 leaves the cube untouched
  uint64_t seed = 0;              // thickness-map seed
  double spectral_decay = 1.5;    // gamma in (lambda_min / lambda)^gamma

  void validate() const {
    if (thickness_levels < 1 || thickness_level < 0 || thickness_level >= thickness_levels)
      throw ValueError("haze spec: thickness level out of range");
    if (abundance < 0) throw ValueError("haze spec: abundance must be >= 0");
  }
};

namespace detail_haze {

// Multi-octave value noise in [0,1]-ish range before normalization.
inline std::vector<double> value_noise(int64_t w, int64_t h, Pcg32& rng, int octaves) {
  std::vector<double> field(static_cast<size_t>(w * h), 0.0);
  double amp = 1.0;
  for (int o = 0; o < octaves; ++o) {
    const int64_t cells = 3LL << o;
    std::vector<double> lattice(static_cast<size_t>((cells + 1) * (cells + 1)));
    for (auto& v : lattice) v = rng.uniform();
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double u = w > 1 ? double(x) / double(w - 1) * cells : 0.0;
        const double v = h > 1 ? double(y) / double(h - 1) * cells : 0.0;
        const int64_t i0 = std::min<int64_t>(cells - 1, static_cast<int64_t>(u));
        const int64_t j0 = std::min<int64_t>(cells - 1, static_cast<int64_t>(v));
        const double fu = u - i0, fv = v - j0;
        auto lat = [&](int64_t i, int64_t j) { return lattice[j * (cells + 1) + i]; };
        const double val = (1 - fu) * (1 - fv) * lat(i0, j0) + fu * (1 - fv) * lat(i0 + 1, j0) +
                           (1 - fu) * fv * lat(i0, j0 + 1) + fu * fv * lat(i0 + 1, j0 + 1);
        field[y * w + x] += amp * val;
      }
    amp *= 0.5;
  }
  return field;
}

inline void gaussian_blur(std::vector<double>& f, int64_t w, int64_t h, double sigma) {
  if (sigma <= 0) return;
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double norm = 0;
  for (int64_t i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;
  auto fold = [](int64_t i, int64_t n) {
    if (n == 1) return int64_t(0);
    const int64_t p = 2 * (n - 1);
    i = ((i % p) + p) % p;
    return i < n ? i : p - i;
  };
  std::vector<double> tmp(f.size());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int64_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * f[y * w + fold(x + i, w)];
      tmp[y * w + x] = acc;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int64_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[fold(y + i, h) * w + x];
      f[y * w + x] = acc;
    }
}

inline void normalize01(std::vector<double>& f) {
  auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const double lo = *mn, hi = *mx;
  if (hi - lo < 1e-12) {
    std::fill(f.begin(), f.end(), 0.5);
    return;
  }
  for (auto& v : f) v = (v - lo) / (hi - lo);
}

}  // namespace detail_haze

// Smoothed noise field in [0,1] whose global mean rises monotonically with the
// thickness level: level 0 -> ~0.05, max level -> ~0.95 (hit by a power
// transform solved with bisection, which preserves the [0,1] range).
inline std::vector<float> generate_thickness_map(int64_t width, int64_t height, int64_t level,
                                                 uint64_t seed, int64_t levels = 20) {
  if (width < 1 || height < 1) throw ValueError("thickness map: dimensions must be >= 1");
  if (level < 0 || level >= levels) throw ValueError("thickness map: level out of range");
  Pcg32 rng(mix_seed(seed, 0x7468696bULL));
  auto field = detail_haze::value_noise(width, height, rng, 4);
  detail_haze::gaussian_blur(field, width, height,
                             std::clamp(double(std::min(width, height)) / 24.0, 0.8, 4.0));
  detail_haze::normalize01(field);

  const double target =
      levels == 1 ? 0.5 : 0.05 + 0.90 * double(level) / double(levels - 1);
  double lo = 1e-4, hi = 1e4;  // mean(field^p) decreases monotonically in p
  auto mean_pow = [&](double p) {
    double acc = 0;
    for (double v : field) acc += std::pow(v, p);
    return acc / double(field.size());
  };
  for (int it = 0; it < 100; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (mean_pow(mid) > target)
      lo = mid;
    else
      hi = mid;
  }
  const double p = std::sqrt(lo * hi);
  std::vector<float> map(field.size());
  for (size_t i = 0; i < field.size(); ++i) map[i] = static_cast<float>(std::pow(field[i], p));
  return map;
}

struct SceneInfo {
  HsiCube cube;
  std::vector<int> material_map;                 // per pixel, row-major
  int64_t material_count = 0;
  std::vector<std::vector<float>> signatures;    // per material, per band
};

// Piecewise-smooth synthetic scene: Voronoi segmentation into 3..8 materials,
// each with a smooth random spectral signature, plus broadband low-amplitude
// spatial texture. Deterministic per seed.
inline SceneInfo generate_clean_scene_info(int64_t width, int64_t height, int64_t bands,
                                           std::vector<double> wavelengths, uint64_t seed) {
  if (width < 1 || height < 1 || bands < 1)
    throw ValueError("clean scene: dimensions must be >= 1");
  if (static_cast<int64_t>(wavelengths.size()) != bands)
    throw ValueError("clean scene: wavelength count does not match bands");
  Pcg32 rng(mix_seed(seed, 0x7363656eULL));

  SceneInfo info;
  info.material_count = 3 + rng.below(6);
  std::vector<double> sx(info.material_count), sy(info.material_count);
  for (int64_t m = 0; m < info.material_count; ++m) {
    sx[m] = rng.uniform(0.0, double(width));
    sy[m] = rng.uniform(0.0, double(height));
  }

  const double lam_lo = wavelengths.front(), lam_hi = wavelengths.back();
  info.signatures.assign(info.material_count, std::vector<float>(bands));
  for (int64_t m = 0; m < info.material_count; ++m) {
    const double base = rng.uniform(0.15, 0.60);
    double amp[3], mu[3], sig[3];
    for (int j = 0; j < 3; ++j) {
      amp[j] = rng.uniform(-0.25, 0.35);
      mu[j] = rng.uniform(lam_lo, lam_hi == lam_lo ? lam_lo + 1.0 : lam_hi);
      sig[j] = rng.uniform(80.0, 500.0);
    }
    for (int64_t b = 0; b < bands; ++b) {
      double v = base;
      for (int j = 0; j < 3; ++j) {
        const double d = (wavelengths[b] - mu[j]) / sig[j];
        v += amp[j] * std::exp(-0.5 * d * d);
      }
      info.signatures[m][b] = static_cast<float>(std::clamp(v, 0.02, 0.98));
    }
  }

  info.material_map.resize(static_cast<size_t>(width * height));
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      int best = 0;
      double best_d = 1e300;
      for (int64_t m = 0; m < info.material_count; ++m) {
        const double dx = x + 0.5 - sx[m], dy = y + 0.5 - sy[m];
        const double d = dx * dx + dy * dy;
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(m);
        }
      }
      info.material_map[y * width + x] = best;
    }

  auto texture = detail_haze::value_noise(width, height, rng, 2);
  detail_haze::normalize01(texture);

  auto& cube = info.cube;
  cube.width = width;
  cube.height = height;
  cube.bands = bands;
  cube.wavelengths_nm = std::move(wavelengths);
  cube.data.resize(static_cast<size_t>(width * height * bands));
  for (int64_t b = 0; b < bands; ++b)
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        const int m = info.material_map[y * width + x];
        const double t = (texture[y * width + x] * 2.0 - 1.0) * 0.03;
        cube.at(x, y, b) =
            static_cast<float>(std::clamp(double(info.signatures[m][b]) + t, 0.0, 1.0));
      }
  return info;
}

inline HsiCube generate_clean_scene(int64_t width, int64_t height, int64_t bands,
                                    std::vector<double> wavelengths, uint64_t seed) {
  return generate_clean_scene_info(width, height, bands, std::move(wavelengths), seed).cube;
}

// hazy_b(x,y) = clip(clean_b(x,y) + alpha * (lambda_0/lambda_b)^gamma * T(x,y), 0, 1)
inline HsiCube apply_haze(const HsiCube& clean, const HazeSpec& spec) {
  clean.validate();
  spec.validate();
  if (spec.abundance == 0.0) return clean;
  auto tmap = generate_thickness_map(clean.width, clean.height, spec.thickness_level, spec.seed,
                                     spec.thickness_levels);
  const double lam0 = clean.wavelengths_nm.front();
  HsiCube hazy = clean;
  for (int64_t b = 0; b < clean.bands; ++b) {
    const double wb = std::pow(lam0 / clean.wavelengths_nm[b], spec.spectral_decay);
    for (int64_t y = 0; y < clean.height; ++y)
      for (int64_t x = 0; x < clean.width; ++x) {
        const double v =
            double(clean.at(x, y, b)) + spec.abundance * wb * double(tmap[y * clean.width + x]);
        hazy.at(x, y, b) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return hazy;
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct DatasetRecipe {
  int64_t scenes = 10;
  int64_t thickness_levels = 4;
  std::vector<double> abundances = {0.2, 0.4, 0.6, 0.8, 1.0};
  int64_t width = 64, height = 64, bands = 16;
  double gamma = 1.5;
  double wavelength_lo = 400.0, wavelength_hi = 2500.0;
  uint64_t seed = 0;
  std::string out_dir;

  void validate() const {
    if (scenes < 1 || thickness_levels < 1 || abundances.empty())
      throw ValueError("dataset recipe: scenes, thickness levels, abundances must be nonempty");
    if (width < 1 || height < 1 || bands < 1)
      throw ValueError("dataset recipe: dimensions must be >= 1");
    if (out_dir.empty()) throw ValueError("dataset recipe: output directory required");
  }
};

inline std::vector<double> default_abundances(int64_t count) {
  std::vector<double> a(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i)
    a[i] = count == 1 ? 1.0 : 0.2 + 0.8 * double(i) / double(count - 1);
  return a;
}

struct PairRecord {
  int64_t scene = 0;
  int64_t thickness_level = 0;
  double abundance = 0.0;
  uint64_t haze_seed = 0;
  std::string clean_path;  // relative to the manifest directory
  std::string hazy_path;
  std::string split;  // "train" | "test"
};

struct Manifest {
  DatasetRecipe recipe;
  std::vector<PairRecord> pairs;
  std::string base_dir;  // directory holding the manifest

  std::vector<PairRecord> split_pairs(const std::string& which) const {
    std::vector<PairRecord> out;
    for (const auto& p : pairs)
      if (p.split == which) out.push_back(p);
    return out;
  }
};

inline ordered_json manifest_to_json(const Manifest& m) {
  ordered_json j;
  j["version"] = 1;
  j["master_seed"] = m.recipe.seed;
  ordered_json r;
  r["scenes"] = m.recipe.scenes;
  r["thickness_levels"] = m.recipe.thickness_levels;
  r["abundances"] = m.recipe.abundances;
  r["width"] = m.recipe.width;
  r["height"] = m.recipe.height;
  r["bands"] = m.recipe.bands;
  r["gamma"] = m.recipe.gamma;
  r["wavelength_lo"] = m.recipe.wavelength_lo;
  r["wavelength_hi"] = m.recipe.wavelength_hi;
  j["recipe"] = std::move(r);
  ordered_json pairs = ordered_json::array();
  for (const auto& p : m.pairs) {
    ordered_json e;
    e["scene"] = p.scene;
    e["thickness_level"] = p.thickness_level;
    e["abundance"] = p.abundance;
    e["seed"] = p.haze_seed;
    e["clean"] = p.clean_path;
    e["hazy"] = p.hazy_path;
    e["split"] = p.split;
    pairs.push_back(std::move(e));
  }
  j["pairs"] = std::move(pairs);
  return j;
}

// Scenes x (thickness x abundance) pairs on disk plus a manifest. The 90/10
// train/test split is by scene (the trailing ~10% of scene indices), never by
// pair, so test scenes are unseen during training.
inline Manifest build_dataset(const DatasetRecipe& recipe) {
  recipe.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(recipe.out_dir, ec);
  if (ec) throw IoError("dataset: cannot create directory " + recipe.out_dir);

  const int64_t n_test = recipe.scenes >= 2 ? std::max<int64_t>(1, recipe.scenes / 10) : 0;
  auto wavelengths = hsc::default_wavelengths(recipe.bands, recipe.wavelength_lo,
                                              recipe.wavelength_hi);

  Manifest manifest;
  manifest.recipe = recipe;
  manifest.base_dir = recipe.out_dir;

  char name[64];
  for (int64_t s = 0; s < recipe.scenes; ++s) {
    const uint64_t scene_seed = mix_seed(recipe.seed, 0x1000 + static_cast<uint64_t>(s));
    auto clean = generate_clean_scene(recipe.width, recipe.height, recipe.bands, wavelengths,
                                      scene_seed);
    std::snprintf(name, sizeof(name), "scene_%04lld_clean.hsc", static_cast<long long>(s));
    const std::string clean_rel = name;
    hsc::write_hsc((fs::path(recipe.out_dir) / clean_rel).string(), clean);
    const std::string split = s >= recipe.scenes - n_test ? "test" : "train";

    for (int64_t level = 0; level < recipe.thickness_levels; ++level) {
      // one thickness map per (scene, level); abundances share it
      const uint64_t map_seed =
          mix_seed(recipe.seed, 0xA000000ULL + static_cast<uint64_t>(s) * 1000ULL +
                                    static_cast<uint64_t>(level));
      for (size_t ai = 0; ai < recipe.abundances.size(); ++ai) {
        HazeSpec spec;
        spec.thickness_level = level;
        spec.thickness_levels = recipe.thickness_levels;
        spec.abundance = recipe.abundances[ai];
        spec.seed = map_seed;
        spec.spectral_decay = recipe.gamma;
        auto hazy = apply_haze(clean, spec);
        std::snprintf(name, sizeof(name), "scene_%04lld_t%02lld_a%02zu_hazy.hsc",
                      static_cast<long long>(s), static_cast<long long>(level), ai);
        const std::string hazy_rel = name;
        hsc::write_hsc((fs::path(recipe.out_dir) / hazy_rel).string(), hazy);
        manifest.pairs.push_back(
            {s, level, recipe.abundances[ai], map_seed, clean_rel, hazy_rel, split});
      }
    }
  }

  const auto manifest_path = fs::path(recipe.out_dir) / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("dataset: cannot write " + manifest_path.string());
  out << manifest_to_json(manifest).dump(2) << '\n';
  if (!out) throw IoError("dataset: write failed for " + manifest_path.string());
  return manifest;
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("manifest: bad JSON in " + path + ": " + e.what());
  }
  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  const auto& r = j.at("recipe");
  m.recipe.seed = j.at("master_seed").get<uint64_t>();
  m.recipe.scenes = r.at("scenes").get<int64_t>();
  m.recipe.thickness_levels = r.at("thickness_levels").get<int64_t>();
  m.recipe.abundances = r.at("abundances").get<std::vector<double>>();
  m.recipe.width = r.at("width").get<int64_t>();
  m.recipe.height = r.at("height").get<int64_t>();
  m.recipe.bands = r.at("bands").get<int64_t>();
  m.recipe.gamma = r.at("gamma").get<double>();
  m.recipe.wavelength_lo = r.at("wavelength_lo").get<double>();
  m.recipe.wavelength_hi = r.at("wavelength_hi").get<double>();
  m.recipe.out_dir = m.base_dir;
  for (const auto& e : j.at("pairs")) {
    PairRecord p;
    p.scene = e.at("scene").get<int64_t>();
    p.thickness_level = e.at("thickness_level").get<int64_t>();
    p.abundance = e.at("abundance").get<double>();
    p.haze_seed = e.at("seed").get<uint64_t>();
    p.clean_path = e.at("clean").get<std::string>();
    p.hazy_path = e.at("hazy").get<std::string>();
    p.split = e.at("split").get<std::string>();
    m.pairs.push_back(std::move(p));
  }
  return m;
}

}  // namespace hdmba::haze

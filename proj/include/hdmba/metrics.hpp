// Paired and reference-free quality metrics over hyperspectral cubes, all in
// double precision. Conventions pinned here and echoed into every report:
// SSIM with an 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, valid-mode
// positions), computed per band and band-averaged; UQI over 8x8 sliding
// blocks with degenerate (zero-variance) blocks skipped; SAM as the mean
// per-pixel spectral angle over nonzero-norm spectra; AG as
// mean sqrt((Gx^2+Gy^2)/2) over forward differences.
#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmba/hsc.hpp"

namespace hdmba::metrics {

using hsc::HsiCube;
using ordered_json = nlohmann::ordered_json;

struct MetricConfig {
  double peak = 1.0;
  int64_t ssim_window = 11;
  double ssim_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  int64_t uqi_block = 8;
};

namespace detail_metrics {

inline void require_paired(const HsiCube& a, const HsiCube& b, const char* op) {
  if (a.width != b.width || a.height != b.height || a.bands != b.bands)
    throw ShapeError(std::string(op) + ": cube " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.bands) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                     std::to_string(b.bands));
}

inline const float* band_plane(const HsiCube& c, int64_t b) {
  return c.data.data() + b * c.width * c.height;
}

}  // namespace detail_metrics

// ---------------------------------------------------------------------------
// PSNR

struct PsnrResult {
  double db = 0.0;
  bool identical = false;  // MSE == 0; db is +inf
};

inline PsnrResult psnr(const HsiCube& a, const HsiCube& b, double peak = 1.0) {
  detail_metrics::require_paired(a, b, "psnr");
  double mse = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(peak * peak / mse), false};
}

// ---------------------------------------------------------------------------
// SSIM

namespace detail_metrics {

inline std::vector<double> gaussian_kernel(int64_t size, double sigma) {
  std::vector<double> k(static_cast<size_t>(size));
  const double c = (double(size) - 1.0) / 2.0;
  double norm = 0.0;
  for (int64_t i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    norm += k[i];
  }
  for (auto& v : k) v /= norm;
  return k;
}

// Separable valid-mode filtering of one band plane (and products).
inline std::vector<double> filter_valid(const std::vector<double>& img, int64_t w, int64_t h,
                                        const std::vector<double>& k) {
  const int64_t ks = static_cast<int64_t>(k.size());
  const int64_t vw = w - ks + 1, vh = h - ks + 1;
  std::vector<double> tmp(static_cast<size_t>(h * vw));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < ks; ++i) acc += k[i] * img[y * w + x + i];
      tmp[y * vw + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(vh * vw));
  for (int64_t y = 0; y < vh; ++y)
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < ks; ++i) acc += k[i] * tmp[(y + i) * vw + x];
      out[y * vw + x] = acc;
    }
  return out;
}

inline double ssim_band(const float* pa, const float* pb, int64_t w, int64_t h,
                        const MetricConfig& cfg) {
  const int64_t ks = cfg.ssim_window;
  const auto kernel = gaussian_kernel(ks, cfg.ssim_sigma);
  const size_t n = static_cast<size_t>(w * h);
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (size_t i = 0; i < n; ++i) {
    a[i] = pa[i];
    b[i] = pb[i];
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  auto mu1 = filter_valid(a, w, h, kernel);
  auto mu2 = filter_valid(b, w, h, kernel);
  auto s11 = filter_valid(aa, w, h, kernel);
  auto s22 = filter_valid(bb, w, h, kernel);
  auto s12 = filter_valid(ab, w, h, kernel);
  const double c1 = cfg.k1 * cfg.peak * cfg.k1 * cfg.peak;
  const double c2 = cfg.k2 * cfg.peak * cfg.k2 * cfg.peak;
  double acc = 0.0;
  for (size_t i = 0; i < mu1.size(); ++i) {
    const double m1 = mu1[i], m2 = mu2[i];
    const double v1 = s11[i] - m1 * m1;
    const double v2 = s22[i] - m2 * m2;
    const double cov = s12[i] - m1 * m2;
    acc += ((2 * m1 * m2 + c1) * (2 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
  }
  return acc / double(mu1.size());
}

}  // namespace detail_metrics

struct SsimResult {
  double mean = 0.0;
  std::vector<double> per_band;
};

inline SsimResult ssim(const HsiCube& a, const HsiCube& b, const MetricConfig& cfg = {}) {
  detail_metrics::require_paired(a, b, "ssim");
  if (a.width < cfg.ssim_window || a.height < cfg.ssim_window)
    throw ValueError("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " smaller than the " + std::to_string(cfg.ssim_window) + "-pixel window");
  SsimResult r;
  r.per_band.resize(static_cast<size_t>(a.bands));
  for (int64_t band = 0; band < a.bands; ++band) {
    r.per_band[band] = detail_metrics::ssim_band(detail_metrics::band_plane(a, band),
                                                 detail_metrics::band_plane(b, band), a.width,
                                                 a.height, cfg);
    r.mean += r.per_band[band];
  }
  r.mean /= double(a.bands);
  return r;
}

// ---------------------------------------------------------------------------
// UQI

inline double uqi(const HsiCube& a, const HsiCube& b, const MetricConfig& cfg = {}) {
  detail_metrics::require_paired(a, b, "uqi");
  const int64_t bs = cfg.uqi_block;
  if (a.width < bs || a.height < bs)
    throw ValueError("uqi: image smaller than the " + std::to_string(bs) + "-pixel block");
  const int64_t w = a.width, h = a.height;
  const double n = double(bs * bs);
  double acc = 0.0;
  int64_t used = 0;
  // integral images per band: sums of a, b, a^2, b^2, ab
  const size_t iw = static_cast<size_t>(w + 1), ih = static_cast<size_t>(h + 1);
  std::vector<double> ia(iw * ih), ib(iw * ih), iaa(iw * ih), ibb(iw * ih), iab(iw * ih);
  for (int64_t band = 0; band < a.bands; ++band) {
    const float* pa = detail_metrics::band_plane(a, band);
    const float* pb = detail_metrics::band_plane(b, band);
    std::fill(ia.begin(), ia.end(), 0.0);
    std::fill(ib.begin(), ib.end(), 0.0);
    std::fill(iaa.begin(), iaa.end(), 0.0);
    std::fill(ibb.begin(), ibb.end(), 0.0);
    std::fill(iab.begin(), iab.end(), 0.0);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const size_t i = (y + 1) * iw + (x + 1);
        const size_t up = y * iw + (x + 1), left = (y + 1) * iw + x, diag = y * iw + x;
        const double va = pa[y * w + x], vb = pb[y * w + x];
        ia[i] = va + ia[up] + ia[left] - ia[diag];
        ib[i] = vb + ib[up] + ib[left] - ib[diag];
        iaa[i] = va * va + iaa[up] + iaa[left] - iaa[diag];
        ibb[i] = vb * vb + ibb[up] + ibb[left] - ibb[diag];
        iab[i] = va * vb + iab[up] + iab[left] - iab[diag];
      }
    auto block_sum = [&](const std::vector<double>& ii, int64_t x, int64_t y) {
      return ii[(y + bs) * iw + (x + bs)] - ii[y * iw + (x + bs)] - ii[(y + bs) * iw + x] +
             ii[y * iw + x];
    };
    for (int64_t y = 0; y + bs <= h; ++y)
      for (int64_t x = 0; x + bs <= w; ++x) {
        const double ma = block_sum(ia, x, y) / n;
        const double mb = block_sum(ib, x, y) / n;
        const double va = block_sum(iaa, x, y) / n - ma * ma;
        const double vb = block_sum(ibb, x, y) / n - mb * mb;
        const double cov = block_sum(iab, x, y) / n - ma * mb;
        const double denom_s = va + vb;
        if (denom_s <= 1e-15) continue;  // structureless block
        const double denom_l = ma * ma + mb * mb;
        const double lum = denom_l <= 1e-15 ? 1.0 : 2.0 * ma * mb / denom_l;
        acc += (2.0 * cov / denom_s) * lum;
        ++used;
      }
  }
  if (used == 0) throw ValueError("uqi: every block is degenerate (constant imagery)");
  return acc / double(used);
}

// ---------------------------------------------------------------------------
// SAM

inline double sam(const HsiCube& a, const HsiCube& b) {
  detail_metrics::require_paired(a, b, "sam");
  if (a.bands < 2) throw ValueError("sam: needs at least 2 bands");
  const int64_t plane = a.width * a.height;
  double acc = 0.0;
  int64_t used = 0;
  std::vector<double> ua(static_cast<size_t>(a.bands)), ub(static_cast<size_t>(a.bands));
  for (int64_t p = 0; p < plane; ++p) {
    double na = 0.0, nb = 0.0;
    for (int64_t band = 0; band < a.bands; ++band) {
      const double va = a.data[band * plane + p];
      const double vb = b.data[band * plane + p];
      na += va * va;
      nb += vb * vb;
    }
    if (na == 0.0 || nb == 0.0) continue;  // zero-norm spectra excluded
    // Kahan's angle formula on the unit vectors: exact 0 for identical
    // spectra and accurate for tiny angles, unlike acos near 1.
    const double inva = 1.0 / std::sqrt(na), invb = 1.0 / std::sqrt(nb);
    double diff = 0.0, sum = 0.0;
    for (int64_t band = 0; band < a.bands; ++band) {
      const double va = double(a.data[band * plane + p]) * inva;
      const double vb = double(b.data[band * plane + p]) * invb;
      diff += (va - vb) * (va - vb);
      sum += (va + vb) * (va + vb);
    }
    acc += 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
    ++used;
  }
  if (used == 0) throw ValueError("sam: every pixel has a zero-norm spectrum");
  return acc / double(used);
}

// ---------------------------------------------------------------------------
// Average gradient (reference-free)

inline double avg_gradient(const HsiCube& a) {
  if (a.width < 2 || a.height < 2) throw ValueError("avg_gradient: spatial dims must be >= 2");
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t band = 0; band < a.bands; ++band) {
    const float* p = detail_metrics::band_plane(a, band);
    for (int64_t y = 0; y + 1 < a.height; ++y)
      for (int64_t x = 0; x + 1 < a.width; ++x) {
        const double gx = double(p[y * a.width + x + 1]) - double(p[y * a.width + x]);
        const double gy = double(p[(y + 1) * a.width + x]) - double(p[y * a.width + x]);
        acc += std::sqrt((gx * gx + gy * gy) / 2.0);
        ++count;
      }
  }
  return acc / double(count);
}

// ---------------------------------------------------------------------------
// Curves and spectra

struct BandRow {
  double wavelength_nm = 0.0;
  double ssim = 0.0;
  double psnr_db = 0.0;
  bool psnr_identical = false;
};

inline std::vector<BandRow> bandwise_curves(const HsiCube& a, const HsiCube& b,
                                            const MetricConfig& cfg = {}) {
  detail_metrics::require_paired(a, b, "bandwise_curves");
  auto s = ssim(a, b, cfg);
  std::vector<BandRow> rows(static_cast<size_t>(a.bands));
  const int64_t plane = a.width * a.height;
  for (int64_t band = 0; band < a.bands; ++band) {
    double mse = 0.0;
    const float* pa = detail_metrics::band_plane(a, band);
    const float* pb = detail_metrics::band_plane(b, band);
    for (int64_t p = 0; p < plane; ++p) {
      const double d = double(pa[p]) - double(pb[p]);
      mse += d * d;
    }
    mse /= double(plane);
    rows[band].wavelength_nm = a.wavelengths_nm[band];
    rows[band].ssim = s.per_band[band];
    rows[band].psnr_identical = mse == 0.0;
    rows[band].psnr_db = rows[band].psnr_identical
                             ? std::numeric_limits<double>::infinity()
                             : 10.0 * std::log10(cfg.peak * cfg.peak / mse);
  }
  return rows;
}

inline std::vector<std::pair<double, double>> extract_spectrum(const HsiCube& cube, int64_t x,
                                                               int64_t y) {
  if (x < 0 || x >= cube.width || y < 0 || y >= cube.height)
    throw ValueError("extract_spectrum: pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                     ") outside " + std::to_string(cube.width) + "x" + std::to_string(cube.height));
  std::vector<std::pair<double, double>> rows(static_cast<size_t>(cube.bands));
  for (int64_t b = 0; b < cube.bands; ++b)
    rows[b] = {cube.wavelengths_nm[b], double(cube.at(x, y, b))};
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  double ssim = 0.0;
  double psnr_db = 0.0;
  bool psnr_identical = false;
  double uqi = 0.0;
  double sam_rad = 0.0;
  double ag_result = 0.0;
  double ag_reference = 0.0;
  std::vector<BandRow> bands;
  MetricConfig config;
};

inline MetricReport evaluate_pair(const HsiCube& result, const HsiCube& reference,
                                  const MetricConfig& cfg = {}) {
  MetricReport rep;
  rep.config = cfg;
  auto s = ssim(result, reference, cfg);
  rep.ssim = s.mean;
  auto p = psnr(result, reference, cfg.peak);
  rep.psnr_db = p.db;
  rep.psnr_identical = p.identical;
  rep.uqi = uqi(result, reference, cfg);
  rep.sam_rad = sam(result, reference);
  rep.ag_result = avg_gradient(result);
  rep.ag_reference = avg_gradient(reference);
  rep.bands = bandwise_curves(result, reference, cfg);
  return rep;
}

inline ordered_json report_to_json(const MetricReport& r) {
  ordered_json j;
  j["ssim"] = r.ssim;
  j["psnr_db"] = r.psnr_identical ? ordered_json("identical") : ordered_json(r.psnr_db);
  j["uqi"] = r.uqi;
  j["sam_rad"] = r.sam_rad;
  j["avg_gradient_result"] = r.ag_result;
  j["avg_gradient_reference"] = r.ag_reference;
  ordered_json cfg;
  cfg["peak"] = r.config.peak;
  cfg["ssim_window"] = r.config.ssim_window;
  cfg["ssim_sigma"] = r.config.ssim_sigma;
  cfg["k1"] = r.config.k1;
  cfg["k2"] = r.config.k2;
  cfg["uqi_block"] = r.config.uqi_block;
  cfg["ag_formula"] = "mean sqrt((Gx^2+Gy^2)/2), forward differences";
  cfg["band_reduction"] = "per-band metrics averaged over bands";
  j["config"] = std::move(cfg);
  return j;
}

inline void write_bandcurve_csv(const std::string& path, const std::vector<BandRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("bandcurve: cannot open " + path + " for writing");
  out << "wavelength_nm,ssim,psnr_db\n";
  for (const auto& r : rows) {
    out << r.wavelength_nm << ',' << r.ssim << ',';
    if (r.psnr_identical)
      out << "inf";
    else
      out << r.psnr_db;
    out << '\n';
  }
  if (!out) throw IoError("bandcurve: write failed for " + path);
}

}  // namespace hdmba::metrics

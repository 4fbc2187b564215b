#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "hdmba/haze_sim.hpp"
#include "hdmba/metrics.hpp"
#include "oracles.hpp"

namespace metrics = hdmba::metrics;
namespace hsc = hdmba::hsc;
using hdmba::Pcg32;
using hsc::HsiCube;

namespace {

HsiCube make_cube(int64_t w, int64_t h, int64_t b, std::vector<float> data) {
  HsiCube c;
  c.width = w;
  c.height = h;
  c.bands = b;
  c.wavelengths_nm = hsc::default_wavelengths(b);
  c.data = std::move(data);
  c.validate();
  return c;
}

HsiCube random_cube(int64_t w, int64_t h, int64_t b, Pcg32& rng, float lo = 0.0f,
                    float hi = 1.0f) {
  std::vector<float> d(static_cast<size_t>(w * h * b));
  for (auto& v : d) v = static_cast<float>(rng.uniform(lo, hi));
  return make_cube(w, h, b, std::move(d));
}

oracles::CubeView view(const HsiCube& c) { return {c.width, c.height, c.bands, c.data.data()}; }

}  // namespace

TEST_CASE("psnr spot value and identical flag") {
  // constant residual 0.1 -> MSE 0.01 -> 20 dB
  auto a = make_cube(4, 4, 2, std::vector<float>(32, 0.6f));
  auto b = make_cube(4, 4, 2, std::vector<float>(32, 0.5f));
  auto r = metrics::psnr(a, b, 1.0);
  CHECK(!r.identical);
  CHECK(r.db == doctest::Approx(20.0).epsilon(1e-6));

  auto same = metrics::psnr(a, a);
  CHECK(same.identical);
  CHECK(std::isinf(same.db));
}

TEST_CASE("psnr matches the scalar reference loop") {
  Pcg32 rng(70);
  auto a = random_cube(9, 7, 3, rng);
  auto b = random_cube(9, 7, 3, rng);
  auto r = metrics::psnr(a, b, 1.0);
  CHECK(std::fabs(r.db - oracles::naive_psnr(view(a), view(b), 1.0)) <= 1e-9);
  CHECK_THROWS_AS(metrics::psnr(a, random_cube(9, 7, 2, rng)), hdmba::ShapeError);
}

TEST_CASE("ssim is exactly one on identical cubes") {
  Pcg32 rng(71);
  auto a = random_cube(14, 13, 2, rng);
  CHECK(metrics::ssim(a, a).mean == 1.0);
}

TEST_CASE("ssim matches the naive windowed oracle on random pairs") {
  Pcg32 rng(72);
  auto a = random_cube(16, 16, 4, rng);
  auto b = random_cube(16, 16, 4, rng);
  CHECK(std::fabs(metrics::ssim(a, b).mean - oracles::naive_ssim(view(a), view(b))) <= 1e-9);
}

TEST_CASE("inverted binary image drives ssim negative") {
  Pcg32 rng(73);
  std::vector<float> av(16 * 16);
  for (auto& v : av) v = rng.below(2) ? 1.0f : 0.0f;
  std::vector<float> bv(av.size());
  for (size_t i = 0; i < av.size(); ++i) bv[i] = 1.0f - av[i];
  auto a = make_cube(16, 16, 1, std::move(av));
  auto b = make_cube(16, 16, 1, std::move(bv));
  const double s = metrics::ssim(a, b).mean;
  CHECK(s < 0.0);
  CHECK(std::fabs(s - oracles::naive_ssim(view(a), view(b))) <= 1e-9);
}

TEST_CASE("constant versus shifted constant reduces to the luminance term") {
  const double c_val = 0.4, delta = 0.2;
  auto a = make_cube(12, 12, 1, std::vector<float>(144, float(c_val)));
  auto b = make_cube(12, 12, 1, std::vector<float>(144, float(c_val + delta)));
  const double m1 = double(a.data[0]), m2 = double(b.data[0]);
  const double c1 = 0.01 * 0.01;
  const double expect = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
  CHECK(metrics::ssim(a, b).mean == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("ssim rejects images smaller than the window") {
  Pcg32 rng(74);
  auto a = random_cube(8, 8, 1, rng);
  CHECK_THROWS_AS(metrics::ssim(a, a), hdmba::ValueError);
}

TEST_CASE("uqi identities and the anticorrelated checkerboard") {
  Pcg32 rng(75);
  auto a = random_cube(12, 12, 2, rng);
  CHECK(metrics::uqi(a, a) == 1.0);

  // zero-mean checkerboard blocks, b = -a -> perfect anticorrelation
  std::vector<float> av(16 * 16), bv(16 * 16);
  for (int64_t y = 0; y < 16; ++y)
    for (int64_t x = 0; x < 16; ++x) {
      av[y * 16 + x] = ((x + y) % 2 ? 0.3f : -0.3f);
      bv[y * 16 + x] = -av[y * 16 + x];
    }
  auto pa = make_cube(16, 16, 1, std::move(av));
  auto pb = make_cube(16, 16, 1, std::move(bv));
  CHECK(metrics::uqi(pa, pb) == -1.0);
}

TEST_CASE("uqi matches the naive block oracle and rejects constant imagery") {
  Pcg32 rng(76);
  auto a = random_cube(16, 16, 4, rng);
  auto b = random_cube(16, 16, 4, rng);
  CHECK(std::fabs(metrics::uqi(a, b) - oracles::naive_uqi(view(a), view(b))) <= 1e-9);

  auto flat1 = make_cube(10, 10, 1, std::vector<float>(100, 0.5f));
  auto flat2 = make_cube(10, 10, 1, std::vector<float>(100, 0.7f));
  CHECK_THROWS_AS(metrics::uqi(flat1, flat2), hdmba::ValueError);
}

TEST_CASE("sam identities, orthogonality, and scale behavior") {
  Pcg32 rng(77);
  auto a = random_cube(6, 6, 4, rng, 0.1f, 1.0f);
  CHECK(metrics::sam(a, a) == 0.0);

  // per-pixel spectra (1,0) vs (0,1) -> pi/2
  std::vector<float> e1(2 * 9, 0.0f), e2(2 * 9, 0.0f);
  for (int p = 0; p < 9; ++p) {
    e1[0 * 9 + p] = 1.0f;  // band 0
    e2[1 * 9 + p] = 1.0f;  // band 1
  }
  auto ca = make_cube(3, 3, 2, std::move(e1));
  auto cb = make_cube(3, 3, 2, std::move(e2));
  CHECK(metrics::sam(ca, cb) == doctest::Approx(std::acos(0.0)).epsilon(1e-12));

  // power-of-two scaling is exact in float, so the angle is exactly zero
  auto doubled = a;
  for (auto& v : doubled.data) v *= 2.0f;
  CHECK(metrics::sam(a, doubled) == 0.0);

  // 2.5x rounds the float payload, leaving only quantization-level angle
  auto scaled = a;
  for (auto& v : scaled.data) v = static_cast<float>(2.5 * double(v));
  CHECK(metrics::sam(a, scaled) < 1e-6);
  CHECK(metrics::sam(scaled, a) == metrics::sam(a, scaled));

  CHECK(std::fabs(metrics::sam(a, random_cube(6, 6, 4, rng)) -
                  oracles::naive_sam(view(a), view(random_cube(6, 6, 4, rng)))) < 1.0);
}

TEST_CASE("sam matches the naive oracle on random pairs") {
  Pcg32 rng(78);
  auto a = random_cube(8, 8, 5, rng, 0.05f, 1.0f);
  auto b = random_cube(8, 8, 5, rng, 0.05f, 1.0f);
  CHECK(std::fabs(metrics::sam(a, b) - oracles::naive_sam(view(a), view(b))) <= 1e-9);
}

TEST_CASE("average gradient spot values") {
  auto flat = make_cube(6, 6, 2, std::vector<float>(72, 0.3f));
  CHECK(metrics::avg_gradient(flat) == 0.0);

  // horizontal unit-slope ramp -> sqrt(1/2)
  std::vector<float> ramp(8 * 8);
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) ramp[y * 8 + x] = float(x);
  auto r = make_cube(8, 8, 1, std::move(ramp));
  CHECK(metrics::avg_gradient(r) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));

  Pcg32 rng(79);
  auto a = random_cube(9, 9, 3, rng);
  CHECK(std::fabs(metrics::avg_gradient(a) - oracles::naive_avg_gradient(view(a))) <= 1e-12);
}

TEST_CASE("paired metrics are symmetric") {
  Pcg32 rng(80);
  auto a = random_cube(16, 16, 3, rng);
  auto b = random_cube(16, 16, 3, rng);
  CHECK(metrics::ssim(a, b).mean == metrics::ssim(b, a).mean);
  CHECK(metrics::uqi(a, b) == metrics::uqi(b, a));
  CHECK(metrics::sam(a, b) == metrics::sam(b, a));
  CHECK(metrics::psnr(a, b).db == metrics::psnr(b, a).db);
}

TEST_CASE("report scalars respect their ranges") {
  Pcg32 rng(81);
  auto a = random_cube(16, 16, 3, rng);
  auto b = random_cube(16, 16, 3, rng);
  auto rep = metrics::evaluate_pair(a, b);
  CHECK(rep.ssim >= -1.0);
  CHECK(rep.ssim <= 1.0);
  CHECK(rep.uqi >= -1.0);
  CHECK(rep.uqi <= 1.0);
  CHECK(rep.sam_rad >= 0.0);
  CHECK(rep.sam_rad <= std::acos(-1.0));
  CHECK(rep.ag_result >= 0.0);
  auto j = metrics::report_to_json(rep);
  CHECK(j.contains("ssim"));
  CHECK(j["config"]["ssim_window"] == 11);
}

TEST_CASE("bandwise curves localize damage to the corrupted band") {
  Pcg32 rng(82);
  auto a = random_cube(16, 16, 4, rng);
  auto same = metrics::bandwise_curves(a, a);
  for (const auto& row : same) {
    CHECK(row.ssim == 1.0);
    CHECK(row.psnr_identical);
  }

  auto b = a;
  const int64_t bad = 2;
  for (int64_t p = 0; p < 16 * 16; ++p) {
    float& v = b.data[bad * 16 * 16 + p];
    v = 1.0f - v;
  }
  auto rows = metrics::bandwise_curves(a, b);
  for (int64_t band = 0; band < 4; ++band) {
    if (band == bad) {
      CHECK(rows[band].ssim < 0.9);
      CHECK(!rows[band].psnr_identical);
    } else {
      CHECK(rows[band].ssim == 1.0);
      CHECK(rows[band].psnr_identical);
    }
  }

  // rows agree with recomputing each band as a standalone single-band cube
  Pcg32 rng2(83);
  auto c = random_cube(16, 16, 4, rng2);
  auto full = metrics::bandwise_curves(a, c);
  for (int64_t band = 0; band < 4; ++band) {
    HsiCube sa = make_cube(16, 16, 1,
                           std::vector<float>(a.data.begin() + band * 256,
                                              a.data.begin() + (band + 1) * 256));
    HsiCube sc = make_cube(16, 16, 1,
                           std::vector<float>(c.data.begin() + band * 256,
                                              c.data.begin() + (band + 1) * 256));
    CHECK(std::fabs(full[band].ssim - metrics::ssim(sa, sc).mean) <= 1e-12);
    CHECK(std::fabs(full[band].psnr_db - metrics::psnr(sa, sc).db) <= 1e-9);
  }
}

TEST_CASE("spectrum extraction follows the BSQ layout and survives file I/O") {
  auto flat = make_cube(5, 4, 3, std::vector<float>(60, 0.25f));
  auto rows = metrics::extract_spectrum(flat, 2, 1);
  for (const auto& [wl, v] : rows) CHECK(v == 0.25);

  Pcg32 rng(84);
  auto cube = random_cube(5, 4, 3, rng);
  auto corner = metrics::extract_spectrum(cube, 0, 0);
  for (int64_t b = 0; b < 3; ++b) {
    CHECK(corner[b].second == double(cube.data[b * 5 * 4]));  // first pixel of each plane
    CHECK(corner[b].first == cube.wavelengths_nm[b]);
  }
  CHECK_THROWS_AS(metrics::extract_spectrum(cube, 5, 0), hdmba::ValueError);
  CHECK_THROWS_AS(metrics::extract_spectrum(cube, 0, -1), hdmba::ValueError);

  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "hdmba_spec_test";
  fs::create_directories(dir);
  const auto path = (dir / "s.hsc").string();
  hsc::write_hsc(path, cube);
  auto back = hsc::read_hsc(path);
  auto sp1 = metrics::extract_spectrum(cube, 3, 2);
  auto sp2 = metrics::extract_spectrum(back, 3, 2);
  CHECK(sp1 == sp2);
  fs::remove_all(dir);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hdmba/wssm.hpp"
#include "oracles.hpp"

using hdmba::Pcg32;
using hdmba::Shape;
using hdmba::Tensor;
using D = Tensor<double>;
namespace wssm = hdmba::wssm;

namespace {

wssm::MambaBlockParams<double> make_block(int64_t c, Pcg32& rng, bool use_ssm = true,
                                          bool use_dconv = true, bool use_gate = true) {
  wssm::MambaBlockConfig cfg;
  cfg.channels = c;
  cfg.expansion = 2;
  cfg.ssm.state_size = 4;
  cfg.use_ssm = use_ssm;
  cfg.use_dconv = use_dconv;
  cfg.use_gate = use_gate;
  return wssm::init_mamba_block<double>(cfg, rng);
}

}  // namespace

TEST_CASE("partition of the 4x4 counting image at M=2") {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  D z(Shape{4, 4, 1}, std::move(v));
  auto batch = wssm::window_partition(z, 2);
  CHECK(batch.windows.shape() == Shape{4, 4, 1});
  CHECK(batch.windows.values() ==
        std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
}

TEST_CASE("64x64 at M=8 yields 64 windows of 64 tokens") {
  auto batch = wssm::window_partition(D::zeros(Shape{64, 64, 2}), 8);
  CHECK(batch.windows.shape() == Shape{64, 64, 2});
  CHECK(batch.grid_h == 8);
  CHECK(batch.grid_w == 8);
}

TEST_CASE("W=H=M gives a single window equal to the row-major flatten") {
  Pcg32 rng(41);
  auto v = oracles::random_vec(rng, 3 * 3 * 2);
  D z(Shape{3, 3, 2}, std::vector<double>(v));
  auto batch = wssm::window_partition(z, 3);
  CHECK(batch.windows.shape() == Shape{1, 9, 2});
  CHECK(batch.windows.values() == v);
}

TEST_CASE("partition and reverse round-trip bitwise") {
  Pcg32 rng(42);
  auto v = oracles::random_vec(rng, 16 * 16 * 3);
  D z(Shape{16, 16, 3}, std::vector<double>(v));
  auto back = wssm::window_reverse(wssm::window_partition(z, 4));
  CHECK(back.values() == v);
}

TEST_CASE("round-trip through the reflect-pad path restores the original region") {
  Pcg32 rng(43);
  auto v = oracles::random_vec(rng, 5 * 5 * 1);
  D z(Shape{5, 5, 1}, std::vector<double>(v));
  auto batch = wssm::window_partition(z, 4);
  CHECK(batch.padded_h == 8);
  CHECK(batch.windows.shape() == Shape{4, 16, 1});
  auto back = wssm::window_reverse(batch);
  CHECK(back.shape() == Shape{5, 5, 1});
  CHECK(back.values() == v);
}

TEST_CASE("round-trip property grid") {
  Pcg32 rng(44);
  for (int64_t m : {1, 2, 4, 8, 16}) {
    for (int64_t h : {m, 2 * m, 3 * m, int64_t(5)}) {
      for (int64_t w : {m, 2 * m, 3 * m, int64_t(5)}) {
        auto v = oracles::random_vec(rng, h * w * 2);
        D z(Shape{h, w, 2}, std::vector<double>(v));
        auto back = wssm::window_reverse(wssm::window_partition(z, m));
        INFO("m=" << m << " h=" << h << " w=" << w);
        REQUIRE(back.shape() == z.shape());
        CHECK(back.values() == v);
      }
    }
  }
}

TEST_CASE("window_reverse rejects inconsistent metadata") {
  auto batch = wssm::window_partition(D::zeros(Shape{8, 8, 1}), 4);
  batch.grid_w = 3;
  CHECK_THROWS_AS(wssm::window_reverse(batch), hdmba::ShapeError);
}

TEST_CASE("mamba block maps zero to zero") {
  Pcg32 rng(45);
  auto p = make_block(4, rng);
  auto y = wssm::mamba_block(D::zeros(Shape{9, 4}), p);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("mamba block equals the hand-composed pipeline") {
  Pcg32 rng(46);
  auto p = make_block(3, rng);
  const int64_t l = 8, ci = p.config.inner();
  D z(Shape{l, 3}, oracles::random_vec(rng, l * 3));
  auto y = wssm::mamba_block(z, p);

  auto zn = hdmba::rms_norm(z, p.rms_gain, 1e-6);
  auto proj = hdmba::matmul(zn, p.in_proj_weight);
  auto main = hdmba::slice(proj, {0, 0}, {l, ci});
  main = hdmba::depthwise_conv1d(main, p.dconv_weight, p.dconv_bias);
  main = hdmba::silu(main);
  main = hdmba::ssm::selective_scan(main, p.ssm);
  auto gate = hdmba::silu(hdmba::slice(proj, {0, ci}, {l, ci}));
  auto expect = hdmba::matmul(hdmba::mul(main, gate), p.out_proj_weight);
  CHECK(y.values() == expect.values());
}

TEST_CASE("ablation variants run and drop the corresponding stage") {
  Pcg32 rng(47);
  const int64_t l = 6;
  D z(Shape{l, 4}, oracles::random_vec(rng, l * 4));

  auto no_ssm = make_block(4, rng, false, true, true);
  auto y1 = wssm::mamba_block(z, no_ssm);
  CHECK(y1.shape() == Shape{l, 4});

  auto no_dconv = make_block(4, rng, true, false, true);
  CHECK(wssm::mamba_block(z, no_dconv).shape() == Shape{l, 4});

  auto no_gate = make_block(4, rng, true, true, false);
  CHECK(no_gate.in_proj_weight.shape() == Shape{4, 8});
  CHECK(wssm::mamba_block(z, no_gate).shape() == Shape{l, 4});
}

TEST_CASE("channel mismatch is rejected") {
  Pcg32 rng(48);
  auto p = make_block(4, rng);
  CHECK_THROWS_AS(wssm::mamba_block(D::zeros(Shape{5, 3}), p), hdmba::ShapeError);
}

TEST_CASE("wssm forward maps zero map to zero map") {
  Pcg32 rng(49);
  auto p = make_block(3, rng);
  auto y = wssm::wssm_forward(D::zeros(Shape{8, 8, 3}), p, 4);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("identical windows produce identical output windows") {
  Pcg32 rng(50);
  auto p = make_block(2, rng);
  auto tile = oracles::random_vec(rng, 4 * 4 * 2);
  // 8x8 image built from the same 4x4 tile four times
  std::vector<double> img(8 * 8 * 2);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      for (int ch = 0; ch < 2; ++ch)
        img[(r * 8 + c) * 2 + ch] = tile[((r % 4) * 4 + (c % 4)) * 2 + ch];
  D z(Shape{8, 8, 2}, std::move(img));
  auto batch = wssm::window_partition(z, 4);
  auto y = wssm::wssm_forward(z, p, 4);
  auto out_batch = wssm::window_partition(y, 4);
  const auto& w = out_batch.windows.values();
  const size_t chunk = 4 * 4 * 2;
  for (size_t i = 0; i < chunk; ++i) {
    CHECK(w[i] == w[chunk + i]);
    CHECK(w[i] == w[2 * chunk + i]);
    CHECK(w[i] == w[3 * chunk + i]);
  }
  (void)batch;
}

TEST_CASE("M covering the image equals one global block on the flatten") {
  Pcg32 rng(51);
  auto p = make_block(2, rng);
  D z(Shape{3, 5, 2}, oracles::random_vec(rng, 3 * 5 * 2));
  auto y = wssm::wssm_forward(z, p, 8);
  auto flat = hdmba::reshape(z, Shape{15, 2});
  auto expect = hdmba::reshape(wssm::mamba_block(flat, p), Shape{3, 5, 2});
  CHECK(y.values() == expect.values());
}

TEST_CASE("window locality: editing one window only changes that output window") {
  Pcg32 rng(52);
  auto p = make_block(2, rng);
  auto v = oracles::random_vec(rng, 8 * 8 * 2);
  D z(Shape{8, 8, 2}, std::vector<double>(v));
  auto y0 = wssm::window_partition(wssm::wssm_forward(z, p, 4), 4).windows.values();
  auto v2 = v;
  v2[(5 * 8 + 6) * 2 + 1] += 0.7;  // inside window (1,1)
  D z2(Shape{8, 8, 2}, std::vector<double>(v2));
  auto y1 = wssm::window_partition(wssm::wssm_forward(z2, p, 4), 4).windows.values();
  const size_t chunk = 4 * 4 * 2;
  for (int w = 0; w < 4; ++w) {
    bool same = true;
    for (size_t i = 0; i < chunk; ++i) same &= (y0[w * chunk + i] == y1[w * chunk + i]);
    if (w == 3)
      CHECK(!same);
    else
      CHECK(same);
  }
}

TEST_CASE("rms_norm is invariant to positive rescaling at eps zero") {
  Pcg32 rng(53);
  auto v = oracles::random_vec(rng, 6);
  D x(Shape{2, 3}, std::vector<double>(v));
  D g = D::full(Shape{3}, 1.0);
  auto base = hdmba::rms_norm(x, g, 0.0).values();
  for (double c : {0.25, 3.0, 117.0}) {
    auto scaled = v;
    for (auto& q : scaled) q *= c;
    D xs(Shape{2, 3}, std::vector<double>(scaled));
    auto got = hdmba::rms_norm(xs, g, 0.0).values();
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(base[i]).epsilon(1e-12));
  }
}

TEST_CASE("full wssm gradient matches finite differences") {
  Pcg32 rng(54);
  auto p = make_block(2, rng);
  D z(Shape{4, 4, 2}, oracles::random_vec(rng, 4 * 4 * 2));
  z.set_requires_grad();

  Pcg32 prng(102);
  auto probe = oracles::random_vec(prng, 4 * 4 * 2);
  D probe_t(Shape{4, 4, 2}, std::vector<double>(probe));
  auto forward = [&]() { return hdmba::sum(hdmba::mul(wssm::wssm_forward(z, p, 2), probe_t)); };
  auto loss = forward();
  loss.backward();
  auto loss_val = [&]() { return forward().item(); };

  std::vector<std::pair<const char*, D*>> leaves = {
      {"z", &z},
      {"rms_gain", &p.rms_gain},
      {"in_proj", &p.in_proj_weight},
      {"dconv_w", &p.dconv_weight},
      {"dconv_b", &p.dconv_bias},
      {"out_proj", &p.out_proj_weight},
      {"a_log", &p.ssm.a_log},
      {"skip", &p.ssm.skip_gain},
      {"x_proj", &p.ssm.x_proj_weight},
      {"dt_w", &p.ssm.dt_proj_weight},
      {"dt_b", &p.ssm.dt_proj_bias},
  };
  for (auto& [name, t] : leaves) {
    auto rep = oracles::fd_check(loss_val, *t, t->grad());
    INFO(name << ": worst rel " << rep.max_rel);
    CHECK(rep.max_rel < 1e-4);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hdmba/ops.hpp"
#include "hdmba/rng.hpp"
#include "hdmba/tensor.hpp"
#include "oracles.hpp"

using hdmba::Pcg32;
using hdmba::Shape;
using hdmba::Tensor;
using D = Tensor<double>;

namespace {

D leaf(Shape shape, std::vector<double> v) {
  D t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

D random_leaf(Shape shape, Pcg32& rng, double lo = -1.0, double hi = 1.0) {
  return leaf(std::move(shape),
              oracles::random_vec(rng, static_cast<size_t>(hdmba::numel_of(shape)), lo, hi));
}

// Scalar probe loss: sum(out * probe) with a fixed random probe, so every
// output element influences the loss with a distinct weight.
double probe_loss_value(const D& out, const std::vector<double>& probe) {
  double acc = 0.0;
  for (size_t i = 0; i < out.values().size(); ++i) acc += out.values()[i] * probe[i];
  return acc;
}

template <typename OpFn>
void gradcheck_op(const char* what, OpFn&& op, std::vector<D> leaves, double tol = 1e-6) {
  Pcg32 rng(99);
  D out0 = op();
  std::vector<double> probe = oracles::random_vec(rng, out0.values().size(), -1.0, 1.0);
  D probe_t(out0.shape(), std::vector<double>(probe));
  for (auto& lf : leaves) lf.zero_grad();
  D loss = hdmba::sum(hdmba::mul(op(), probe_t));
  loss.backward();
  auto loss_fn = [&]() {
    return probe_loss_value(op(), probe);
  };
  for (auto& lf : leaves) {
    auto rep = oracles::fd_check(loss_fn, lf, lf.grad());
    INFO(what << ": worst rel err " << rep.max_rel << " at #" << rep.worst << " analytic "
              << rep.analytic_at_worst << " numeric " << rep.numeric_at_worst);
    CHECK(rep.max_rel < tol);
  }
}

}  // namespace

TEST_CASE("silu spot values") {
  D x(Shape{3}, {0.0, 1.0, -2.0});
  auto y = hdmba::silu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(oracles::ref_silu(1.0)).epsilon(1e-14));
  CHECK(y.values()[2] == doctest::Approx(oracles::ref_silu(-2.0)).epsilon(1e-14));
}

TEST_CASE("matmul maps identity exactly") {
  Pcg32 rng(1);
  auto a = oracles::random_vec(rng, 12);
  D eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  D m(Shape{3, 4}, std::vector<double>(a));
  auto y = hdmba::matmul(eye, m);
  CHECK(y.shape() == Shape{3, 4});
  for (size_t i = 0; i < a.size(); ++i) CHECK(y.values()[i] == a[i]);
}

TEST_CASE("shape errors name the op and shapes") {
  D a(Shape{2, 3}, std::vector<double>(6, 1.0));
  D b(Shape{2}, {1.0, 2.0});
  CHECK_THROWS_WITH_AS(hdmba::add(a, b),
                       "add: shapes [2, 3] and [2] are not broadcast-compatible",
                       hdmba::ShapeError);
  CHECK_THROWS_AS(hdmba::matmul(a, a), hdmba::ShapeError);
  CHECK_THROWS_AS(hdmba::reshape(a, Shape{4}), hdmba::ShapeError);
}

TEST_CASE("broadcast add follows trailing-axis alignment") {
  D a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  D b(Shape{3}, {10, 20, 30});
  auto y = hdmba::add(a, b);
  CHECK(y.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  D s = D::scalar(100.0);
  auto z = hdmba::mul(a, hdmba::broadcast_to(s, Shape{2, 3}));
  CHECK(z.values()[5] == 600.0);
}

TEST_CASE("backward of sum of squares") {
  auto x = leaf(Shape{2}, {1.0, 2.0});
  auto loss = hdmba::sum(hdmba::mul(x, x));
  loss.backward();
  CHECK(x.grad() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward of mean") {
  auto x = leaf(Shape{4}, {1.0, 2.0, 3.0, 4.0});
  auto loss = hdmba::mean(x);
  loss.backward();
  CHECK(x.grad() == std::vector<double>(4, 0.25));
}

TEST_CASE("fan-out accumulates both contributions") {
  auto x = leaf(Shape{3}, {1.0, -2.0, 0.5});
  D a(Shape{3}, {2.0, 3.0, 4.0});
  D b(Shape{3}, {-1.0, 5.0, 0.25});
  auto loss = hdmba::add(hdmba::sum(hdmba::mul(x, a)), hdmba::sum(hdmba::mul(x, b)));
  loss.backward();
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == doctest::Approx(a.values()[i] + b.values()[i]).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar and a grad path") {
  auto x = leaf(Shape{2}, {1.0, 2.0});
  auto y = hdmba::mul(x, x);
  CHECK_THROWS_AS(y.backward(), hdmba::ShapeError);
  D c(Shape{2}, {1.0, 2.0});
  auto z = hdmba::sum(c);
  CHECK_THROWS_AS(z.backward(), hdmba::ValueError);
}

TEST_CASE("non-leaf tensors reject mutation and requires_grad toggles") {
  auto x = leaf(Shape{2}, {1.0, 2.0});
  auto y = hdmba::mul(x, x);
  CHECK_THROWS_AS(y.mutable_values(), hdmba::ValueError);
  CHECK_THROWS_AS(y.set_requires_grad(true), hdmba::ValueError);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  auto x = leaf(Shape{2}, {1.0, 2.0});
  hdmba::NoGradGuard ng;
  auto y = hdmba::sum(hdmba::mul(x, x));
  CHECK(!y.requires_grad());
}

TEST_CASE("three-layer composite matches finite differences") {
  Pcg32 rng(7);
  auto x = random_leaf(Shape{2, 3}, rng);
  auto w1 = random_leaf(Shape{3, 4}, rng);
  auto w2 = random_leaf(Shape{4, 2}, rng);
  auto forward = [&]() {
    auto h1 = hdmba::silu(hdmba::matmul(x, w1));
    auto h2 = hdmba::gelu(hdmba::matmul(h1, w2));
    return hdmba::mean(hdmba::mul(h2, h2));
  };
  auto loss = forward();
  loss.backward();
  auto loss_val = [&]() { return forward().item(); };
  for (auto* t : {&x, &w1, &w2}) {
    auto rep = oracles::fd_check(loss_val, *t, t->grad());
    CHECK(rep.max_rel < 1e-6);
  }
}

TEST_CASE("per-primitive gradients match finite differences") {
  Pcg32 rng(11);

  SUBCASE("add broadcast") {
    auto a = random_leaf(Shape{2, 3}, rng);
    auto b = random_leaf(Shape{3}, rng);
    gradcheck_op("add", [&] { return hdmba::add(a, b); }, {a, b});
  }
  SUBCASE("sub") {
    auto a = random_leaf(Shape{4}, rng);
    auto b = random_leaf(Shape{4}, rng);
    gradcheck_op("sub", [&] { return hdmba::sub(a, b); }, {a, b});
  }
  SUBCASE("mul broadcast") {
    auto a = random_leaf(Shape{2, 1, 3}, rng);
    auto b = random_leaf(Shape{4, 1}, rng);
    gradcheck_op("mul", [&] { return hdmba::mul(a, b); }, {a, b});
  }
  SUBCASE("scale") {
    auto a = random_leaf(Shape{5}, rng);
    gradcheck_op("scale", [&] { return hdmba::scale(a, -2.5); }, {a});
  }
  SUBCASE("exp") {
    auto a = random_leaf(Shape{6}, rng);
    gradcheck_op("exp", [&] { return hdmba::exp(a); }, {a});
  }
  SUBCASE("log") {
    auto a = random_leaf(Shape{6}, rng, 0.5, 2.0);
    gradcheck_op("log", [&] { return hdmba::log(a); }, {a});
  }
  SUBCASE("reciprocal") {
    auto a = random_leaf(Shape{6}, rng, 0.6, 2.0);
    gradcheck_op("reciprocal", [&] { return hdmba::reciprocal(a); }, {a});
  }
  SUBCASE("sigmoid silu gelu softplus") {
    auto a = random_leaf(Shape{8}, rng, -2.0, 2.0);
    gradcheck_op("sigmoid", [&] { return hdmba::sigmoid(a); }, {a});
    gradcheck_op("silu", [&] { return hdmba::silu(a); }, {a});
    gradcheck_op("gelu", [&] { return hdmba::gelu(a); }, {a});
    gradcheck_op("softplus", [&] { return hdmba::softplus(a); }, {a});
  }
  SUBCASE("abs away from zero") {
    auto a = random_leaf(Shape{6}, rng, 0.5, 1.5);
    auto b = random_leaf(Shape{6}, rng, -1.5, -0.5);
    gradcheck_op("abs+", [&] { return hdmba::abs(a); }, {a});
    gradcheck_op("abs-", [&] { return hdmba::abs(b); }, {b});
    // pinned subgradient at the kink
    auto z = leaf(Shape{1}, {0.0});
    auto l = hdmba::sum(hdmba::abs(z));
    l.backward();
    CHECK(z.grad()[0] == 0.0);
  }
  SUBCASE("reductions") {
    auto a = random_leaf(Shape{3, 4}, rng);
    gradcheck_op("sum", [&] { return hdmba::sum(a); }, {a});
    gradcheck_op("mean", [&] { return hdmba::mean(a); }, {a});
  }
  SUBCASE("reshape transpose flip") {
    auto a = random_leaf(Shape{2, 3, 4}, rng);
    gradcheck_op("reshape", [&] { return hdmba::reshape(a, Shape{6, 4}); }, {a});
    gradcheck_op("transpose", [&] { return hdmba::transpose(a, {2, 0, 1}); }, {a});
    gradcheck_op("flip", [&] { return hdmba::flip(a, 1); }, {a});
  }
  SUBCASE("slice pad") {
    auto a = random_leaf(Shape{4, 5}, rng);
    gradcheck_op("slice", [&] { return hdmba::slice(a, {1, 2}, {2, 3}); }, {a});
    gradcheck_op("pad zero",
                 [&] { return hdmba::pad(a, {{1, 2}, {0, 1}}, hdmba::PadMode::Zero); }, {a});
    gradcheck_op("pad reflect",
                 [&] { return hdmba::pad(a, {{2, 3}, {1, 4}}, hdmba::PadMode::Reflect); }, {a});
  }
  SUBCASE("broadcast_to stack concat") {
    auto a = random_leaf(Shape{1, 3}, rng);
    gradcheck_op("broadcast_to", [&] { return hdmba::broadcast_to(a, Shape{4, 3}); }, {a});
    auto b = random_leaf(Shape{1, 3}, rng);
    gradcheck_op("stack0", [&] { return hdmba::stack0<double>({a, b, a}); }, {a, b});
    auto c = random_leaf(Shape{1, 2}, rng);
    gradcheck_op("concat_last", [&] { return hdmba::concat_last(a, c); }, {a, c});
  }
  SUBCASE("matmul") {
    auto a = random_leaf(Shape{3, 4}, rng);
    auto b = random_leaf(Shape{4, 2}, rng);
    gradcheck_op("matmul", [&] { return hdmba::matmul(a, b); }, {a, b});
  }
  SUBCASE("conv2d") {
    auto x = random_leaf(Shape{4, 5, 3}, rng);
    auto w = random_leaf(Shape{3, 3, 3, 2}, rng, -0.5, 0.5);
    auto b = random_leaf(Shape{2}, rng);
    gradcheck_op("conv2d", [&] { return hdmba::conv2d_same(x, w, b); }, {x, w, b});
    gradcheck_op("conv2d nobias", [&] { return hdmba::conv2d_same(x, w); }, {x, w});
  }
  SUBCASE("depthwise conv") {
    auto x = random_leaf(Shape{6, 3}, rng);
    auto w = random_leaf(Shape{4, 3}, rng, -0.5, 0.5);
    auto b = random_leaf(Shape{3}, rng);
    gradcheck_op("dconv", [&] { return hdmba::depthwise_conv1d(x, w, b); }, {x, w, b});
  }
  SUBCASE("layer_norm") {
    auto x = random_leaf(Shape{3, 5}, rng);
    auto g = random_leaf(Shape{5}, rng, 0.5, 1.5);
    auto b = random_leaf(Shape{5}, rng);
    gradcheck_op("layer_norm", [&] { return hdmba::layer_norm(x, g, b); }, {x, g, b}, 2e-6);
  }
  SUBCASE("rms_norm") {
    auto x = random_leaf(Shape{3, 5}, rng);
    auto g = random_leaf(Shape{5}, rng, 0.5, 1.5);
    gradcheck_op("rms_norm", [&] { return hdmba::rms_norm(x, g); }, {x, g}, 2e-6);
  }
}

TEST_CASE("add and mul commute, matmul associates") {
  Pcg32 rng(3);
  D a(Shape{3, 3}, oracles::random_vec(rng, 9));
  D b(Shape{3, 3}, oracles::random_vec(rng, 9));
  D c(Shape{3, 3}, oracles::random_vec(rng, 9));
  auto ab = hdmba::add(a, b).values();
  auto ba = hdmba::add(b, a).values();
  auto mab = hdmba::mul(a, b).values();
  auto mba = hdmba::mul(b, a).values();
  for (size_t i = 0; i < 9; ++i) {
    CHECK(std::fabs(ab[i] - ba[i]) <= 1e-12);
    CHECK(std::fabs(mab[i] - mba[i]) <= 1e-12);
  }
  auto left = hdmba::matmul(hdmba::matmul(a, b), c).values();
  auto right = hdmba::matmul(a, hdmba::matmul(b, c)).values();
  for (size_t i = 0; i < 9; ++i) CHECK(std::fabs(left[i] - right[i]) <= 1e-12);
}

TEST_CASE("conv2d matches the naive loop") {
  Pcg32 rng(5);
  auto xv = oracles::random_vec(rng, 5 * 6 * 3);
  auto wv = oracles::random_vec(rng, 3 * 3 * 3 * 4);
  auto bv = oracles::random_vec(rng, 4);
  D x(Shape{5, 6, 3}, std::vector<double>(xv));
  D w(Shape{3, 3, 3, 4}, std::vector<double>(wv));
  D b(Shape{4}, std::vector<double>(bv));
  auto y = hdmba::conv2d_same(x, w, b);
  auto ref = oracles::naive_conv2d_same(xv, 5, 6, 3, wv, 3, 3, 4, &bv);
  REQUIRE(y.values().size() == ref.size());
  for (size_t i = 0; i < ref.size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("depthwise conv matches the naive loop and is causal") {
  Pcg32 rng(6);
  auto xv = oracles::random_vec(rng, 7 * 2);
  auto wv = oracles::random_vec(rng, 4 * 2);
  D x(Shape{7, 2}, std::vector<double>(xv));
  D w(Shape{4, 2}, std::vector<double>(wv));
  auto y = hdmba::depthwise_conv1d(x, w);
  auto ref = oracles::naive_dconv1d_causal(xv, 7, 2, wv, 4, nullptr);
  for (size_t i = 0; i < ref.size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // causality: perturbing x at t only changes outputs at >= t
  auto xv2 = xv;
  xv2[4 * 2 + 1] += 0.5;
  D x2(Shape{7, 2}, std::vector<double>(xv2));
  auto y2 = hdmba::depthwise_conv1d(x2, w);
  for (int64_t t = 0; t < 4; ++t)
    for (int64_t c = 0; c < 2; ++c) CHECK(y2.values()[t * 2 + c] == y.values()[t * 2 + c]);
}

TEST_CASE("reflect pad mirrors without repeating the edge") {
  D x(Shape{3}, {1.0, 2.0, 3.0});
  auto y = hdmba::pad(x, {{2, 2}}, hdmba::PadMode::Reflect);
  CHECK(y.values() == std::vector<double>{3, 2, 1, 2, 3, 2, 1});
  // pad wider than the extent folds repeatedly (period 2(n-1))
  auto z = hdmba::pad(x, {{5, 0}}, hdmba::PadMode::Reflect);
  CHECK(z.values() == std::vector<double>{2, 1, 2, 3, 2, 1, 2, 3});
}

TEST_CASE("zero pad then slice restores the input bitwise") {
  Pcg32 rng(8);
  auto xv = oracles::random_vec(rng, 4 * 3);
  D x(Shape{4, 3}, std::vector<double>(xv));
  auto p = hdmba::pad(x, {{2, 1}, {0, 3}}, hdmba::PadMode::Zero);
  auto back = hdmba::slice(p, {2, 0}, {4, 3});
  CHECK(back.values() == xv);
}

TEST_CASE("transpose twice is the identity") {
  Pcg32 rng(9);
  auto xv = oracles::random_vec(rng, 2 * 3 * 4);
  D x(Shape{2, 3, 4}, std::vector<double>(xv));
  auto t = hdmba::transpose(hdmba::transpose(x, {2, 0, 1}), {1, 2, 0});
  CHECK(t.values() == xv);
}

TEST_CASE("rms_norm spot values at eps zero") {
  D x(Shape{2}, {3.0, 4.0});
  D g(Shape{2}, {1.0, 1.0});
  auto y = hdmba::rms_norm(x, g, 0.0);
  CHECK(y.values()[0] == doctest::Approx(0.848528137423857).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(1.131370849898476).epsilon(1e-12));
}

TEST_CASE("layer_norm normalizes rows and applies affine") {
  D x(Shape{1, 4}, {1.0, 2.0, 3.0, 4.0});
  D g(Shape{4}, {1.0, 1.0, 1.0, 1.0});
  D b(Shape{4}, {0.0, 0.0, 0.0, 0.0});
  auto y = hdmba::layer_norm(x, g, b, 0.0);
  double m = 0.0, v = 0.0;
  for (double q : x.values()) m += q;
  m /= 4;
  for (double q : x.values()) v += (q - m) * (q - m);
  v /= 4;
  for (int i = 0; i < 4; ++i)
    CHECK(y.values()[i] == doctest::Approx((x.values()[i] - m) / std::sqrt(v)).epsilon(1e-12));
}

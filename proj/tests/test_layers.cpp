#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <marscf/layers.hpp>
#include <marscf/ops.hpp>
#include <marscf/random.hpp>

#include "oracles.hpp"

using namespace marscf;

namespace {

void perturb_params(auto& layer, Rng& rng, double stddev) {
  layer.visit_params("", [&](const std::string&, Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] += stddev * rng.normal();
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// log|det J| of x -> layer.forward(x).value by central differences
template <class Fwd>
double fd_logdet(Fwd fwd, const Tensor& x) {
  auto f = [&](const oracle::Vec& v) {
    NoGradScope ng;
    Tensor xx = Tensor::from(x.shape(), v);
    return fwd(xx).value.values();
  };
  return oracle::logabsdet(oracle::finite_diff_jacobian(f, x.values()));
}

}  // namespace

TEST_CASE("split: definition, concat round-trip, level-1 shapes") {
  Rng rng(1);
  Tensor h({2, 4, 3, 3});
  rng.fill_normal(h);
  auto [l, r] = split_channels(h);
  CHECK(l.shape() == Shape{2, 2, 3, 3});
  for (int b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 2 * 9; ++i)
      CHECK(l.data()[b * 2 * 9 + i] == h.data()[b * 4 * 9 + i]);
  Tensor back = concat_channels({l, r});
  CHECK(max_abs_diff(back, h) == 0.0);
  CHECK_THROWS(split_channels(Tensor({1, 3, 2, 2})));

  // squeezed 32x32 RGB: each half is [B,6,16,16]
  auto [l1, r1] = split_channels(squeeze2x2(Tensor({1, 3, 32, 32})));
  CHECK(l1.shape() == Shape{1, 6, 16, 16});
  CHECK(r1.shape() == Shape{1, 6, 16, 16});
}

TEST_CASE("actnorm: zero params is identity with zero logdet") {
  ActNorm an(2);
  an.mark_initialized();
  Rng rng(3);
  Tensor x({2, 2, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = an.forward(x);
  CHECK(max_abs_diff(y, x) == 0.0);
  CHECK(ld.data()[0] == 0.0);
}

TEST_CASE("actnorm: logscale ln2 doubles and logdet is 4 ln2") {
  ActNorm an(1);
  an.mark_initialized();
  an.logscale().data()[0] = std::log(2.0);
  an.bias().data()[0] = 0.5;
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto [y, ld] = an.forward(x);
  for (int i = 0; i < 4; ++i)
    CHECK(y.data()[i] == doctest::Approx(2.0 * (x.data()[i] + 0.5)));
  CHECK(ld.data()[0] == doctest::Approx(4.0 * std::log(2.0)));
}

TEST_CASE("actnorm: data-dependent init standardizes the init batch") {
  Rng rng(17);
  ActNorm an(2);
  Tensor x({8, 2, 4, 4});
  for (std::int64_t i = 0; i < x.size(); ++i) x.data()[i] = 5.0 + 2.0 * rng.normal();
  auto [y, ld] = an.forward(x, /*allow_init=*/true);
  (void)ld;
  CHECK(an.initialized());
  for (int c = 0; c < 2; ++c) {
    double s = 0.0, ss = 0.0;
    int n = 0;
    for (int b = 0; b < 8; ++b)
      for (int i = 0; i < 16; ++i) {
        const double v = y.data()[(b * 2 + c) * 16 + i];
        s += v;
        ss += v * v;
        ++n;
      }
    const double mean = s / n;
    const double var = ss / n - mean * mean;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);  // 1e-6 variance floor shifts std slightly
  }
}

TEST_CASE("actnorm: inverse before init rejected; forward without init mode rejected") {
  ActNorm an(1);
  Tensor x({1, 1, 2, 2});
  CHECK_THROWS(an.inverse(x));
  CHECK_THROWS(an.forward(x, /*allow_init=*/false));
}

TEST_CASE("actnorm: round-trip and finite-difference logdet") {
  Rng rng(5);
  ActNorm an(2);
  rng.fill_normal(an.logscale(), 0.3);
  rng.fill_normal(an.bias(), 0.5);
  an.mark_initialized();
  Tensor x({1, 2, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = an.forward(x);
  CHECK(max_abs_diff(an.inverse(y), x) < 1e-12);
  const double fd = fd_logdet([&](const Tensor& t) { return an.forward(t); }, x);
  CHECK(ld.data()[0] == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("invconv: explicit identity weight is the identity") {
  InvConv1x1 conv(std::vector<std::vector<double>>{{1, 0}, {0, 1}});
  Rng rng(2);
  Tensor x({2, 2, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = conv.forward(x);
  CHECK(max_abs_diff(y, x) < 1e-12);
  CHECK(std::abs(ld.data()[0]) < 1e-12);
}

TEST_CASE("invconv: diag(2,1) on 2x2 spatial has logdet 4 ln2") {
  InvConv1x1 conv(std::vector<std::vector<double>>{{2, 0}, {0, 1}});
  Tensor x({1, 2, 2, 2}, 1.0);
  auto [y, ld] = conv.forward(x);
  (void)y;
  CHECK(ld.data()[0] == doctest::Approx(4.0 * std::log(2.0)));
}

TEST_CASE("invconv: random orthogonal init round-trips and matches FD logdet") {
  Rng rng(11);
  InvConv1x1 conv(3, rng);
  Tensor x({1, 3, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = conv.forward(x);
  CHECK(max_abs_diff(conv.inverse(y), x) < 1e-6);
  const double fd = fd_logdet([&](const Tensor& t) { return conv.forward(t); }, x);
  CHECK(ld.data()[0] == doctest::Approx(fd).epsilon(1e-3).scale(1.0));
  // orthogonal init: |det| = 1, so logdet starts at 0
  CHECK(std::abs(ld.data()[0]) < 1e-9);
}

TEST_CASE("invconv: assembled weight matches the factors and gradients check out") {
  Rng rng(29);
  InvConv1x1 conv(4, rng);
  Tensor W = conv.weight_dense();
  // W should be orthogonal at init: W^T W = I
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double d = 0.0;
      for (int k = 0; k < 4; ++k) d += W.data()[k * 4 + i] * W.data()[k * 4 + j];
      CHECK(d == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
    }

  // gradient of a scalar loss through forward() w.r.t. the LU parameters
  Tensor x({1, 4, 2, 2});
  rng.fill_normal(x);
  std::vector<std::pair<std::string, Tensor>> params;
  conv.visit_params("iv", [&](const std::string& n, Tensor& t) {
    t.set_requires_grad(true);
    params.emplace_back(n, t);
  });
  TapeScope ts;
  auto [y, ld] = conv.forward(x);
  ts.tape.backward(add(sum(mul(y, y)), sum(ld)));
  for (auto& [name, t] : params) {
    auto f = [&](const oracle::Vec& v) {
      NoGradScope ng;
      std::vector<double> saved = t.values();
      std::copy(v.begin(), v.end(), t.data());
      auto [yy, ll] = conv.forward(x);
      double out = sum(mul(yy, yy)).item() + sum(ll).item();
      std::copy(saved.begin(), saved.end(), t.data());
      return out;
    };
    oracle::Vec fd = oracle::finite_diff_grad(f, t.values());
    for (std::int64_t i = 0; i < t.size(); ++i)
      CHECK(t.grad()[i] == doctest::Approx(fd[static_cast<size_t>(i)]).epsilon(1e-4));
    t.set_requires_grad(false);
  }
}

TEST_CASE("invconv: near-singular diagonal rejected") {
  InvConv1x1 conv(std::vector<std::vector<double>>{{1, 0}, {0, 1}});
  conv.visit_params("", [&](const std::string& n, Tensor& t) {
    if (n == ".logdiag") t.data()[0] = -40.0;  // exp(-40) < 1e-12
  });
  CHECK_THROWS(conv.forward(Tensor({1, 2, 2, 2})));
}

TEST_CASE("affine coupling: zero-initialized net is the identity") {
  Rng rng(7);
  Coupling c(CouplingKind::affine, 4, 8, rng);
  Tensor x({2, 4, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = c.forward(x);
  CHECK(max_abs_diff(y, x) == 0.0);
  CHECK(ld.data()[0] == 0.0);
  CHECK_THROWS(Coupling(CouplingKind::affine, 3, 8, rng));
}

TEST_CASE("affine coupling: forced s=ln3, t=1 maps x_b=2 to 7 with logdet ln3") {
  Rng rng(7);
  Coupling c(CouplingKind::affine, 2, 4, rng);
  // drive the net's final bias; all final weights are zero so the output is
  // constant: channel 0 -> raw scale, channel 1 -> shift
  const double s_pre = kScaleClamp * std::atanh(std::log(3.0) / kScaleClamp);
  c.visit_params("", [&](const std::string& n, Tensor& t) {
    if (n.ends_with(".b3")) {
      t.data()[0] = s_pre;
      t.data()[1] = 1.0;
    }
  });
  Tensor x = Tensor::from({1, 2, 1, 1}, {0.3, 2.0});
  auto [y, ld] = c.forward(x);
  CHECK(y.data()[0] == doctest::Approx(0.3));
  CHECK(y.data()[1] == doctest::Approx(7.0));
  CHECK(ld.data()[0] == doctest::Approx(std::log(3.0)));
}

TEST_CASE("affine coupling: random params round-trip and FD logdet") {
  Rng rng(13);
  Coupling c(CouplingKind::affine, 4, 8, rng);
  perturb_params(c, rng, 0.2);
  Tensor x({1, 4, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = c.forward(x);
  CHECK(max_abs_diff(c.inverse(y), x) < 1e-5);
  const double fd = fd_logdet([&](const Tensor& t) { return c.forward(t); }, x);
  CHECK(ld.data()[0] == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("mixlogcdf: K=1 unit logistic with zero affine is the identity") {
  Rng rng(19);
  Coupling c(CouplingKind::mixlogcdf, 2, 4, rng, /*K=*/1);
  Tensor x = Tensor::from({1, 2, 1, 1}, {0.4, -1.2});
  auto [y, ld] = c.forward(x);
  CHECK(y.data()[1] == doctest::Approx(-1.2).epsilon(1e-12));
  CHECK(std::abs(ld.data()[0]) < 1e-12);
}

TEST_CASE("mixlogcdf: zero-initialized K=4 net is the identity within 1e-6") {
  Rng rng(19);
  Coupling c(CouplingKind::mixlogcdf, 4, 8, rng, 4);
  Tensor x({2, 4, 2, 2});
  rng.fill_normal(x);
  auto [y, ld] = c.forward(x);
  CHECK(max_abs_diff(y, x) < 1e-6);
  CHECK(std::abs(ld.data()[0]) < 1e-6);
}

TEST_CASE("mixlogcdf: random params, x in [-3,3]: round-trip 1e-5 and FD logdet") {
  Rng rng(23);
  Coupling c(CouplingKind::mixlogcdf, 4, 8, rng, 4);
  perturb_params(c, rng, 0.15);
  Tensor x({1, 4, 2, 2});
  rng.fill_uniform(x, -3.0, 3.0);
  auto [y, ld] = c.forward(x);
  CHECK(max_abs_diff(c.inverse(y), x) < 1e-5);
  const double fd = fd_logdet([&](const Tensor& t) { return c.forward(t); }, x);
  CHECK(ld.data()[0] == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("mixlogcdf inverse: gradient w.r.t. y via implicit correction") {
  Rng rng(31);
  Coupling c(CouplingKind::mixlogcdf, 2, 4, rng, 2);
  perturb_params(c, rng, 0.2);
  Tensor x({1, 2, 2, 2});
  rng.fill_uniform(x, -2.0, 2.0);
  Tensor y;
  {
    NoGradScope ng;
    y = c.forward(x).value.detach();
  }
  TapeScope ts;
  y.set_requires_grad(true);
  Tensor back = c.inverse(y);
  ts.tape.backward(sum(mul(back, back)));
  auto f = [&](const oracle::Vec& v) {
    NoGradScope ng;
    Tensor yy = Tensor::from(y.shape(), v);
    Tensor b = c.inverse(yy);
    return sum(mul(b, b)).item();
  };
  oracle::Vec fd = oracle::finite_diff_grad(f, y.values(), 1e-6);
  for (std::int64_t i = 0; i < y.size(); ++i)
    CHECK(y.grad()[i] == doctest::Approx(fd[static_cast<size_t>(i)]).epsilon(2e-3));
}

TEST_CASE("flow step: round-trip, FD logdet, and logdet additivity") {
  for (auto kind : {CouplingKind::affine, CouplingKind::mixlogcdf}) {
    CAPTURE(to_string(kind));
    Rng rng(37);
    FlowStep step(kind, 4, 8, rng);
    rng.fill_normal(step.actnorm().logscale(), 0.2);
    rng.fill_normal(step.actnorm().bias(), 0.2);
    step.actnorm().mark_initialized();
    perturb_params(step.coupling(), rng, 0.1);

    Tensor x({1, 4, 2, 2});
    rng.fill_uniform(x, -2.0, 2.0);
    auto [y, ld] = step.forward(x);
    CHECK(max_abs_diff(step.inverse(y), x) < 1e-5);

    const double fd = fd_logdet([&](const Tensor& t) { return step.forward(t); }, x);
    CHECK(ld.data()[0] == doctest::Approx(fd).epsilon(1e-3));

    // additivity across the three sub-layers
    auto a = step.actnorm().forward(x);
    auto w = step.invconv().forward(a.value);
    auto cc = step.coupling().forward(w.value);
    CHECK(ld.data()[0] ==
          doctest::Approx(a.logdet.data()[0] + w.logdet.data()[0] + cc.logdet.data()[0]));
  }
}

TEST_CASE("flow step: parameter gradients match finite differences (affine path)") {
  Rng rng(41);
  FlowStep step(CouplingKind::affine, 2, 4, rng);
  step.actnorm().mark_initialized();
  perturb_params(step, rng, 0.15);
  Tensor x({2, 2, 2, 2});
  rng.fill_normal(x);

  std::vector<std::pair<std::string, Tensor>> params;
  step.visit_params("s", [&](const std::string& n, Tensor& t) {
    t.set_requires_grad(true);
    params.emplace_back(n, t);
  });
  TapeScope ts;
  auto [y, ld] = step.forward(x);
  ts.tape.backward(add(sum(mul(y, y)), sum(ld)));

  for (auto& [name, t] : params) {
    CAPTURE(name);
    auto f = [&](const oracle::Vec& v) {
      NoGradScope ng;
      std::vector<double> saved = t.values();
      std::copy(v.begin(), v.end(), t.data());
      auto [yy, ll] = step.forward(x);
      const double out = sum(mul(yy, yy)).item() + sum(ll).item();
      std::copy(saved.begin(), saved.end(), t.data());
      return out;
    };
    oracle::Vec fd = oracle::finite_diff_grad(f, t.values());
    for (std::int64_t i = 0; i < t.size(); ++i)
      CHECK(t.grad()[i] ==
            doctest::Approx(fd[static_cast<size_t>(i)]).epsilon(1e-3).scale(1.0));
    t.set_requires_grad(false);
  }
}

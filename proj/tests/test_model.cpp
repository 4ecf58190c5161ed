#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <marscf/model.hpp>
#include <marscf/ops.hpp>
#include <marscf/random.hpp>

#include "oracles.hpp"

using namespace marscf;

namespace {

constexpr double kLn2Pi = 1.8378770664093453;

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Exact identity map: zero actnorm/invconv parameters, trivial pivoting,
// couplings are identity at init by construction.
void make_identity(Model& m) {
  m.visit_params([](const std::string& n, Tensor& t) {
    if (n.find(".actnorm.") != std::string::npos || n.find(".invconv.") != std::string::npos)
      std::fill(t.data(), t.data() + t.size(), 0.0);
  });
  for (int i = 0; i < m.num_levels(); ++i)
    for (auto& st : m.level_steps(i)) {
      const int C = st.invconv().channels();
      std::vector<int> piv(C);
      std::iota(piv.begin(), piv.end(), 0);
      st.invconv().set_factor_structure(piv, std::vector<double>(C, 1.0));
    }
  m.mark_initialized();
}

// Nudges every flow parameter so the model is non-trivial but well-behaved.
void perturb(Model& m, Rng& rng, double stddev) {
  m.visit_params([&](const std::string&, Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] += stddev * rng.normal();
  });
  m.mark_initialized();
}

FlowConfig small_cfg() {
  FlowConfig cfg;
  cfg.channels = 1;
  cfg.size = 4;
  cfg.levels = 2;
  cfg.flow_steps = 2;
  cfg.width = 8;
  cfg.prior_hidden = 4;
  cfg.prior_cond = 2;
  cfg.prior_layers = 2;
  return cfg;
}

}  // namespace

TEST_CASE("channel_dims: C=3 N=32 n=3 pyramid and totals") {
  FlowConfig cfg;
  cfg.channels = 3;
  cfg.size = 32;
  cfg.levels = 3;
  auto d = channel_dims(cfg);
  REQUIRE(d.size() == 3);
  CHECK(d[0].channels == 6);
  CHECK(d[0].height == 16);
  CHECK(d[1].channels == 12);
  CHECK(d[1].height == 8);
  CHECK(d[2].channels == 48);
  CHECK(d[2].height == 4);
  CHECK(d[0].elements() == 1536);
  CHECK(d[1].elements() == 768);
  CHECK(d[2].elements() == 768);
  CHECK(d[0].elements() + d[1].elements() + d[2].elements() == 3 * 32 * 32);
}

TEST_CASE("channel_dims: n=1 C=1 N=2 single latent, invalid sizes rejected") {
  FlowConfig cfg;
  cfg.channels = 1;
  cfg.size = 2;
  cfg.levels = 1;
  auto d = channel_dims(cfg);
  REQUIRE(d.size() == 1);
  CHECK(d[0].channels == 4);
  CHECK(d[0].height == 1);
  CHECK(d[0].width == 1);

  cfg.size = 6;
  cfg.levels = 2;  // 6 not divisible by 4
  CHECK_THROWS(channel_dims(cfg));
}

TEST_CASE("channel_dims: element totals conserve C*N^2 across configs") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    FlowConfig cfg;
    cfg.levels = 1 + static_cast<int>(rng.integer(3));
    cfg.channels = 1 + static_cast<int>(rng.integer(4));
    cfg.size = (1 << cfg.levels) * (1 + static_cast<int>(rng.integer(4)));
    std::int64_t total = 0;
    for (const auto& s : channel_dims(cfg)) total += s.elements();
    CHECK(total == static_cast<std::int64_t>(cfg.channels) * cfg.size * cfg.size);
  }
}

TEST_CASE("critical_path_steps: closed form and 3CN bound") {
  FlowConfig cfg;
  cfg.channels = 3;
  cfg.size = 32;
  cfg.levels = 3;
  CHECK(critical_path_steps(cfg) == 66);
  CHECK(66 <= 3 * 3 * 32);

  cfg.channels = 1;
  cfg.size = 2;
  cfg.levels = 1;
  CHECK(critical_path_steps(cfg) == 4);  // = channels of h_1

  // formula is monotone in n and stays under the bound for valid configs
  std::int64_t prev = 0;
  for (int n = 1; n <= 4; ++n) {
    FlowConfig c;
    c.channels = 2;
    c.levels = n;
    c.size = 1 << n;
    const std::int64_t T = critical_path_steps(c);
    CHECK(T > prev);
    CHECK(T <= 3LL * c.channels * c.size);
    prev = T;
  }
}

TEST_CASE("model_forward: identity init scores the standard normal base density") {
  Rng rng(5);
  FlowConfig cfg = small_cfg();
  Model m(cfg, rng);
  make_identity(m);

  Tensor x({3, 1, 4, 4});
  rng.fill_normal(x);
  auto [z, logp] = m.forward(x);
  REQUIRE(z.size() == 2);
  CHECK(z[0].shape() == Shape{3, 2, 2, 2});
  CHECK(z[1].shape() == Shape{3, 8, 1, 1});
  for (int b = 0; b < 3; ++b) {
    double ssq = 0.0;
    for (int i = 0; i < 16; ++i) {
      const double v = x.data()[b * 16 + i];
      ssq += v * v;
    }
    CHECK(logp.data()[b] == doctest::Approx(-0.5 * ssq - 8.0 * kLn2Pi).epsilon(1e-10));
  }
}

TEST_CASE("model_forward: uninitialized actnorm rejected outside init mode") {
  Rng rng(6);
  Model m(small_cfg(), rng);
  Tensor x({2, 1, 4, 4});
  rng.fill_normal(x);
  CHECK_THROWS(m.forward(x));
  CHECK(!m.initialized());
  m.forward(x, true);  // data-dependent init
  CHECK(m.initialized());
  m.forward(x);  // fine afterwards
}

TEST_CASE("model_forward: logp equivariant to batch permutation") {
  Rng rng(7);
  Model m(small_cfg(), rng);
  perturb(m, rng, 0.05);
  Tensor x({4, 1, 4, 4});
  rng.fill_normal(x);
  Tensor lp = m.logprob(x);

  // reverse the batch
  Tensor xr(x.shape());
  for (int b = 0; b < 4; ++b)
    std::copy(x.data() + b * 16, x.data() + (b + 1) * 16, xr.data() + (3 - b) * 16);
  Tensor lpr = m.logprob(xr);
  for (int b = 0; b < 4; ++b) CHECK(lp.data()[b] == doctest::Approx(lpr.data()[3 - b]).epsilon(1e-12));
}

TEST_CASE("encode/decode: round-trip and logp stability, both coupling kinds") {
  for (CouplingKind kind : {CouplingKind::affine, CouplingKind::mixlogcdf}) {
    CAPTURE(to_string(kind));
    Rng rng(8);
    FlowConfig cfg = small_cfg();
    cfg.coupling = kind;
    Model m(cfg, rng);
    perturb(m, rng, 0.05);

    Tensor x({2, 1, 4, 4});
    rng.fill_normal(x);
    auto z = m.encode(x);
    Tensor back = m.decode(z);
    CHECK(max_abs_diff(back, x) < 1e-5);

    const double lp0 = m.logprob(x).data()[0];
    const double lp1 = m.logprob(back).data()[0];
    CHECK(std::abs(lp0 - lp1) < 1e-6);

    // encode(decode(z)) == z
    auto z2 = m.encode(back);
    for (size_t i = 0; i < z.size(); ++i) CHECK(max_abs_diff(z[i], z2[i]) < 1e-5);
  }
}

TEST_CASE("decode: identity model maps zero latents to a zero image; bad shapes rejected") {
  Rng rng(9);
  Model m(small_cfg(), rng);
  make_identity(m);
  LatentPyramid z{Tensor({1, 2, 2, 2}), Tensor({1, 8, 1, 1})};
  Tensor x = m.decode(z);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x.data()[i] == 0.0);

  CHECK_THROWS(m.decode({Tensor({1, 2, 2, 2})}));                      // missing level
  CHECK_THROWS(m.decode({Tensor({1, 3, 2, 2}), Tensor({1, 8, 1, 1})}));  // bad channels
}

TEST_CASE("decode_with_logprob agrees with forward's prior accounting") {
  Rng rng(10);
  Model m(small_cfg(), rng);
  perturb(m, rng, 0.05);
  Tensor x({2, 1, 4, 4});
  rng.fill_normal(x);
  auto z = m.encode(x);
  auto [back, prior_lp] = m.decode_with_logprob(z);
  CHECK(max_abs_diff(back, x) < 1e-5);
  CHECK(std::isfinite(prior_lp.data()[0]));

  // prior_logprob over the same pyramid is the same computation
  Tensor again = m.prior_logprob(z);
  CHECK(max_abs_diff(again, prior_lp) == 0.0);

  // the full likelihood from forward() is finite and consistent in shape
  Tensor full = m.logprob(x);
  CHECK(full.shape() == Shape{2});
  CHECK(std::isfinite(full.data()[0]));
}

TEST_CASE("marps_sample: re-encoding recovers the drawn latents") {
  Rng rng(11);
  Model m(small_cfg(), rng);
  perturb(m, rng, 0.05);
  Rng srng(123);
  LatentPyramid drawn;
  std::int64_t steps = 0;
  Tensor x = m.marps_sample(4, 0.7, srng, &steps, &drawn);
  CHECK(x.shape() == Shape{4, 1, 4, 4});
  auto z = m.encode(x);
  REQUIRE(z.size() == drawn.size());
  for (size_t i = 0; i < z.size(); ++i) CHECK(max_abs_diff(z[i], drawn[i]) < 1e-4);
}

TEST_CASE("marps_sample: identity model at temperature zero is the zero image") {
  Rng rng(12);
  Model m(small_cfg(), rng);
  make_identity(m);
  Rng srng(1);
  Tensor x = m.marps_sample(2, 0.0, srng);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x.data()[i] == 0.0);
}

TEST_CASE("marps_sample: fixed seed is bit-identical; step count matches closed form") {
  for (int C : {1, 3})
    for (int n : {1, 2, 3}) {
      FlowConfig cfg;
      cfg.channels = C;
      cfg.size = 1 << n;
      cfg.levels = n;
      cfg.flow_steps = 1;
      cfg.width = 4;
      cfg.prior_hidden = 2;
      cfg.prior_cond = 1;
      cfg.prior_layers = 1;
      Rng rng(13);
      Model m(cfg, rng);
      perturb(m, rng, 0.02);
      std::int64_t steps = 0;
      Rng s1(77), s2(77);
      Tensor a = m.marps_sample(2, 1.0, s1, &steps);
      Tensor b = m.marps_sample(2, 1.0, s2);
      CHECK(steps == critical_path_steps(cfg));
      CHECK(max_abs_diff(a, b) == 0.0);
    }
}

TEST_CASE("logp gradient w.r.t. x matches finite differences (D=16)") {
  Rng rng(14);
  Model m(small_cfg(), rng);
  perturb(m, rng, 0.05);
  Tensor x({1, 1, 4, 4});
  rng.fill_normal(x);
  x.set_requires_grad(true);
  {
    TapeScope ts;
    Tensor lp = m.logprob(x);
    ts.tape.backward(sum(lp));
  }
  auto f = [&](const oracle::Vec& v) {
    NoGradScope ng;
    return m.logprob(Tensor::from(x.shape(), v)).data()[0];
  };
  const auto g = oracle::finite_diff_grad(f, x.values());
  for (size_t i = 0; i < g.size(); ++i) {
    const double scale = std::max(1.0, std::abs(g[i]));
    CHECK(std::abs(x.grad()[i] - g[i]) / scale < 1e-3);
  }
}

TEST_CASE("tiny-config self-consistency: exp(logp) integrates to about 1") {
  // C=1, N=2, n=1: a 4-dimensional density integrated on a coarse grid.
  Rng rng(15);
  FlowConfig cfg;
  cfg.channels = 1;
  cfg.size = 2;
  cfg.levels = 1;
  cfg.flow_steps = 1;
  cfg.width = 4;
  cfg.prior_hidden = 2;
  cfg.prior_cond = 1;
  cfg.prior_layers = 1;
  Model m(cfg, rng);
  perturb(m, rng, 0.05);

  const double lo = -6.0, hi = 6.0, h = 0.5;
  const int K = static_cast<int>(std::lround((hi - lo) / h)) + 1;  // 25
  std::vector<double> grid(K);
  for (int i = 0; i < K; ++i) grid[i] = lo + h * i;
  auto trap = [&](int i) { return (i == 0 || i == K - 1) ? 0.5 : 1.0; };

  double integral = 0.0;
  const int B = 2048;
  std::vector<double> batch;
  std::vector<double> weights;
  NoGradScope ng;
  auto flush = [&]() {
    if (weights.empty()) return;
    const int n = static_cast<int>(weights.size());
    Tensor xb = Tensor::from({n, 1, 2, 2}, batch);
    Tensor lp = m.logprob(xb);
    for (int i = 0; i < n; ++i) integral += weights[i] * std::exp(lp.data()[i]);
    batch.clear();
    weights.clear();
  };
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b)
      for (int c = 0; c < K; ++c)
        for (int d = 0; d < K; ++d) {
          batch.insert(batch.end(), {grid[a], grid[b], grid[c], grid[d]});
          weights.push_back(trap(a) * trap(b) * trap(c) * trap(d) * h * h * h * h);
          if (static_cast<int>(weights.size()) == B) flush();
        }
  flush();
  CHECK(integral > 0.9);
  CHECK(integral < 1.1);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include <marscf/data.hpp>
#include <marscf/interp.hpp>
#include <marscf/model.hpp>
#include <marscf/train.hpp>

using namespace marscf;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

FlowConfig tiny_cfg() {
  FlowConfig cfg;
  cfg.channels = 1;
  cfg.size = 4;
  cfg.levels = 2;
  cfg.flow_steps = 1;
  cfg.width = 4;
  cfg.prior_hidden = 2;
  cfg.prior_cond = 1;
  cfg.prior_layers = 1;
  return cfg;
}

// A lightly trained model plus two dequantized images to interpolate.
struct Fixture {
  Model model;
  Tensor xA, xB;

  Fixture() : model(make_model()) {
    Dataset ds = make_synthetic(2, 4, 77);
    Rng deq(3);
    xA = dequantize(Tensor::from({1, 1, 4, 4}, ds.images[0]), 8, deq);
    xB = dequantize(Tensor::from({1, 1, 4, 4}, ds.images[1]), 8, deq);
  }

  static Model make_model() {
    Rng rng(21);
    Model m(tiny_cfg(), rng);
    Dataset tr = make_synthetic(32, 4, 1);
    Dataset val = make_synthetic(8, 4, 2);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    train(m, tr, val, tc);
    return m;
  }
};

}  // namespace

TEST_CASE("linear_interp: endpoints exact, midpoint elementwise, mismatch rejected") {
  LatentPyramid zA{Tensor({1, 2, 2, 2}), Tensor({1, 8, 1, 1})};
  LatentPyramid zB{Tensor({1, 2, 2, 2}), Tensor({1, 8, 1, 1})};
  Rng rng(1);
  for (auto& t : zA) rng.fill_normal(t);
  for (auto& t : zB) std::fill(t.data(), t.data() + t.size(), 2.0);

  auto z0 = linear_interp(zA, zB, 0.0);
  auto z1 = linear_interp(zA, zB, 1.0);
  for (size_t i = 0; i < zA.size(); ++i) {
    CHECK(max_abs_diff(z0[i], zA[i]) == 0.0);
    CHECK(max_abs_diff(z1[i], zB[i]) == 0.0);
  }

  LatentPyramid zeros{Tensor({1, 2, 2, 2}), Tensor({1, 8, 1, 1})};
  auto mid = linear_interp(zeros, zB, 0.5);
  for (const auto& t : mid)
    for (std::int64_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == 1.0);

  LatentPyramid bad{Tensor({1, 2, 2, 2})};
  CHECK_THROWS(linear_interp(zA, bad, 0.5));
  CHECK_THROWS(linear_interp(zA, zB, 1.5));
}

TEST_CASE("project_interp: lambda1=lambda2=0 returns the linear waypoint") {
  Fixture f;
  auto zA = f.model.encode(f.xA);
  auto zB = f.model.encode(f.xB);
  auto z0 = linear_interp(zA, zB, 0.4);
  InterpConfig cfg;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  cfg.iterations = 20;
  auto res = project_interp(z0, f.xA, f.xB, f.model, cfg);
  REQUIRE(res.z.size() == z0.size());
  for (size_t i = 0; i < z0.size(); ++i) CHECK(max_abs_diff(res.z[i], z0[i]) < 1e-6);
}

TEST_CASE("project_interp: objective is non-increasing and finite") {
  Fixture f;
  auto zA = f.model.encode(f.xA);
  auto zB = f.model.encode(f.xB);
  InterpConfig cfg;
  cfg.iterations = 25;
  for (double alpha : {0.0, 0.25, 0.5, 0.75}) {
    auto z0 = linear_interp(zA, zB, alpha);
    auto res = project_interp(z0, f.xA, f.xB, f.model, cfg);
    CHECK(std::isfinite(res.objective_final));
    CHECK(res.objective_final <= res.objective_init);
  }
}

TEST_CASE("project_interp: non-finite objective at init rejected") {
  Fixture f;
  auto zA = f.model.encode(f.xA);
  LatentPyramid bad;
  for (const auto& t : zA) {
    Tensor c = t.detach();
    c.data()[0] = std::numeric_limits<double>::infinity();
    bad.push_back(c);
  }
  InterpConfig cfg;
  cfg.iterations = 5;
  CHECK_THROWS(project_interp(bad, f.xA, f.xB, f.model, cfg));
}

TEST_CASE("interpolate_path: k=1 with lambda=0 is the decoded linear midpoint") {
  Fixture f;
  InterpConfig cfg;
  cfg.steps = 1;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  auto res = interpolate_path(f.xA, f.xB, f.model, cfg);
  REQUIRE(res.images.size() == 1);

  auto zA = f.model.encode(f.xA);
  auto zB = f.model.encode(f.xB);
  Tensor want = f.model.decode(linear_interp(zA, zB, 0.5));
  CHECK(max_abs_diff(res.images[0], want) == 0.0);
}

TEST_CASE("interpolate_path: degenerate path xA == xB stays at xA") {
  Fixture f;
  InterpConfig cfg;
  cfg.steps = 3;
  cfg.lambda1 = 0.0;  // anchor + image term only; the anchor is the optimum
  cfg.lambda2 = 0.35;
  cfg.iterations = 20;
  auto res = interpolate_path(f.xA, f.xA, f.model, cfg);
  REQUIRE(res.images.size() == 3);
  for (const auto& img : res.images) CHECK(max_abs_diff(img, f.xA) < 1e-4);
}

TEST_CASE("interpolate_path: projected total objective never exceeds the linear total") {
  Fixture f;
  InterpConfig cfg;
  cfg.steps = 4;
  cfg.iterations = 25;
  auto res = interpolate_path(f.xA, f.xB, f.model, cfg);
  double linear_total = 0.0, projected_total = 0.0;
  for (size_t i = 0; i < res.images.size(); ++i) {
    linear_total += res.objective_init[i];
    projected_total += res.objective_final[i];
  }
  CHECK(projected_total <= linear_total);
}

TEST_CASE("interpolate_path: endpoints decode back to the inputs") {
  Fixture f;
  auto zA = f.model.encode(f.xA);
  auto zB = f.model.encode(f.xB);
  CHECK(max_abs_diff(f.model.decode(zA), f.xA) < 1e-5);
  CHECK(max_abs_diff(f.model.decode(zB), f.xB) < 1e-5);
}

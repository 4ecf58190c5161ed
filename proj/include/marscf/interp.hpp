#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "model.hpp"
#include "optim.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace marscf {

struct InterpConfig {
  int steps = 8;         // k waypoints between the endpoints
  double lambda1 = 0.35;  // prior likelihood weight
  double lambda2 = 0.35;  // image anchor weight
  double lr = 5e-2;
  int iterations = 100;
  std::uint64_t seed = 0;

  void validate() const {
    check(steps >= 1, "interp config: steps must be >= 1");
    check(lambda1 >= 0.0 && lambda2 >= 0.0, "interp config: lambdas must be >= 0");
    check(lr > 0.0, "interp config: lr must be > 0");
    check(iterations >= 1, "interp config: iterations must be >= 1");
  }
};

/// Elementwise (1-alpha) zA + alpha zB per pyramid level.
inline LatentPyramid linear_interp(const LatentPyramid& zA, const LatentPyramid& zB,
                                   double alpha) {
  check(zA.size() == zB.size(), "linear_interp: pyramid depth mismatch");
  check(alpha >= 0.0 && alpha <= 1.0, "linear_interp: alpha outside [0,1]");
  LatentPyramid out;
  for (size_t i = 0; i < zA.size(); ++i) {
    check(zA[i].shape() == zB[i].shape(), "linear_interp: level " + std::to_string(i) +
                                              " shape mismatch");
    out.push_back(add(scale(zA[i], 1.0 - alpha), scale(zB[i], alpha)));
  }
  return out;
}

namespace detail {

/// Euclidean norm over flattened pyramids, smoothed for differentiability.
inline Tensor pyramid_norm(const LatentPyramid& a, const LatentPyramid& b) {
  Tensor ssq;
  for (size_t i = 0; i < a.size(); ++i) {
    Tensor s = sum(square(sub(a[i], b[i])));
    ssq = ssq.defined() ? add(ssq, s) : s;
  }
  return sqrt_(add_const(ssq, 1e-12));
}

inline Tensor image_norm(const Tensor& a, const Tensor& b) {
  return sqrt_(add_const(sum(square(sub(a, b))), 1e-12));
}

}  // namespace detail

/// The projection objective: ||z - z_anchor|| - lambda1 * log p_phi(z)
/// + lambda2 * min(||f^-1(z) - xA||, ||f^-1(z) - xB||), Euclidean norms over
/// flattened tensors.
inline Tensor interp_objective(Model& model, const LatentPyramid& z,
                               const LatentPyramid& anchor, const Tensor& xA, const Tensor& xB,
                               double lambda1, double lambda2) {
  Tensor obj = detail::pyramid_norm(z, anchor);
  if (lambda1 == 0.0 && lambda2 == 0.0) return obj;
  auto [x, prior_lp] = model.decode_with_logprob(z);
  if (lambda1 != 0.0) obj = sub(obj, scale(sum(prior_lp), lambda1));
  if (lambda2 != 0.0)
    obj = add(obj,
              scale(minimum(detail::image_norm(x, xA), detail::image_norm(x, xB)), lambda2));
  return obj;
}

struct ProjectResult {
  LatentPyramid z;
  double objective_init = 0.0;
  double objective_final = 0.0;
};

/// Gradient descent on the projection objective starting from the linear
/// waypoint; returns the best-objective iterate (the anchor itself counts, so
/// the result never regresses). With lambda1 = lambda2 = 0 the anchor is the
/// unique minimizer and is returned as-is.
inline ProjectResult project_interp(const LatentPyramid& z_init, const Tensor& xA,
                                    const Tensor& xB, Model& model, const InterpConfig& cfg) {
  cfg.validate();
  if (cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0) {
    LatentPyramid anchor;
    for (const auto& t : z_init) anchor.push_back(t.detach());
    return {anchor, 0.0, 0.0};
  }

  LatentPyramid anchor, z;
  std::vector<std::pair<std::string, Tensor>> params;
  for (size_t i = 0; i < z_init.size(); ++i) {
    anchor.push_back(z_init[i].detach());
    Tensor v = z_init[i].detach();
    v.set_requires_grad(true);
    z.push_back(v);
    params.emplace_back("z" + std::to_string(i), v);
  }

  Adamax opt(cfg.lr);
  double best = 0.0;
  double init_obj = 0.0;
  LatentPyramid best_z;
  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor obj;
    {
      TapeScope ts;
      obj = interp_objective(model, z, anchor, xA, xB, cfg.lambda1, cfg.lambda2);
      const double val = obj.item();
      if (it == 0) {
        check(std::isfinite(val), "project_interp: non-finite objective at init");
        init_obj = val;
      }
      if (it == 0 || (std::isfinite(val) && val < best)) {
        best = val;
        best_z.clear();
        for (const auto& t : z) best_z.push_back(t.detach());
      }
      if (!std::isfinite(val)) break;
      for (auto& [name, t] : params) t.zero_grad();
      ts.tape.backward(obj);
    }
    opt.step(params);
  }
  return {std::move(best_z), init_obj, best};
}

struct InterpResult {
  std::vector<Tensor> images;         // decoded waypoints, in path order
  std::vector<double> objective_init;   // Eq. objective at the linear waypoint
  std::vector<double> objective_final;  // at the returned iterate
};

/// Encode both endpoints, project each of the k linear waypoints
/// (alpha_i = i/(k+1)), decode all.
inline InterpResult interpolate_path(const Tensor& xA, const Tensor& xB, Model& model,
                                     const InterpConfig& cfg) {
  cfg.validate();
  auto zA = model.encode(xA);
  auto zB = model.encode(xB);
  InterpResult out;
  for (int i = 1; i <= cfg.steps; ++i) {
    const double alpha = static_cast<double>(i) / (cfg.steps + 1);
    auto z0 = linear_interp(zA, zB, alpha);
    auto proj = project_interp(z0, xA, xB, model, cfg);
    NoGradScope ng;
    out.images.push_back(model.decode(proj.z));
    out.objective_init.push_back(proj.objective_init);
    out.objective_final.push_back(proj.objective_final);
  }
  return out;
}

}  // namespace marscf

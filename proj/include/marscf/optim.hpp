#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace marscf {

/// Adamax: exponential moving average of the gradient plus an infinity-norm
/// second moment. Parameters with non-finite gradients are skipped for the
/// step (the event is counted, not fatal).
class Adamax {
 public:
  struct Moments {
    std::vector<double> m;  // first moment
    std::vector<double> u;  // infinity norm
  };

  explicit Adamax(double lr = 8e-4, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }
  std::int64_t skipped_groups() const { return skipped_; }

  /// One update over named parameter tensors. Gradients are read from each
  /// tensor's grad buffer; moments are kept per name.
  void step(const std::vector<std::pair<std::string, Tensor>>& params) {
    ++t_;
    const double bias_fix = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      Tensor t = p;
      if (!t.has_grad()) continue;
      const auto& g = t.grad_values();
      bool finite = true;
      for (double v : g)
        if (!std::isfinite(v)) {
          finite = false;
          break;
        }
      auto& mom = moments_[name];
      if (mom.m.empty()) {
        mom.m.assign(g.size(), 0.0);
        mom.u.assign(g.size(), 0.0);
      }
      check(mom.m.size() == g.size(), "adamax: moment/param size mismatch for " + name);
      if (!finite) {
        ++skipped_;
        // moments still decay so a stale spike does not linger
        for (auto& u : mom.u) u *= beta2_;
        for (auto& m : mom.m) m *= beta1_;
        continue;
      }
      double* val = t.data();
      for (size_t i = 0; i < g.size(); ++i) {
        mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g[i];
        mom.u[i] = std::max(beta2_ * mom.u[i], std::abs(g[i]));
        val[i] -= lr_ * (mom.m[i] / bias_fix) / (mom.u[i] + eps_);
      }
    }
  }

  std::unordered_map<std::string, Moments>& moments() { return moments_; }
  const std::unordered_map<std::string, Moments>& moments() const { return moments_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::int64_t skipped_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace marscf

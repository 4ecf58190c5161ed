#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "tensor.hpp"

namespace marscf {

/// Deterministic random stream. Gaussians come from an explicit Box-Muller
/// transform so that a given seed yields the same values on every platform
/// and standard-library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {  // [0, 1)
    return std::generate_canonical<double, 53>(gen_);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t integer(std::uint64_t n) {  // [0, n)
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  void fill_normal(Tensor& t, double stddev = 1.0) {
    double* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) p[i] = stddev * normal();
  }

  void fill_uniform(Tensor& t, double lo, double hi) {
    double* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) p[i] = uniform(lo, hi);
  }

  /// Fisher-Yates shuffle of an index vector.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(integer(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t next_seed() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace marscf

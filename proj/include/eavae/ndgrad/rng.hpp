#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace eavae::ndgrad {

/// Seeded random stream. Each owner keeps its own; there is no global state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double standard_normal() { return normal_(engine_); }
  /// Laplace(0, 1) by inverse CDF.
  double standard_laplace() {
    const double u = uniform() - 0.5;
    const double a = 1.0 - 2.0 * std::abs(u);
    return -std::copysign(1.0, u) * std::log(a > 0 ? a : std::numeric_limits<double>::min());
  }
  double standard_exponential() { return -std::log(open_uniform()); }
  /// Gamma(k=2, theta=1) as the sum of two unit exponentials.
  double standard_gamma_shape2() { return standard_exponential() + standard_exponential(); }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  std::vector<double> normal_vector(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = standard_normal();
    return v;
  }

  /// Independent child stream, deterministic given the parent's state.
  RngStream split() { return RngStream(next_u64()); }

  std::mt19937_64& engine() { return engine_; }

 private:
  double open_uniform() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline RngStream seeded_rng(std::uint64_t seed) { return RngStream(seed); }

}  // namespace eavae::ndgrad

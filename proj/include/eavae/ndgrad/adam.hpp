#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace eavae::ndgrad {

struct AdamConfig {
  double lr = 1e-3;
  double beta_m1 = 0.9;
  double beta_m2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: p <- p - lr * wd * p
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step_count = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, const std::vector<Tensor>& params) : config(cfg) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.size(), 0.0);
      second_moment.emplace_back(p.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but state holds " +
                     std::to_string(state.first_moment.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != state.first_moment[k].size()) {
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " has " + std::to_string(params[k].size()) +
                       " values but its moments hold " + std::to_string(state.first_moment[k].size()));
    }
  }
  const auto& c = state.config;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(c.beta_m1, t);
  const double bias2 = 1.0 - std::pow(c.beta_m2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_data();
    const auto g = params[k].grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = c.beta_m1 * m[i] + (1.0 - c.beta_m1) * gi;
      v[i] = c.beta_m2 * v[i] + (1.0 - c.beta_m2) * gi * gi;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      if (c.weight_decay != 0.0) p[i] -= c.lr * c.weight_decay * p[i];
      p[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

inline void zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

inline double grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

}  // namespace eavae::ndgrad

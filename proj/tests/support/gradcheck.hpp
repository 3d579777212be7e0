#pragma once

// Test-only central finite-difference oracle. Independent of the tape: it only
// calls the forward function on perturbed copies of the inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "eavae/ndgrad/ndgrad.hpp"

namespace eavae::testing {

using ndgrad::Tensor;

/// Largest relative error between tape gradients and central differences of
/// `f` with respect to every input. Relative error uses max(|a|, |b|, floor).
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                        double h = 1e-6, double floor = 1e-6) {
  for (auto& t : inputs) t = t.detach().set_requires_grad(true);
  Tensor loss = f(inputs);
  loss.backward();
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        ndgrad::NoGradGuard guard;
        std::vector<Tensor> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          std::vector<double> v = inputs[j].values();
          if (j == k) v[i] += delta;
          probe.emplace_back(inputs[j].shape(), std::move(v));
        }
        return f(probe).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline Tensor random_tensor(ndgrad::Shape shape, ndgrad::RngStream& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ndgrad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace eavae::testing

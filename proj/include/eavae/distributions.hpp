#pragma once

// Posterior families, reparameterized sampling, closed-form KL divergences to
// the priors, and reconstruction likelihoods.
//
// Encoders emit log-scale parameters; every scale used here is exp() of an
// unconstrained value, so positivity holds without clipping. Tensor-valued
// functions operate row-wise on [batch, dim] tensors and are differentiable;
// the double-valued overloads are the same formulas for single parameters.

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "ndgrad/ndgrad.hpp"

namespace eavae::dist {

using ndgrad::Tensor;
namespace nd = ndgrad;

enum class ZFamily { laplace, normal };
enum class SFamily { none, softplus_laplace, log_normal, gamma_k2 };
enum class Likelihood { normal, bernoulli };

inline constexpr double kGammaShape = 2.0;
inline const double kGammaPriorTheta = 1.0 / std::numbers::sqrt2;
inline constexpr double kBernoulliClamp = 1e-7;

inline std::string_view name(ZFamily f) { return f == ZFamily::laplace ? "laplace" : "normal"; }
inline std::string_view name(SFamily f) {
  switch (f) {
    case SFamily::softplus_laplace: return "softplus-laplace";
    case SFamily::log_normal: return "log-normal";
    case SFamily::gamma_k2: return "gamma-k2";
    default: return "none";
  }
}
inline std::string_view name(Likelihood l) { return l == Likelihood::normal ? "normal" : "bernoulli"; }

inline ZFamily parse_z_family(std::string_view s) {
  if (s == "laplace") return ZFamily::laplace;
  if (s == "normal") return ZFamily::normal;
  throw std::invalid_argument("unknown z family '" + std::string(s) + "'");
}
inline SFamily parse_s_family(std::string_view s) {
  if (s == "none") return SFamily::none;
  if (s == "softplus-laplace") return SFamily::softplus_laplace;
  if (s == "log-normal") return SFamily::log_normal;
  if (s == "gamma-k2") return SFamily::gamma_k2;
  throw std::invalid_argument("unknown s family '" + std::string(s) + "'");
}
inline Likelihood parse_likelihood(std::string_view s) {
  if (s == "normal") return Likelihood::normal;
  if (s == "bernoulli") return Likelihood::bernoulli;
  throw std::invalid_argument("unknown likelihood '" + std::string(s) + "'");
}

/// Prior of a latent block. z priors are Laplace(0,1) or Normal(0,1); the s
/// prior is chosen by family (Gamma k=2, theta=1/sqrt2 has unit variance).
struct PriorSpec {
  ZFamily z_family = ZFamily::laplace;
  SFamily s_family = SFamily::none;

  double z_variance() const { return z_family == ZFamily::laplace ? 2.0 : 1.0; }
  double z_std() const { return std::sqrt(z_variance()); }
};

/// Diagonal posterior over z for a batch: mu and log-scale are [batch, dim].
/// The scale is b for Laplace and the variance for Normal.
struct ZPosterior {
  ZFamily family = ZFamily::laplace;
  Tensor mu;
  Tensor log_scale;

  Tensor scale() const { return nd::exp(log_scale); }
  /// Per-dimension posterior variance: 2b^2 (Laplace) or var (Normal).
  Tensor variance() const {
    return family == ZFamily::laplace ? nd::scale(nd::exp(nd::scale(log_scale, 2.0)), 2.0) : nd::exp(log_scale);
  }
  /// Per-dimension posterior standard deviation: b*sqrt2 (Laplace) or sigma.
  Tensor stddev() const {
    return family == ZFamily::laplace ? nd::scale(nd::exp(log_scale), std::numbers::sqrt2)
                                      : nd::exp(nd::scale(log_scale, 0.5));
  }
};

/// Posterior over the scalar s for a batch, [batch, 1] tensors. `loc` is the
/// pre-activation location (mu_s or nu); unused for gamma-k2. `log_scale` is
/// log b_s, log xi^2 or log theta.
struct SPosterior {
  SFamily family = SFamily::none;
  Tensor loc;
  Tensor log_scale;
};

// ---- sampling ----

inline Tensor rsample(const ZPosterior& q, nd::RngStream& rng) {
  std::vector<double> eps(q.mu.size());
  if (q.family == ZFamily::laplace) {
    for (auto& e : eps) e = rng.standard_laplace();
    return q.mu + nd::exp(q.log_scale) * Tensor(q.mu.shape(), std::move(eps));
  }
  for (auto& e : eps) e = rng.standard_normal();
  return q.mu + nd::exp(nd::scale(q.log_scale, 0.5)) * Tensor(q.mu.shape(), std::move(eps));
}

/// Positive s sample: softplus or exp of the pre-activation draw, or
/// theta * (e1 + e2) for gamma-k2 with the gradient flowing through theta only.
inline Tensor rsample_s(const SPosterior& q, nd::RngStream& rng) {
  std::vector<double> eps(q.log_scale.size());
  switch (q.family) {
    case SFamily::softplus_laplace: {
      for (auto& e : eps) e = rng.standard_laplace();
      const Tensor u = q.loc + nd::exp(q.log_scale) * Tensor(q.log_scale.shape(), std::move(eps));
      return nd::softplus(u);
    }
    case SFamily::log_normal: {
      for (auto& e : eps) e = rng.standard_normal();
      const Tensor u = q.loc + nd::exp(nd::scale(q.log_scale, 0.5)) * Tensor(q.log_scale.shape(), std::move(eps));
      return nd::exp(u);
    }
    case SFamily::gamma_k2: {
      for (auto& e : eps) e = rng.standard_gamma_shape2();
      return nd::exp(q.log_scale) * Tensor(q.log_scale.shape(), std::move(eps));
    }
    default: throw std::logic_error("rsample_s on a model without s");
  }
}

// ---- KL divergences, scalar form ----

inline double kl_laplace_to_std(double mu, double b) {
  if (!(b > 0)) throw std::domain_error("kl_laplace_to_std: scale must be positive, got " + std::to_string(b));
  const double a = std::abs(mu);
  return -1.0 + a - std::log(b) + b * std::exp(-a / b);
}

inline double kl_normal_to_std(double mu, double var) {
  if (!(var > 0)) throw std::domain_error("kl_normal_to_std: variance must be positive, got " + std::to_string(var));
  return 0.5 * (-1.0 + mu * mu - std::log(var) + var);
}

/// KL(Gamma(2, theta) || Gamma(2, theta0)) = k (r - 1 - ln r), r = theta/theta0.
inline double kl_gamma_to_prior(double theta, double theta0 = kGammaPriorTheta) {
  if (!(theta > 0)) throw std::domain_error("kl_gamma_to_prior: theta must be positive, got " + std::to_string(theta));
  const double r = theta / theta0;
  return kGammaShape * (r - 1.0 - std::log(r));
}

/// softplus is invertible, so the KL equals that of the pre-activation Laplace.
inline double kl_softplus_laplace(double mu_s, double b_s) { return kl_laplace_to_std(mu_s, b_s); }

// ---- KL divergences, tensor form on log-scale parameters ----

inline Tensor kl_laplace(const Tensor& mu, const Tensor& log_b) {
  const Tensor b = nd::exp(log_b);
  const Tensor a = nd::abs(mu);
  return nd::add_scalar(a - log_b + b * nd::exp(nd::neg(a / b)), -1.0);
}

inline Tensor kl_normal(const Tensor& mu, const Tensor& log_var) {
  return nd::scale(nd::add_scalar(nd::square(mu) - log_var + nd::exp(log_var), -1.0), 0.5);
}

inline Tensor kl_gamma(const Tensor& log_theta, double theta0 = kGammaPriorTheta) {
  const Tensor log_r = nd::add_scalar(log_theta, -std::log(theta0));
  return nd::scale(nd::add_scalar(nd::exp(log_r) - log_r, -1.0), kGammaShape);
}

/// Per-row KL of the z posterior, summed over dimensions: [batch].
inline Tensor kl_z(const ZPosterior& q) {
  const Tensor per_dim = q.family == ZFamily::laplace ? kl_laplace(q.mu, q.log_scale) : kl_normal(q.mu, q.log_scale);
  return nd::sum(per_dim, 1);
}

/// Per-row KL of the s posterior: [batch].
inline Tensor kl_s(const SPosterior& q) {
  switch (q.family) {
    case SFamily::softplus_laplace: return nd::sum(kl_laplace(q.loc, q.log_scale), 1);
    case SFamily::log_normal: return nd::sum(kl_normal(q.loc, q.log_scale), 1);
    case SFamily::gamma_k2: return nd::sum(kl_gamma(q.log_scale), 1);
    default: throw std::logic_error("kl_s on a model without s");
  }
}

// ---- likelihoods ----

/// (1 / 2 sigma^2) * sum (xhat - x)^2 per row. The constant
/// M/2 log(2 pi sigma^2) is reported by normal_log_constant().
inline Tensor recon_normal(const Tensor& x, const Tensor& xhat, double sigma_obs) {
  if (x.shape() != xhat.shape()) throw nd::ShapeError("recon_normal", x.shape(), xhat.shape());
  return nd::sum(nd::scale(nd::square(xhat - x), 0.5 / (sigma_obs * sigma_obs)), 1);
}

inline double normal_log_constant(std::size_t pixels, double sigma_obs) {
  return 0.5 * static_cast<double>(pixels) * std::log(2.0 * std::numbers::pi * sigma_obs * sigma_obs);
}

/// -sum [x log xhat + (1-x) log(1-xhat)] per row, xhat clamped to [1e-7, 1-1e-7].
inline Tensor recon_bernoulli(const Tensor& x, const Tensor& xhat) {
  if (x.shape() != xhat.shape()) throw nd::ShapeError("recon_bernoulli", x.shape(), xhat.shape());
  const Tensor p = nd::clamp(xhat, kBernoulliClamp, 1.0 - kBernoulliClamp);
  const Tensor one_minus_x = nd::add_scalar(nd::neg(x), 1.0);
  const Tensor ll = x * nd::log(p) + one_minus_x * nd::log(nd::add_scalar(nd::neg(p), 1.0));
  return nd::neg(nd::sum(ll, 1));
}

inline Tensor recon(Likelihood family, const Tensor& x, const Tensor& xhat, double sigma_obs) {
  return family == Likelihood::normal ? recon_normal(x, xhat, sigma_obs) : recon_bernoulli(x, xhat);
}

/// Scalar reconstruction loss for one image.
inline double likelihood_terms(std::span<const double> x, std::span<const double> xhat, Likelihood family,
                               double sigma_obs = 1.0) {
  if (x.size() != xhat.size()) throw nd::ShapeError("likelihood_terms", {x.size()}, {xhat.size()});
  nd::NoGradGuard guard;
  const Tensor tx({1, x.size()}, {x.begin(), x.end()});
  const Tensor th({1, xhat.size()}, {xhat.begin(), xhat.end()});
  return recon(family, tx, th, sigma_obs).item();
}

// ---- posterior summaries of s ----

/// Posterior mean of s for one image given its (loc, log_scale). Gamma and
/// log-normal are exact; softplus-laplace is a Monte Carlo average.
inline double posterior_mean_s(SFamily family, double loc, double log_scale, std::size_t n_samples,
                               nd::RngStream& rng) {
  switch (family) {
    case SFamily::gamma_k2: return kGammaShape * std::exp(log_scale);
    case SFamily::log_normal: return std::exp(loc + 0.5 * std::exp(log_scale));
    case SFamily::softplus_laplace: {
      if (n_samples == 0) throw std::invalid_argument("posterior_mean_s: n_samples must be >= 1");
      const double b = std::exp(log_scale);
      double acc = 0.0;
      for (std::size_t i = 0; i < n_samples; ++i) acc += nd::softplus(loc + b * rng.standard_laplace());
      return acc / static_cast<double>(n_samples);
    }
    default: throw std::logic_error("posterior_mean_s on a model without s");
  }
}

}  // namespace eavae::dist

#pragma once

// Encoder/decoder networks for the standard VAE and the explaining-away
// variants, whose decoder mean is s * f(z) with a positive global scalar s.
//
// Homogeneous variants (softplus-laplace, log-normal) keep D latent slots in
// total: z takes the first D-1 slots of the shared posterior heads and the
// pre-activation of s takes the last one. The gamma variant infers theta from
// a separate encoder and keeps all D slots for z.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "distributions.hpp"
#include "ndgrad/ndgrad.hpp"
#include "numeric.hpp"

namespace eavae::models {

using ndgrad::Tensor;
namespace nd = ndgrad;

enum class Variant { vae, eavae_softplus_laplace, eavae_lognormal, eavae_gamma };
enum class Activation { identity, softplus, relu, sigmoid };

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::vae, "vae"},
                                       {Variant::eavae_softplus_laplace, "eavae-softplus-laplace"},
                                       {Variant::eavae_lognormal, "eavae-lognormal"},
                                       {Variant::eavae_gamma, "eavae-gamma"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::identity, "identity"},
                                          {Activation::softplus, "softplus"},
                                          {Activation::relu, "relu"},
                                          {Activation::sigmoid, "sigmoid"}})

inline Tensor activate(Activation a, const Tensor& x) {
  switch (a) {
    case Activation::softplus: return nd::softplus(x);
    case Activation::relu: return nd::relu(x);
    case Activation::sigmoid: return nd::sigmoid(x);
    default: return x;
  }
}

struct ModelSpec {
  std::size_t input_dim = 144;
  std::size_t latent_dim = 64;
  std::vector<std::size_t> encoder_hidden{256, 256};
  std::vector<std::size_t> decoder_hidden{};  // empty: a single linear layer
  Activation hidden_activation = Activation::softplus;
  Activation output_activation = Activation::identity;
  Variant variant = Variant::eavae_softplus_laplace;
  std::string z_family = "laplace";
  std::string likelihood = "normal";
  double sigma_obs = 0.4;
  bool center_input = false;  // subtract each image's mean before encoding

  bool has_s() const { return variant != Variant::vae; }
  bool homogeneous() const {
    return variant == Variant::eavae_softplus_laplace || variant == Variant::eavae_lognormal;
  }
  std::size_t z_dim() const { return homogeneous() ? latent_dim - 1 : latent_dim; }
  dist::SFamily s_family() const {
    switch (variant) {
      case Variant::eavae_softplus_laplace: return dist::SFamily::softplus_laplace;
      case Variant::eavae_lognormal: return dist::SFamily::log_normal;
      case Variant::eavae_gamma: return dist::SFamily::gamma_k2;
      default: return dist::SFamily::none;
    }
  }
  dist::ZFamily z_family_enum() const { return dist::parse_z_family(z_family); }
  dist::Likelihood likelihood_enum() const { return dist::parse_likelihood(likelihood); }
  dist::PriorSpec prior() const { return {z_family_enum(), s_family()}; }

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("model.input_dim must be positive");
    if (latent_dim < (homogeneous() ? 2u : 1u)) throw std::invalid_argument("model.latent_dim too small for variant");
    if (!(sigma_obs > 0)) throw std::invalid_argument("model.sigma_obs must be positive");
    if (output_activation != Activation::identity && output_activation != Activation::sigmoid)
      throw std::invalid_argument("model.output_activation must be identity or sigmoid");
    (void)z_family_enum();
    (void)likelihood_enum();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelSpec, input_dim, latent_dim, encoder_hidden, decoder_hidden,
                                                hidden_activation, output_activation, variant, z_family, likelihood,
                                                sigma_obs, center_input)

/// Fully connected layer y = x W + b, W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, nd::RngStream& rng, bool zero_init = false) {
    const double a = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out), b(out);
    if (!zero_init) {
      for (auto& v : w) v = rng.uniform(-a, a);
      for (auto& v : b) v = rng.uniform(-a, a);
    }
    weight = Tensor({in, out}, std::move(w), true);
    bias = Tensor({out}, std::move(b), true);
  }

  Tensor operator()(const Tensor& x) const { return nd::matmul(x, weight) + bias; }
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

/// Hidden stack of Linear + activation; the final layer is linear.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::relu;

  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation act, nd::RngStream& rng)
      : activation(act) {
    std::size_t prev = in;
    for (std::size_t h : hidden) {
      layers.emplace_back(prev, h, rng);
      prev = h;
    }
    if (out > 0) layers.emplace_back(prev, out, rng);
  }

  /// Applies every layer; the activation follows all but the last when
  /// `final_linear`, otherwise all of them.
  Tensor operator()(Tensor x, bool final_linear = true) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (!final_linear || i + 1 < layers.size()) x = activate(activation, x);
    }
    return x;
  }
  std::size_t out_dim(std::size_t in) const { return layers.empty() ? in : layers.back().out_dim(); }
};

struct Encoded {
  dist::ZPosterior z;
  std::optional<dist::SPosterior> s;
};

struct ForwardResult {
  Encoded posterior;
  Tensor z_sample;
  std::optional<Tensor> s_sample;
  Tensor xhat;
  Tensor recon;                // [batch]
  Tensor kl_z;                 // [batch]
  std::optional<Tensor> kl_s;  // [batch]
  double recon_constant = 0.0; // M/2 log(2 pi sigma^2) for the normal likelihood, else 0
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    nd::RngStream rng(seed);
    const auto& s = spec_;
    encoder_ = Mlp(s.input_dim, s.encoder_hidden, 0, s.hidden_activation, rng);
    const std::size_t h = s.encoder_hidden.empty() ? s.input_dim : s.encoder_hidden.back();
    mu_head_ = Linear(h, s.latent_dim, rng);
    scale_head_ = Linear(h, s.latent_dim, rng, /*zero_init=*/true);
    if (s.variant == Variant::eavae_gamma) {
      s_encoder_ = Mlp(s.input_dim, s.encoder_hidden, 0, s.hidden_activation, rng);
      theta_head_ = Linear(h, 1, rng, /*zero_init=*/true);
    }
    decoder_ = Mlp(s.z_dim(), s.decoder_hidden, s.input_dim, s.hidden_activation, rng);
  }

  const ModelSpec& spec() const { return spec_; }

  /// Parameter tensors in declaration order (the checkpoint order).
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    auto add = [&](const Linear& l) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    };
    for (const auto& l : encoder_.layers) add(l);
    add(mu_head_);
    add(scale_head_);
    if (spec_.variant == Variant::eavae_gamma) {
      for (const auto& l : s_encoder_.layers) add(l);
      add(theta_head_);
    }
    for (const auto& l : decoder_.layers) add(l);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    auto add = [&](const std::string& base) {
      out.push_back(base + ".weight");
      out.push_back(base + ".bias");
    };
    for (std::size_t i = 0; i < encoder_.layers.size(); ++i) add("encoder." + std::to_string(i));
    add("mu_head");
    add("scale_head");
    if (spec_.variant == Variant::eavae_gamma) {
      for (std::size_t i = 0; i < s_encoder_.layers.size(); ++i) add("s_encoder." + std::to_string(i));
      add("theta_head");
    }
    for (std::size_t i = 0; i < decoder_.layers.size(); ++i) add("decoder." + std::to_string(i));
    return out;
  }

  /// Zeroes the mean heads as well, so every posterior equals the prior.
  void zero_heads() {
    for (auto* l : {&mu_head_, &scale_head_}) {
      std::fill(l->weight.mutable_data().begin(), l->weight.mutable_data().end(), 0.0);
      std::fill(l->bias.mutable_data().begin(), l->bias.mutable_data().end(), 0.0);
    }
    if (spec_.variant == Variant::eavae_gamma) {
      std::fill(theta_head_.weight.mutable_data().begin(), theta_head_.weight.mutable_data().end(), 0.0);
      std::fill(theta_head_.bias.mutable_data().begin(), theta_head_.bias.mutable_data().end(), 0.0);
    }
  }

  /// x: [batch, input_dim].
  Encoded encode(const Tensor& x) const {
    check_input(x, "encode");
    const Tensor in = spec_.center_input ? x - nd::mean(x, 1, true) : x;
    const Tensor h = encoder_(in, /*final_linear=*/false);
    const Tensor mu = mu_head_(h);
    const Tensor ls = scale_head_(h);
    Encoded out;
    out.z.family = spec_.z_family_enum();
    const std::size_t zd = spec_.z_dim();
    if (spec_.homogeneous()) {
      out.z.mu = nd::slice(mu, 1, 0, zd);
      out.z.log_scale = nd::slice(ls, 1, 0, zd);
      out.s = dist::SPosterior{spec_.s_family(), nd::slice(mu, 1, zd, zd + 1), nd::slice(ls, 1, zd, zd + 1)};
    } else {
      out.z.mu = mu;
      out.z.log_scale = ls;
    }
    if (spec_.variant == Variant::eavae_gamma) {
      const Tensor hs = s_encoder_(in, /*final_linear=*/false);
      const Tensor log_theta = nd::add_scalar(theta_head_(hs), std::log(dist::kGammaPriorTheta));
      out.s = dist::SPosterior{dist::SFamily::gamma_k2, Tensor::zeros(log_theta.shape()), log_theta};
    }
    return out;
  }

  /// f(z) before scaling and output activation: [batch, input_dim].
  Tensor decode_pre(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != spec_.z_dim())
      throw nd::ShapeError("decode", z.shape(), {z.rank() == 2 ? z.dim(0) : 1, spec_.z_dim()});
    return decoder_(z);
  }

  /// VAE: h(f(z)); EA-VAE: h(s * f(z)) with s [batch, 1] broadcast over pixels.
  Tensor decode(const Tensor& z, const std::optional<Tensor>& s = std::nullopt) const {
    Tensor pre = decode_pre(z);
    if (spec_.has_s()) {
      if (!s) throw std::invalid_argument("decode: explaining-away model needs an s sample");
      if (s->rank() != 2 || s->dim(1) != 1 || s->dim(0) != z.dim(0))
        throw nd::ShapeError("decode(s)", s->shape(), {z.dim(0), 1});
      pre = pre * *s;
    }
    return activate(spec_.output_activation, pre);
  }

  /// Single-sample Monte Carlo pass with every loss term populated.
  ForwardResult forward(const Tensor& x, nd::RngStream& rng) const {
    ForwardResult r;
    r.posterior = encode(x);
    r.z_sample = dist::rsample(r.posterior.z, rng);
    if (r.posterior.s) r.s_sample = dist::rsample_s(*r.posterior.s, rng);
    r.xhat = decode(r.z_sample, r.s_sample);
    const auto lik = spec_.likelihood_enum();
    r.recon = dist::recon(lik, x, r.xhat, spec_.sigma_obs);
    r.recon_constant = lik == dist::Likelihood::normal ? dist::normal_log_constant(spec_.input_dim, spec_.sigma_obs) : 0.0;
    r.kl_z = dist::kl_z(r.posterior.z);
    if (r.posterior.s) r.kl_s = dist::kl_s(*r.posterior.s);
    return r;
  }

 private:
  void check_input(const Tensor& x, const char* op) const {
    if (x.rank() != 2 || x.dim(1) != spec_.input_dim)
      throw nd::ShapeError(op, x.shape(), {x.rank() == 2 ? x.dim(0) : 1, spec_.input_dim});
  }

  ModelSpec spec_;
  Mlp encoder_;
  Linear mu_head_;
  Linear scale_head_;
  Mlp s_encoder_;
  Linear theta_head_;
  Mlp decoder_;
};

/// Decode one latent point. `s` is ignored by the standard VAE.
inline std::vector<double> generate(const Model& model, std::span<const double> z, double s = 1.0) {
  nd::NoGradGuard guard;
  const Tensor zt({1, z.size()}, {z.begin(), z.end()});
  std::optional<Tensor> st;
  if (model.spec().has_s()) st = Tensor::matrix(1, 1, {s});
  return model.decode(zt, st).values();
}

struct GridPoint {
  std::vector<double> z;
  double s = 1.0;
  double contrast = 0.0;
};

/// Decodes the Cartesian product of per-dimension coordinate lists at fixed s
/// and reports each image's contrast.
inline std::vector<GridPoint> latent_grid_contrast(const Model& model, const std::vector<std::vector<double>>& axes,
                                                   double s = 1.0) {
  const std::size_t d = model.spec().z_dim();
  if (axes.size() != d) {
    throw std::invalid_argument("latent_grid_contrast: grid has " + std::to_string(axes.size()) +
                                " axes but the model has " + std::to_string(d) + " z dimensions");
  }
  std::size_t total = 1;
  for (const auto& a : axes) {
    if (a.empty()) throw std::invalid_argument("latent_grid_contrast: empty axis");
    total *= a.size();
  }
  std::vector<GridPoint> out;
  out.reserve(total);
  std::vector<std::size_t> counter(d, 0);
  for (std::size_t n = 0; n < total; ++n) {
    GridPoint p;
    p.s = s;
    for (std::size_t k = 0; k < d; ++k) p.z.push_back(axes[k][counter[k]]);
    p.contrast = num::pixel_contrast(generate(model, p.z, s));
    out.push_back(std::move(p));
    for (std::size_t k = d; k-- > 0;) {
      if (++counter[k] < axes[k].size()) break;
      counter[k] = 0;
    }
  }
  return out;
}

/// Contrast of images decoded on a shell of the given radius (random
/// directions), e.g. 2 prior standard deviations.
inline std::vector<GridPoint> latent_shell_contrast(const Model& model, std::size_t n_directions, double radius,
                                                    double s, nd::RngStream& rng) {
  const std::size_t d = model.spec().z_dim();
  std::vector<GridPoint> out;
  for (std::size_t n = 0; n < n_directions; ++n) {
    GridPoint p;
    p.s = s;
    p.z = rng.normal_vector(d);
    const double nrm = num::norm(p.z);
    for (auto& v : p.z) v *= radius / nrm;
    p.contrast = num::pixel_contrast(generate(model, p.z, s));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace eavae::models

#pragma once

// ELBO assembly, the optimization loop with validation early stopping, and
// checkpoint persistence.

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "io.hpp"
#include "models.hpp"
#include "ndgrad/ndgrad.hpp"

namespace eavae::training {

namespace nd = ndgrad;
using models::Model;
using models::ModelSpec;
using nd::Tensor;

/// Piecewise-linear weight over epochs: `start` before ramp_begin, `end` from
/// ramp_end on, linear in between. A constant schedule has start == end.
struct Schedule {
  double start = 1.0;
  double end = 1.0;
  std::size_t ramp_begin = 0;
  std::size_t ramp_end = 0;

  static Schedule constant(double v) { return {v, v, 0, 0}; }

  double at(std::size_t epoch) const {
    if (epoch < ramp_begin) return start;
    if (epoch >= ramp_end) return end;
    const double t = static_cast<double>(epoch - ramp_begin) / static_cast<double>(ramp_end - ramp_begin);
    return start + t * (end - start);
  }
  double final_value() const { return end; }

  void validate(const char* name) const {
    if (!(start >= 0 && end >= 0)) throw std::invalid_argument(std::string(name) + ": weights must be >= 0");
    if (ramp_end < ramp_begin) throw std::invalid_argument(std::string(name) + ": ramp_end before ramp_begin");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Schedule, start, end, ramp_begin, ramp_end)

struct TrainConfig {
  Schedule beta1 = Schedule::constant(1.0);
  Schedule beta2 = Schedule::constant(1.0);
  /// When true the schedules hold beta' = 2 sigma_obs^2 beta (normal likelihood only).
  bool beta_prime = false;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  std::size_t patience = 0;  // 0: run every epoch, keep the best
  double val_fraction = 0.2;
  double grad_clip = 0.0;    // global-norm clip; 0 disables

  void validate() const {
    beta1.validate("beta1");
    beta2.validate("beta2");
    if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("val_fraction must lie in (0,1)");
    if (grad_clip < 0) throw std::invalid_argument("grad_clip must be >= 0");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, beta1, beta2, beta_prime, lr, weight_decay, epochs,
                                                batch_size, seed, patience, val_fraction, grad_clip)

/// Standard annealing: VAE beta1 0.01 -> 1 and EA-VAE beta2 10 -> 1 over epochs 100-200.
inline Schedule vae_beta1_schedule() { return {0.01, 1.0, 100, 200}; }
inline Schedule eavae_beta2_schedule() { return {10.0, 1.0, 100, 200}; }

struct Betas {
  double beta1 = 1.0;
  double beta2 = 1.0;
};

/// Loss weights applied to the KL terms at `epoch` (beta' converted to beta).
inline Betas betas_at(const TrainConfig& cfg, const ModelSpec& spec, std::optional<std::size_t> epoch) {
  Betas b{epoch ? cfg.beta1.at(*epoch) : cfg.beta1.final_value(), epoch ? cfg.beta2.at(*epoch) : cfg.beta2.final_value()};
  if (cfg.beta_prime && spec.likelihood_enum() == dist::Likelihood::normal) {
    const double k = 2.0 * spec.sigma_obs * spec.sigma_obs;
    b.beta1 /= k;
    b.beta2 /= k;
  }
  return b;
}

struct LossTerms {
  Tensor total;  // differentiable scalar
  double recon = 0;
  double kl_z = 0;
  double kl_s = 0;
  double beta1 = 0;
  double beta2 = 0;
  double total_value() const { return total.item(); }
};

/// Batch mean of recon + beta1 KL_z + beta2 KL_s. `epoch` = nullopt uses the
/// final schedule values.
inline LossTerms elbo_loss(const Tensor& batch, const Model& model, std::optional<std::size_t> epoch,
                           const TrainConfig& cfg, nd::RngStream& rng) {
  const auto r = model.forward(batch, rng);
  const Betas b = betas_at(cfg, model.spec(), epoch);
  LossTerms t;
  t.beta1 = b.beta1;
  t.beta2 = b.beta2;
  const Tensor recon = nd::mean(r.recon);
  const Tensor klz = nd::mean(r.kl_z);
  Tensor total = recon + nd::scale(klz, b.beta1);
  t.recon = recon.item();
  t.kl_z = klz.item();
  if (r.kl_s) {
    const Tensor kls = nd::mean(*r.kl_s);
    total = total + nd::scale(kls, b.beta2);
    t.kl_s = kls.item();
  }
  t.total = total;
  return t;
}

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  std::size_t epoch = 0;
  double recon = 0;
  double kl_z = 0;
  double kl_s = 0;
  double total = 0;
  double val_total = 0;
};

// ---- generic loop ----

/// One minibatch objective over training rows; returns a differentiable scalar.
using BatchLoss = std::function<Tensor(std::span<const std::size_t> rows, std::size_t epoch, nd::RngStream& rng,
                                       EpochLog& accumulate)>;
/// Validation objective after an epoch (deterministic).
using ValLoss = std::function<double()>;

struct FitResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  double initial_val = 0;
};

/// Adam over `params` with seeded shuffled minibatches. The parameters of the
/// epoch with the lowest validation loss (earliest on ties) are restored.
inline FitResult fit(std::vector<Tensor> params, std::size_t n_train, const TrainConfig& cfg,
                     const BatchLoss& batch_loss, const ValLoss& val_loss,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (n_train == 0) throw std::invalid_argument("fit: empty training set");
  nd::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  nd::AdamState state(acfg, params);
  nd::RngStream shuffle_rng(cfg.seed ^ 0x5eed5eedULL);
  nd::RngStream sample_rng(cfg.seed);

  FitResult out;
  {
    nd::NoGradGuard g;
    out.initial_val = val_loss();
  }
  std::vector<std::vector<double>> best;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    EpochLog acc;
    acc.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t begin = 0, step = 0; begin < n_train; begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(begin + cfg.batch_size, n_train);
      nd::zero_grad(params);
      EpochLog terms;
      Tensor loss = batch_loss(std::span(order).subspan(begin, end - begin), epoch, sample_rng, terms);
      if (!std::isfinite(loss.item())) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << ", step " << step << " (recon " << terms.recon << ", kl_z "
           << terms.kl_z << ", kl_s " << terms.kl_s << ")";
        throw TrainingError(os.str());
      }
      loss.backward();
      if (cfg.grad_clip > 0) {
        const double gn = nd::grad_norm(params);
        if (!std::isfinite(gn))
          throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
        if (gn > cfg.grad_clip)
          for (auto& p : params)
            for (auto& g : p.mutable_grad()) g *= cfg.grad_clip / gn;
      }
      nd::adam_step(params, state);
      acc.recon += terms.recon;
      acc.kl_z += terms.kl_z;
      acc.kl_s += terms.kl_s;
      acc.total += terms.total;
      ++batches;
    }
    acc.recon /= batches;
    acc.kl_z /= batches;
    acc.kl_s /= batches;
    acc.total /= batches;
    {
      nd::NoGradGuard g;
      acc.val_total = val_loss();
    }
    if (!std::isfinite(acc.val_total))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    out.log.push_back(acc);
    if (on_epoch) on_epoch(acc);
    if (acc.val_total < out.best_val) {
      out.best_val = acc.val_total;
      out.best_epoch = epoch;
      best.clear();
      for (const auto& p : params) best.push_back(p.values());
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(best[i].begin(), best[i].end(), params[i].mutable_data().begin());
  return out;
}

// ---- ELBO training ----

struct EvalTerms {
  double recon = 0;
  double kl_z = 0;
  double kl_s = 0;
  double total = 0;
};

/// Mean loss terms over a dataset with a fixed sampling seed, evaluated with
/// the final schedule weights (or those of `epoch`).
inline EvalTerms evaluate(const Model& model, const data::Dataset& ds, const TrainConfig& cfg, std::uint64_t seed,
                          std::optional<std::size_t> epoch = std::nullopt, std::size_t batch = 512) {
  nd::NoGradGuard g;
  nd::RngStream rng(seed);
  EvalTerms acc;
  for (std::size_t begin = 0; begin < ds.n; begin += batch) {
    const std::size_t end = std::min(begin + batch, ds.n);
    const auto t = elbo_loss(ds.batch(begin, end), model, epoch, cfg, rng);
    const double w = static_cast<double>(end - begin) / static_cast<double>(ds.n);
    acc.recon += w * t.recon;
    acc.kl_z += w * t.kl_z;
    acc.kl_s += w * t.kl_s;
    acc.total += w * t.total_value();
  }
  return acc;
}

struct Checkpoint {
  ModelSpec spec;
  TrainConfig config;
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::vector<double>> params;
  std::size_t best_epoch = 0;
  double best_val = 0;
  std::uint64_t seed = 0;

  static Checkpoint from_model(const Model& m, const TrainConfig& cfg) {
    Checkpoint c;
    c.spec = m.spec();
    c.config = cfg;
    c.names = m.parameter_names();
    c.seed = cfg.seed;
    for (const auto& p : m.parameters()) {
      c.shapes.push_back(p.shape());
      c.params.push_back(p.values());
    }
    return c;
  }

  /// Builds the model and copies the stored parameters into it.
  Model model() const {
    Model m(spec, seed);
    auto ps = m.parameters();
    if (ps.size() != params.size()) throw io::FormatError("checkpoint: parameter count does not match the model spec");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].shape() != shapes[i] || ps[i].size() != params[i].size())
        throw io::FormatError("checkpoint: shape mismatch for " + names[i]);
      std::copy(params[i].begin(), params[i].end(), ps[i].mutable_data().begin());
    }
    return m;
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  double initial_val = 0;
};

/// Trains on `train_set`, early-stopping on `val_set`. The model is left at
/// the best-validation parameters.
inline TrainResult train(Model& model, const data::Dataset& train_set, const data::Dataset& val_set,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train_set.dim() != model.spec().input_dim || val_set.dim() != model.spec().input_dim)
    throw nd::ShapeError("train: dataset image size differs from the model input size");
  const auto params = model.parameters();
  const std::uint64_t val_seed = cfg.seed + 1;
  BatchLoss batch_loss = [&](std::span<const std::size_t> rows, std::size_t epoch, nd::RngStream& rng, EpochLog& t) {
    auto terms = elbo_loss(train_set.batch(rows), model, epoch, cfg, rng);
    t.recon = terms.recon;
    t.kl_z = terms.kl_z;
    t.kl_s = terms.kl_s;
    t.total = terms.total_value();
    return terms.total;
  };
  ValLoss val_loss = [&] { return evaluate(model, val_set, cfg, val_seed).total; };
  const auto fr = fit(params, train_set.n, cfg, batch_loss, val_loss, on_epoch);
  TrainResult r;
  r.checkpoint = Checkpoint::from_model(model, cfg);
  r.checkpoint.best_epoch = fr.best_epoch;
  r.checkpoint.best_val = fr.best_val;
  r.log = fr.log;
  r.initial_val = fr.initial_val;
  return r;
}

/// Seeded 80/20 (by default) split, then train.
inline TrainResult train(Model& model, const data::Dataset& ds, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  nd::RngStream rng(cfg.seed ^ 0x511eULL);
  const auto [tr, va] = data::split(ds, 1.0 - cfg.val_fraction, rng);
  return train(model, tr, va, cfg, on_epoch);
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<EpochLog>& log,
                           const io::Stamp& stamp) {
  io::CsvWriter w(path, {"epoch", "recon", "kl_z", "kl_s", "total", "val_total"}, &stamp);
  for (const auto& e : log) w.row(e.epoch, e.recon, e.kl_z, e.kl_s, e.total, e.val_total);
}

// ---- checkpoint files ----

inline constexpr const char* kCheckpointMagic = "EAVAECP1";
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c, const io::Stamp& stamp = {}) {
  io::json shapes = io::json::array();
  for (std::size_t i = 0; i < c.params.size(); ++i) shapes.push_back({{"name", c.names[i]}, {"shape", c.shapes[i]}});
  io::json h = {{"model", c.spec},
                {"train", c.config},
                {"tensors", shapes},
                {"best_epoch", c.best_epoch},
                {"best_val", c.best_val},
                {"seed", c.seed},
                {"meta", stamp.to_json()}};
  std::vector<std::span<const double>> blobs(c.params.begin(), c.params.end());
  io::write_container(path, kCheckpointMagic, kCheckpointVersion, h, blobs);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto f = io::read_container(path, kCheckpointMagic, kCheckpointVersion);
  Checkpoint c;
  try {
    c.spec = f.header.at("model").get<ModelSpec>();
    c.config = f.header.at("train").get<TrainConfig>();
    c.best_epoch = f.header.at("best_epoch").get<std::size_t>();
    c.best_val = f.header.at("best_val").get<double>();
    c.seed = f.header.at("seed").get<std::uint64_t>();
    for (const auto& t : f.header.at("tensors")) {
      c.names.push_back(t.at("name").get<std::string>());
      c.shapes.push_back(t.at("shape").get<std::vector<std::size_t>>());
    }
  } catch (const io::json::exception& e) {
    throw io::FormatError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (c.names.size() != f.blobs.size()) throw io::FormatError(path.string() + ": tensor table does not match payload");
  for (std::size_t i = 0; i < c.names.size(); ++i)
    if (nd::numel(c.shapes[i]) != f.blobs[i].size())
      throw io::FormatError(path.string() + ": tensor " + c.names[i] + " has the wrong element count");
  c.params = std::move(f.blobs);
  // validate the shape table against the architecture
  (void)c.model();
  return c;
}

}  // namespace eavae::training

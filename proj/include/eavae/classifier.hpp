#pragma once

// Digit classifier on posterior samples and its predictive-entropy experiments.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "data.hpp"
#include "eval.hpp"
#include "models.hpp"
#include "ndgrad/ndgrad.hpp"

namespace eavae::classifier {

namespace nd = ndgrad;
using models::Model;
using nd::Tensor;

struct MlpSpec {
  std::vector<std::size_t> hidden{50, 50};
  std::size_t n_classes = 10;
  std::size_t epochs = 1000;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  bool resample = true;   // fresh posterior samples every epoch
  bool include_s = true;  // append the s sample for explaining-away models
  std::size_t n_samples = 64;  // posterior samples per entropy report
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MlpSpec, hidden, n_classes, epochs, batch_size, lr, resample,
                                                include_s, n_samples)

class Classifier {
 public:
  Classifier() = default;
  Classifier(std::size_t input_dim, const MlpSpec& spec, std::uint64_t seed) : spec_(spec), input_dim_(input_dim) {
    nd::RngStream rng(seed);
    net_ = models::Mlp(input_dim, spec.hidden, spec.n_classes, models::Activation::relu, rng);
  }

  const MlpSpec& spec() const { return spec_; }
  std::size_t input_dim() const { return input_dim_; }

  Tensor logits(const Tensor& x) const { return net_(x); }
  /// Row-wise class probabilities.
  Tensor probabilities(const Tensor& x) const { return nd::softmax(logits(x)); }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : net_.layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

 private:
  MlpSpec spec_;
  std::size_t input_dim_ = 0;
  models::Mlp net_;
};

/// Mean cross-entropy of integer labels under logits [batch, classes].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<double> onehot(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i) onehot[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  return nd::neg(nd::scale(nd::sum(nd::log_softmax(logits) * Tensor({b, k}, std::move(onehot))),
                           1.0 / static_cast<double>(b)));
}

/// Source of classifier inputs: one fresh feature row per image per call.
using FeatureSampler = std::function<std::vector<double>(nd::RngStream&)>;

/// Trains on feature rows from `sample` (n rows of `dim`), one draw per epoch
/// (or a single draw when resampling is off).
inline Classifier train_on_features(const FeatureSampler& sample, std::size_t n, std::size_t dim,
                                    std::span<const int> labels, const MlpSpec& spec, std::uint64_t seed) {
  if (labels.size() != n) throw std::invalid_argument("train_mlp: label count differs from sample count");
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() != spec.n_classes || *distinct.begin() != 0 ||
      *distinct.rbegin() != static_cast<int>(spec.n_classes) - 1)
    throw std::invalid_argument("train_mlp: expected labels 0.." + std::to_string(spec.n_classes - 1) + ", found " +
                                std::to_string(distinct.size()) + " distinct labels");
  Classifier clf(dim, spec, seed);
  auto params = clf.parameters();
  nd::AdamConfig acfg;
  acfg.lr = spec.lr;
  nd::AdamState state(acfg, params);
  nd::RngStream rng(seed + 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> feats = sample(rng);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    if (spec.resample && epoch > 0) feats = sample(rng);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t begin = 0; begin < n; begin += spec.batch_size) {
      const std::size_t end = std::min(begin + spec.batch_size, n);
      std::vector<double> xb;
      std::vector<int> yb;
      for (std::size_t k = begin; k < end; ++k) {
        xb.insert(xb.end(), feats.begin() + order[k] * dim, feats.begin() + (order[k] + 1) * dim);
        yb.push_back(labels[order[k]]);
      }
      nd::zero_grad(params);
      Tensor loss = cross_entropy(clf.logits(Tensor({end - begin, dim}, std::move(xb))), yb);
      loss.backward();
      nd::adam_step(params, state);
    }
  }
  return clf;
}

/// Frozen-encoder posterior sampler over a set of images.
class PosteriorSampler {
 public:
  PosteriorSampler(const Model& model, std::span<const double> pixels, bool include_s) : include_s_(include_s) {
    nd::NoGradGuard guard;
    const std::size_t m = model.spec().input_dim;
    n_ = pixels.size() / m;
    enc_ = model.encode(Tensor({n_, m}, {pixels.begin(), pixels.end()}));
    dim_ = model.spec().z_dim() + (with_s() ? 1 : 0);
  }

  std::size_t n() const { return n_; }
  std::size_t dim() const { return dim_; }
  bool with_s() const { return include_s_ && enc_.s.has_value(); }

  /// One posterior sample per image, [n, dim] row-major.
  std::vector<double> operator()(nd::RngStream& rng) const {
    nd::NoGradGuard guard;
    const Tensor z = dist::rsample(enc_.z, rng);
    if (!with_s()) return z.values();
    const Tensor s = dist::rsample_s(*enc_.s, rng);
    return nd::concat({z, s}, 1).values();
  }

 private:
  bool include_s_;
  std::size_t n_ = 0, dim_ = 0;
  models::Encoded enc_;
};

inline Classifier train_mlp(const Model& model, const data::Dataset& ds, const MlpSpec& spec, std::uint64_t seed) {
  if (!ds.has_labels()) throw std::invalid_argument("train_mlp: dataset has no labels");
  const PosteriorSampler sampler(model, ds.pixels, spec.include_s);
  return train_on_features(sampler, sampler.n(), sampler.dim(), ds.labels, spec, seed);
}

/// H(w) = -sum w log w in nats, 0 log 0 = 0.
inline double entropy(std::span<const double> w) {
  double h = 0;
  for (double p : w)
    if (p > 0) h -= p * std::log(p);
  return std::max(0.0, h);
}

struct Prediction {
  std::vector<double> mean_probs;  // averaged over posterior samples
  double entropy = 0;
};

/// Averaged predictive distribution over `n_samples` posterior draws per image.
inline std::vector<Prediction> predictive_entropy(const Classifier& clf, const Model& model,
                                                  std::span<const double> pixels, std::size_t n_samples,
                                                  std::uint64_t seed) {
  if (n_samples == 0) throw std::invalid_argument("predictive_entropy: n_samples must be >= 1");
  nd::NoGradGuard guard;
  const PosteriorSampler sampler(model, pixels, clf.spec().include_s);
  if (sampler.dim() != clf.input_dim()) throw nd::ShapeError("predictive_entropy: classifier input size mismatch");
  const std::size_t k = clf.spec().n_classes;
  std::vector<Prediction> out(sampler.n());
  for (auto& p : out) p.mean_probs.assign(k, 0.0);
  nd::RngStream rng(seed);
  for (std::size_t t = 0; t < n_samples; ++t) {
    const auto probs = clf.probabilities(Tensor({sampler.n(), sampler.dim()}, sampler(rng)));
    const auto& v = probs.values();
    for (std::size_t i = 0; i < sampler.n(); ++i)
      for (std::size_t c = 0; c < k; ++c) out[i].mean_probs[c] += v[i * k + c] / static_cast<double>(n_samples);
  }
  for (auto& p : out) p.entropy = entropy(p.mean_probs);
  return out;
}

inline double accuracy(const Classifier& clf, const Model& model, const data::Dataset& ds, std::size_t n_samples,
                       std::uint64_t seed) {
  const auto preds = predictive_entropy(clf, model, ds.pixels, n_samples, seed);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    const auto& w = preds[i].mean_probs;
    hit += static_cast<int>(std::max_element(w.begin(), w.end()) - w.begin()) == ds.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(ds.n);
}

struct EntropyCurves {
  std::vector<double> lambdas;
  std::vector<std::pair<int, int>> pairs;
  std::vector<std::vector<double>> entropy;  // [pair][lambda]
  std::vector<double> intermediate_sum;      // sum over 0 < lambda < 1
};

/// Entropy along morphs between decoded prototypes, for every label pair.
inline EntropyCurves morph_entropy_curves(const Classifier& clf, const Model& model,
                                          const std::vector<eval::Prototype>& protos, std::span<const double> lambdas,
                                          std::size_t n_samples, std::uint64_t seed) {
  EntropyCurves c;
  c.lambdas.assign(lambdas.begin(), lambdas.end());
  for (std::size_t a = 0; a < protos.size(); ++a)
    for (std::size_t b = a + 1; b < protos.size(); ++b) {
      std::vector<double> pix;
      for (double l : lambdas) {
        const auto img = data::morph(protos[a].image, protos[b].image, l);
        pix.insert(pix.end(), img.begin(), img.end());
      }
      const auto preds = predictive_entropy(clf, model, pix, n_samples, seed);
      std::vector<double> h;
      double mid = 0;
      for (std::size_t k = 0; k < preds.size(); ++k) {
        h.push_back(preds[k].entropy);
        if (lambdas[k] > 0 && lambdas[k] < 1) mid += preds[k].entropy;
      }
      c.pairs.emplace_back(protos[a].label, protos[b].label);
      c.entropy.push_back(std::move(h));
      c.intermediate_sum.push_back(mid);
    }
  return c;
}

/// Paired t-test of summed intermediate entropies, first minus second.
inline eval::TTest compare_entropy(const EntropyCurves& first, const EntropyCurves& second) {
  return eval::paired_t(first.intermediate_sum, second.intermediate_sum);
}

}  // namespace eavae::classifier

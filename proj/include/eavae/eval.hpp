#pragma once

// Measurement battery over trained models: posterior summaries, contrast
// curves, receptive fields, informative units, morphing, corruption, OOD,
// bow-tie dependencies, divisive-normalization fits and test statistics.

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "models.hpp"
#include "ndgrad/ndgrad.hpp"
#include "numeric.hpp"

namespace eavae::eval {

namespace nd = ndgrad;
using data::Dataset;
using data::Image;
using models::Model;
using nd::Tensor;

// ---- posterior summaries ----

/// Per-image posterior summaries, row-major [n, z_dim].
struct Posteriors {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> mu;
  std::vector<double> var;
  std::vector<double> s_mean;  // empty for the standard VAE

  double mu_at(std::size_t i, std::size_t j) const { return mu[i * dim + j]; }
  double var_at(std::size_t i, std::size_t j) const { return var[i * dim + j]; }
  std::span<const double> mu_row(std::size_t i) const { return {mu.data() + i * dim, dim}; }
  bool has_s() const { return !s_mean.empty(); }
};

/// All z dimensions, 0..dim-1.
inline std::vector<std::size_t> all_units(std::size_t dim) {
  std::vector<std::size_t> u(dim);
  std::iota(u.begin(), u.end(), 0);
  return u;
}

/// Encodes images (rows of a flat n*M buffer) in batches. s posterior means
/// of the softplus family are Monte Carlo averages over `s_samples` draws.
inline Posteriors infer(const Model& model, std::span<const double> pixels, std::uint64_t seed = 0,
                        std::size_t s_samples = 64, std::size_t batch = 512) {
  nd::NoGradGuard guard;
  const std::size_t m = model.spec().input_dim;
  if (pixels.size() % m != 0) throw nd::ShapeError("infer: pixel buffer is not a whole number of images");
  Posteriors p;
  p.n = pixels.size() / m;
  p.dim = model.spec().z_dim();
  p.mu.reserve(p.n * p.dim);
  p.var.reserve(p.n * p.dim);
  nd::RngStream rng(seed);
  for (std::size_t begin = 0; begin < p.n; begin += batch) {
    const std::size_t end = std::min(begin + batch, p.n);
    const Tensor x({end - begin, m}, {pixels.begin() + begin * m, pixels.begin() + end * m});
    const auto enc = model.encode(x);
    const auto& mu = enc.z.mu.values();
    const auto var = enc.z.variance();
    p.mu.insert(p.mu.end(), mu.begin(), mu.end());
    p.var.insert(p.var.end(), var.values().begin(), var.values().end());
    if (enc.s) {
      const auto& loc = enc.s->loc.values();
      const auto& ls = enc.s->log_scale.values();
      for (std::size_t r = 0; r < end - begin; ++r)
        p.s_mean.push_back(dist::posterior_mean_s(enc.s->family, loc[r], ls[r], s_samples, rng));
    }
  }
  return p;
}

inline Posteriors infer(const Model& model, const Dataset& ds, std::uint64_t seed = 0, std::size_t s_samples = 64) {
  return infer(model, ds.pixels, seed, s_samples);
}

/// u = mean over the selected z dimensions of the posterior standard deviation.
inline std::vector<double> posterior_widths(const Posteriors& p, std::span<const std::size_t> units) {
  if (units.empty()) throw std::invalid_argument("posterior_widths: empty unit set");
  std::vector<double> u(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    double acc = 0;
    for (auto j : units) acc += std::sqrt(p.var_at(i, j));
    u[i] = acc / static_cast<double>(units.size());
  }
  return u;
}
inline std::vector<double> posterior_widths(const Posteriors& p) { return posterior_widths(p, all_units(p.dim)); }

/// Posterior width of a single image.
inline double posterior_width(const Model& model, std::span<const double> image) {
  return posterior_widths(infer(model, image, 0, 1))[0];
}

// ---- contrast curves ----

struct ContrastCurve {
  std::vector<double> center;  // mean contrast of the bin's images
  std::vector<double> lo, hi;  // contrast range of the bin
  std::vector<std::size_t> count;
  std::vector<double> sm, sv, nv;
  std::vector<double> err_sm, err_sv, err_nv;
  std::size_t dropped_bins = 0;
  std::size_t excluded_images = 0;
};

/// Equal-count bins over contrast. Images with contrast > max_contrast (if
/// given) are excluded; bins with fewer than 2 images are dropped.
inline ContrastCurve contrast_curves(const Posteriors& p, std::span<const double> contrast, std::size_t n_bins,
                                     std::span<const std::size_t> units,
                                     std::optional<double> max_contrast = std::nullopt) {
  if (contrast.size() != p.n) throw std::invalid_argument("contrast_curves: contrast count differs from posteriors");
  if (n_bins == 0) throw std::invalid_argument("contrast_curves: n_bins must be >= 1");
  if (units.empty()) throw std::invalid_argument("contrast_curves: empty unit set");
  std::vector<std::size_t> idx;
  ContrastCurve c;
  for (std::size_t i = 0; i < p.n; ++i) {
    if (max_contrast && contrast[i] > *max_contrast)
      ++c.excluded_images;
    else
      idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return contrast[a] < contrast[b]; });
  const double d = static_cast<double>(units.size());
  for (std::size_t b = 0; b < n_bins; ++b) {
    const std::size_t begin = b * idx.size() / n_bins, end = (b + 1) * idx.size() / n_bins;
    const std::size_t ni = end - begin;
    if (ni < 2) {
      if (ni > 0 || idx.size() > 0) ++c.dropped_bins;
      continue;
    }
    std::vector<double> norms, cs, all_var;
    double nv = 0, sv = 0, err_sv = 0;
    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t i = idx[k];
      double sq = 0;
      for (auto j : units) {
        sq += p.mu_at(i, j) * p.mu_at(i, j);
        all_var.push_back(p.var_at(i, j));
        nv += p.var_at(i, j);
      }
      norms.push_back(std::sqrt(sq));
      cs.push_back(contrast[i]);
    }
    std::vector<double> col(ni);
    for (auto j : units) {
      for (std::size_t k = begin; k < end; ++k) col[k - begin] = p.mu_at(idx[k], j);
      const double v = num::variance(col);
      sv += v;
      err_sv += std::sqrt(2.0 / static_cast<double>(ni - 1)) * v;
    }
    const double sn = std::sqrt(static_cast<double>(ni));
    c.center.push_back(num::mean(cs));
    c.lo.push_back(cs.front());
    c.hi.push_back(cs.back());
    c.count.push_back(ni);
    c.sm.push_back(num::mean(norms));
    c.sv.push_back(sv / d);
    c.nv.push_back(nv / (d * static_cast<double>(ni)));
    c.err_sm.push_back(std::sqrt(num::variance(norms)) / sn);
    c.err_sv.push_back(err_sv / d / std::sqrt(d));
    c.err_nv.push_back(std::sqrt(num::variance(all_var)) / (sn * std::sqrt(d)));
  }
  return c;
}

// ---- receptive fields and informative units ----

/// RF_j = mean_x mu_j(x) x, as a [dim, M] row-major matrix.
inline std::vector<double> sta_receptive_fields(const Posteriors& p, const Dataset& ds) {
  if (p.n != ds.n) throw std::invalid_argument("sta_receptive_fields: posterior count differs from dataset");
  const std::size_t m = ds.dim();
  std::vector<double> rf(p.dim * m, 0.0);
  for (std::size_t i = 0; i < p.n; ++i) {
    const auto x = ds.image(i);
    for (std::size_t j = 0; j < p.dim; ++j) {
      const double w = p.mu_at(i, j);
      double* r = rf.data() + j * m;
      for (std::size_t q = 0; q < m; ++q) r[q] += w * x[q];
    }
  }
  for (auto& v : rf) v /= static_cast<double>(p.n);
  return rf;
}

/// Linear responses L_j(x) = RF_j . x, [n, dim].
inline std::vector<double> linear_responses(std::span<const double> rf, std::size_t dim, const Dataset& ds) {
  const std::size_t m = ds.dim();
  if (rf.size() != dim * m) throw std::invalid_argument("linear_responses: receptive field size mismatch");
  std::vector<double> l(ds.n * dim);
  for (std::size_t i = 0; i < ds.n; ++i)
    for (std::size_t j = 0; j < dim; ++j) l[i * dim + j] = num::dot(rf.subspan(j * m, m), ds.image(i));
  return l;
}

struct TwoMeans {
  std::vector<std::size_t> high;  // indices in the larger-centroid cluster
  std::vector<std::size_t> low;
  double high_centroid = 0;
  double low_centroid = 0;
  bool degenerate = false;
};

/// 1-D 2-means (Lloyd iterations from the extremes).
inline TwoMeans two_means(std::span<const double> scores) {
  TwoMeans r;
  if (scores.empty()) throw std::invalid_argument("two_means: empty input");
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  double lo = *mn, hi = *mx;
  if (lo == hi) {
    r.degenerate = true;
    r.high = all_units(scores.size());
    r.high_centroid = r.low_centroid = lo;
    return r;
  }
  for (int it = 0; it < 1000; ++it) {
    double sl = 0, sh = 0;
    std::size_t nl = 0, nh = 0;
    for (double s : scores) {
      if (std::abs(s - hi) < std::abs(s - lo)) {
        sh += s;
        ++nh;
      } else {
        sl += s;
        ++nl;
      }
    }
    if (nl == 0 || nh == 0) break;
    const double nlo = sl / nl, nhi = sh / nh;
    if (nlo == lo && nhi == hi) break;
    lo = nlo;
    hi = nhi;
  }
  for (std::size_t k = 0; k < scores.size(); ++k) (std::abs(scores[k] - hi) < std::abs(scores[k] - lo) ? r.high : r.low).push_back(k);
  r.high_centroid = hi;
  r.low_centroid = lo;
  if (r.high.empty() || r.low.empty()) {
    r.degenerate = true;
    r.high = all_units(scores.size());
    r.low.clear();
  }
  return r;
}

/// Decodes the posterior-mean latents of `ds` (s at its posterior mean).
inline std::vector<double> decode_means(const Model& model, const Posteriors& p, std::span<const double> mu_override = {}) {
  nd::NoGradGuard guard;
  const Tensor z({p.n, p.dim}, mu_override.empty() ? p.mu : std::vector<double>(mu_override.begin(), mu_override.end()));
  std::optional<Tensor> s;
  if (p.has_s()) s = Tensor({p.n, 1}, p.s_mean);
  return model.decode(z, s).values();
}

struct InformativeUnits {
  std::vector<std::size_t> units;
  std::vector<double> scores;  // per-unit relative reconstruction change
  bool fallback = false;       // clustering degenerate: all units kept
};

/// Score_j = mean over images of ||xhat - xhat_(j)|| / ||xhat||, where unit j
/// is replaced by its mean activation; informative = larger 2-means cluster.
inline InformativeUnits informative_units(const Model& model, const Posteriors& p) {
  const auto base = decode_means(model, p);
  const std::size_t m = model.spec().input_dim;
  InformativeUnits out;
  out.scores.resize(p.dim);
  std::vector<double> mu = p.mu;
  for (std::size_t j = 0; j < p.dim; ++j) {
    std::vector<double> col(p.n);
    for (std::size_t i = 0; i < p.n; ++i) col[i] = p.mu_at(i, j);
    const double mean_j = num::mean(col);
    for (std::size_t i = 0; i < p.n; ++i) mu[i * p.dim + j] = mean_j;
    const auto alt = decode_means(model, p, mu);
    double acc = 0;
    for (std::size_t i = 0; i < p.n; ++i) {
      const std::span<const double> a(base.data() + i * m, m), b(alt.data() + i * m, m);
      double diff = 0;
      for (std::size_t q = 0; q < m; ++q) diff += (a[q] - b[q]) * (a[q] - b[q]);
      const double nb = num::norm(a);
      acc += nb > 0 ? std::sqrt(diff) / nb : std::sqrt(diff);
    }
    out.scores[j] = acc / static_cast<double>(p.n);
    for (std::size_t i = 0; i < p.n; ++i) mu[i * p.dim + j] = p.mu_at(i, j);
  }
  const auto tm = two_means(out.scores);
  out.units = tm.high;
  out.fallback = tm.degenerate;
  return out;
}

// ---- morphing ----

struct QuadFit {
  double a = 0, b = 0, c = 0;  // a l^2 + b l + c
  double vertex() const { return -b / (2 * a); }
  bool concave() const { return a < 0; }
  /// Negative curvature with the maximum inside [0.5 - L/2, 0.5 + L/2].
  bool central_peak(double window) const {
    return concave() && std::abs(vertex() - 0.5) <= window / 2 + 1e-12;
  }
};

inline QuadFit fit_quadratic(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3) throw std::invalid_argument("fit_quadratic: need >= 3 paired points");
  Eigen::MatrixXd a(x.size(), 3);
  Eigen::VectorXd v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    a(i, 0) = x[i] * x[i];
    a(i, 1) = x[i];
    a(i, 2) = 1;
    v(i) = y[i];
  }
  const Eigen::Vector3d coef = a.colPivHouseholderQr().solve(v);
  return {coef(0), coef(1), coef(2)};
}

inline std::vector<double> lambda_grid(std::size_t points = 21) {
  std::vector<double> g(points);
  for (std::size_t k = 0; k < points; ++k) g[k] = static_cast<double>(k) / static_cast<double>(points - 1);
  return g;
}

inline const std::vector<double>& default_windows() {
  static const std::vector<double> w{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  return w;
}

struct MorphPair {
  int a = 0, b = 0;
  std::vector<double> width;  // over the lambda grid
  std::vector<double> s_mean;
  QuadFit fit;
};

struct MorphReport {
  std::vector<double> lambdas;
  std::vector<MorphPair> pairs;
  std::vector<double> windows;
  std::vector<double> central_fraction;  // per window

  std::size_t central_count(double window) const {
    std::size_t k = 0;
    for (const auto& p : pairs) k += p.fit.central_peak(window);
    return k;
  }
};

struct Prototype {
  int label = 0;
  std::vector<double> z;
  double s = 1.0;
  Image image;
};

/// Decoded category prototypes from the average latent mean (and average s
/// posterior mean) of each label.
inline std::vector<Prototype> prototypes(const Model& model, const Dataset& ds, const Posteriors& p) {
  if (!ds.has_labels()) throw std::invalid_argument("prototypes: dataset has no labels");
  std::vector<int> labels(ds.labels.begin(), ds.labels.end());
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  std::vector<Prototype> out;
  for (int l : labels) {
    Prototype pr;
    pr.label = l;
    pr.z.assign(p.dim, 0.0);
    double s = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
      if (ds.labels[i] != l) continue;
      for (std::size_t j = 0; j < p.dim; ++j) pr.z[j] += p.mu_at(i, j);
      if (p.has_s()) s += p.s_mean[i];
      ++cnt;
    }
    for (auto& v : pr.z) v /= static_cast<double>(cnt);
    pr.s = p.has_s() ? s / static_cast<double>(cnt) : 1.0;
    pr.image = models::generate(model, pr.z, pr.s);
    out.push_back(std::move(pr));
  }
  return out;
}

/// Morph curves for every unordered label pair.
inline MorphReport morph_analysis(const Model& model, const std::vector<Prototype>& protos,
                                  std::size_t grid_points = 21, std::uint64_t seed = 0) {
  if (protos.size() < 2) throw std::invalid_argument("morph_analysis: need at least two labels");
  MorphReport r;
  r.lambdas = lambda_grid(grid_points);
  r.windows = default_windows();
  for (std::size_t a = 0; a < protos.size(); ++a)
    for (std::size_t b = a + 1; b < protos.size(); ++b) {
      MorphPair mp;
      mp.a = protos[a].label;
      mp.b = protos[b].label;
      std::vector<double> pix;
      for (double l : r.lambdas) {
        const auto img = data::morph(protos[a].image, protos[b].image, l);
        pix.insert(pix.end(), img.begin(), img.end());
      }
      const auto post = infer(model, pix, seed);
      mp.width = posterior_widths(post);
      mp.s_mean = post.s_mean;
      mp.fit = fit_quadratic(r.lambdas, mp.width);
      r.pairs.push_back(std::move(mp));
    }
  for (double w : r.windows)
    r.central_fraction.push_back(static_cast<double>(r.central_count(w)) / static_cast<double>(r.pairs.size()));
  return r;
}

// ---- corruption ----

enum class Corruption { blur, pixel_noise };

struct CorruptionCurve {
  std::vector<double> levels;
  std::vector<double> mean_width;
  std::vector<double> mean_s;  // empty for the standard VAE
};

inline CorruptionCurve corruption_sweep(const Model& model, const Dataset& ds, Corruption kind,
                                        std::span<const double> levels, std::uint64_t seed = 0) {
  if (!std::is_sorted(levels.begin(), levels.end()))
    throw std::invalid_argument("corruption_sweep: levels must be sorted ascending");
  CorruptionCurve c;
  c.levels.assign(levels.begin(), levels.end());
  for (std::size_t k = 0; k < levels.size(); ++k) {
    nd::RngStream rng(seed + 7919 * k);
    const double lv = levels[k];
    const Dataset cor = data::map_images(
        ds,
        [&](std::span<const double> x) {
          return kind == Corruption::blur ? data::blur(x, ds.side, lv) : data::pixel_noise(x, lv, rng);
        },
        kind == Corruption::blur ? "blur" : "noise");
    const auto post = infer(model, cor, seed);
    c.mean_width.push_back(num::mean(posterior_widths(post)));
    if (post.has_s()) c.mean_s.push_back(num::mean(post.s_mean));
  }
  return c;
}

// ---- out-of-distribution ----

/// Fraction of reference values exceeding `probe`, ties counted as 1/2.
inline double exceedance(std::span<const double> reference, double probe) {
  if (reference.empty()) throw std::invalid_argument("exceedance: empty reference");
  double k = 0;
  for (double v : reference) k += v > probe ? 1.0 : (v == probe ? 0.5 : 0.0);
  return k / static_cast<double>(reference.size());
}

struct OodSource {
  std::string tag;
  std::vector<double> width;
  std::vector<double> s_mean;
  std::vector<double> exceed;  // p(u_ID > u) per image
  double median_width = 0;
  double median_exceedance = 0;
};

struct OodReport {
  OodSource id;
  std::vector<OodSource> sources;
  double id_p90 = 0;
};

inline OodSource summarize_source(const std::string& tag, const Posteriors& p, std::span<const double> id_widths) {
  OodSource s;
  s.tag = tag;
  s.width = posterior_widths(p);
  s.s_mean = p.s_mean;
  for (double u : s.width) s.exceed.push_back(exceedance(id_widths, u));
  s.median_width = num::median(s.width);
  s.median_exceedance = num::median(s.exceed);
  return s;
}

inline OodReport ood_report(const Model& model, const Dataset& id, const std::vector<std::pair<std::string, Dataset>>& ood,
                            std::uint64_t seed = 0) {
  OodReport r;
  const auto pid = infer(model, id, seed);
  const auto wid = posterior_widths(pid);
  r.id = summarize_source("id", pid, wid);
  r.id_p90 = num::quantile(wid, 0.9);
  for (const auto& [tag, ds] : ood) r.sources.push_back(summarize_source(tag, infer(model, ds, seed), wid));
  return r;
}

// ---- bow-tie ----

struct BowtiePair {
  std::size_t conditioning = 0;
  std::size_t conditioned = 0;
  double central_std = 0;
  double flanking_std = 0;
};

/// For random latent pairs (i conditioned on j), splits mu_j into 4 equal-count
/// quantile bins and compares the std of mu_i in bins 2-3 vs bins 1 and 4.
inline std::vector<BowtiePair> bowtie_analysis(std::span<const double> mu, std::size_t n, std::size_t dim,
                                               std::span<const std::size_t> units, std::size_t n_pairs,
                                               nd::RngStream& rng) {
  if (n < 8) throw std::invalid_argument("bowtie_analysis: need at least 8 images");
  if (units.size() < 2) throw std::invalid_argument("bowtie_analysis: need at least two latents");
  std::vector<BowtiePair> out;
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const std::size_t a = rng.index(units.size());
    std::size_t b = rng.index(units.size() - 1);
    if (b >= a) ++b;
    BowtiePair bp{units[a], units[b]};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return mu[x * dim + bp.conditioning] < mu[y * dim + bp.conditioning]; });
    std::vector<double> central, flank;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t bin = r * 4 / n;
      (bin == 1 || bin == 2 ? central : flank).push_back(mu[order[r] * dim + bp.conditioned]);
    }
    bp.central_std = num::stddev(central);
    bp.flanking_std = num::stddev(flank);
    out.push_back(bp);
  }
  return out;
}

// ---- divisive normalization ----

struct NnlsResult {
  std::vector<double> x;
  std::size_t sweeps = 0;
  bool converged = false;
  std::vector<double> objective;  // 0.5 |A x - y|^2 after each sweep (when tracked)
};

/// min |A x - y|^2 s.t. x >= 0 by projected coordinate descent on the normal
/// equations. A is [rows, cols] row-major.
inline NnlsResult nnls(std::span<const double> a, std::span<const double> y, std::size_t rows, std::size_t cols,
                       double tol = 1e-10, std::size_t max_sweeps = 10000, bool track = false) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> am(a.data(), rows, cols);
  const Eigen::Map<const Eigen::VectorXd> ym(y.data(), rows);
  const Eigen::MatrixXd g = am.transpose() * am;
  const Eigen::VectorXd h = am.transpose() * ym;
  const double yy = ym.squaredNorm();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(cols);
  Eigen::VectorXd gx = Eigen::VectorXd::Zero(cols);  // g * x
  NnlsResult r;
  for (r.sweeps = 1; r.sweeps <= max_sweeps; ++r.sweeps) {
    double max_step = 0, max_x = 0;
    for (std::size_t k = 0; k < cols; ++k) {
      if (g(k, k) <= 0) continue;
      const double nk = std::max(0.0, x(k) - (gx(k) - h(k)) / g(k, k));
      const double step = nk - x(k);
      if (step != 0) {
        gx += step * g.col(k);
        x(k) = nk;
      }
      max_step = std::max(max_step, std::abs(step));
      max_x = std::max(max_x, std::abs(nk));
    }
    if (track) r.objective.push_back(0.5 * (x.dot(gx) - 2 * x.dot(h) + yy));
    if (max_step <= tol * std::max(1.0, max_x)) {
      r.converged = true;
      break;
    }
  }
  r.sweeps = std::min(r.sweeps, max_sweeps);
  r.x.assign(x.data(), x.data() + cols);
  return r;
}

struct DnFit {
  std::size_t dim = 0;
  std::vector<double> w;       // [dim, dim], w[j * dim + i] = w_ji (weight of unit j on unit i); diagonal 0
  std::vector<double> sigma2;  // per latent
  std::vector<double> residual_rms;
  std::vector<std::size_t> samples_used;
  std::vector<bool> flagged;   // no sample passed the |z_i| threshold
  std::size_t n_fits = 0;

  double weight(std::size_t j, std::size_t i) const { return w[j * dim + i]; }
};

struct DnOptions {
  double z_threshold = 1e-3;
  std::size_t n_fits = 5;
  double subsample = 0.8;
  std::uint64_t seed = 0;
  double tol = 1e-10;
  std::size_t max_sweeps = 10000;
};

/// Fits (L_i / z_i)^2 = sum_{j != i} w_ji L_j^2 + sigma_i^2 by NNLS for every
/// latent, averaging `n_fits` random-subsample fits.
inline DnFit fit_divisive_normalization(std::span<const double> l, std::span<const double> z, std::size_t n,
                                        std::size_t dim, const DnOptions& opt = {}) {
  if (l.size() != n * dim || z.size() != n * dim) throw std::invalid_argument("fit_divisive_normalization: size mismatch");
  DnFit f;
  f.dim = dim;
  f.n_fits = opt.n_fits;
  f.w.assign(dim * dim, 0.0);
  f.sigma2.assign(dim, 0.0);
  f.residual_rms.assign(dim, 0.0);
  f.samples_used.assign(dim, 0);
  f.flagged.assign(dim, false);
  nd::RngStream rng(opt.seed);
  const std::size_t cols = dim;  // dim-1 weights + intercept
  for (std::size_t i = 0; i < dim; ++i) {
    std::vector<std::size_t> ok;
    for (std::size_t r = 0; r < n; ++r)
      if (std::abs(z[r * dim + i]) > opt.z_threshold) ok.push_back(r);
    f.samples_used[i] = ok.size();
    if (ok.empty()) {
      f.flagged[i] = true;
      continue;
    }
    std::vector<double> acc(cols, 0.0);
    double res = 0;
    for (std::size_t t = 0; t < opt.n_fits; ++t) {
      std::vector<std::size_t> rows = ok;
      std::shuffle(rows.begin(), rows.end(), rng.engine());
      rows.resize(std::max<std::size_t>(1, static_cast<std::size_t>(opt.subsample * static_cast<double>(ok.size()))));
      std::vector<double> a(rows.size() * cols), y(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t r = rows[k];
        std::size_t c = 0;
        for (std::size_t j = 0; j < dim; ++j)
          if (j != i) a[k * cols + c++] = l[r * dim + j] * l[r * dim + j];
        a[k * cols + c] = 1.0;
        const double q = l[r * dim + i] / z[r * dim + i];
        y[k] = q * q;
      }
      const auto sol = nnls(a, y, rows.size(), cols, opt.tol, opt.max_sweeps);
      double ss = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        double pred = 0;
        for (std::size_t c = 0; c < cols; ++c) pred += a[k * cols + c] * sol.x[c];
        ss += (pred - y[k]) * (pred - y[k]);
      }
      res += std::sqrt(ss / static_cast<double>(rows.size()));
      for (std::size_t c = 0; c < cols; ++c) acc[c] += sol.x[c];
    }
    std::size_t c = 0;
    for (std::size_t j = 0; j < dim; ++j)
      if (j != i) f.w[j * dim + i] = acc[c++] / static_cast<double>(opt.n_fits);
    f.sigma2[i] = acc[c] / static_cast<double>(opt.n_fits);
    f.residual_rms[i] = res / static_cast<double>(opt.n_fits);
  }
  return f;
}

/// Slope of posterior means against linear responses across latents for one image.
inline double normalization_index(std::span<const double> linear, std::span<const double> mu) {
  if (num::variance(linear) == 0) throw std::domain_error("normalization_index: zero-variance linear responses");
  return num::fit_line(linear, mu).slope;
}

// ---- statistics ----

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_statistic: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

struct TTest {
  double t = 0;
  double p = 1;
  double mean_diff = 0;
  std::size_t df = 0;
};

/// Paired t-test on a - b with a two-sided p-value.
inline TTest paired_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_t: need at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  TTest r;
  r.df = d.size() - 1;
  r.mean_diff = num::mean(d);
  const double se = num::stddev(d) / std::sqrt(static_cast<double>(d.size()));
  if (se == 0) {
    r.t = r.mean_diff == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.mean_diff);
    r.p = r.mean_diff == 0 ? 1.0 : 0.0;
    return r;
  }
  r.t = r.mean_diff / se;
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace eavae::eval

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "eavae/eval.hpp"

namespace nd = eavae::ndgrad;
namespace m = eavae::models;
namespace d = eavae::data;
namespace e = eavae::eval;
namespace num = eavae::num;

namespace {

m::ModelSpec small_spec(m::Variant v, const std::string& z_family = "laplace") {
  m::ModelSpec s;
  s.input_dim = 16;
  s.latent_dim = 5;
  s.encoder_hidden = {8};
  s.variant = v;
  s.z_family = z_family;
  return s;
}

d::Dataset random_images(std::size_t n, std::size_t side, std::uint64_t seed) {
  nd::RngStream rng(seed);
  d::Dataset ds;
  ds.side = side;
  for (std::size_t i = 0; i < n; ++i) ds.push(rng.normal_vector(side * side));
  ds.refresh_contrast();
  return ds;
}

}  // namespace

TEST(PosteriorWidth, PriorMatchingModels) {
  const auto ds = random_images(6, 4, 1);
  m::Model normal(small_spec(m::Variant::vae, "normal"), 2);
  normal.zero_heads();
  for (double u : e::posterior_widths(e::infer(normal, ds))) EXPECT_DOUBLE_EQ(u, 1.0);
  m::Model laplace(small_spec(m::Variant::eavae_softplus_laplace), 3);
  laplace.zero_heads();
  for (double u : e::posterior_widths(e::infer(laplace, ds))) EXPECT_DOUBLE_EQ(u, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(e::posterior_width(laplace, ds.image(0)), std::sqrt(2.0));
}

TEST(PosteriorWidth, DeterministicForFixedModelAndImage) {
  const auto ds = random_images(3, 4, 4);
  const m::Model model(small_spec(m::Variant::eavae_softplus_laplace), 5);
  const auto a = e::infer(model, ds, 9), b = e::infer(model, ds, 9);
  EXPECT_EQ(a.var, b.var);
  EXPECT_EQ(a.s_mean, b.s_mean);
  EXPECT_EQ(a.n, 3u);
  EXPECT_EQ(a.dim, 4u);
}

namespace {

// Direct evaluation of the binned estimators: bins defined by contrast
// thresholds, everything recomputed from scratch.
struct DirectBin {
  double sm, sv, nv, esm, esv, env;
};

DirectBin direct_bin(const std::vector<std::vector<double>>& mu, const std::vector<std::vector<double>>& var) {
  const double n = mu.size(), dd = mu[0].size();
  std::vector<double> norms;
  for (const auto& r : mu) {
    double s = 0;
    for (double v : r) s += v * v;
    norms.push_back(std::sqrt(s));
  }
  auto var_of = [](const std::vector<double>& v) {
    double mn = 0;
    for (double x : v) mn += x / v.size();
    double s = 0;
    for (double x : v) s += (x - mn) * (x - mn);
    return s / (v.size() - 1);
  };
  DirectBin b{};
  for (double x : norms) b.sm += x / n;
  b.esm = std::sqrt(var_of(norms)) / std::sqrt(n);
  std::vector<double> all;
  for (std::size_t j = 0; j < dd; ++j) {
    std::vector<double> col;
    for (std::size_t i = 0; i < n; ++i) {
      col.push_back(mu[i][j]);
      all.push_back(var[i][j]);
      b.nv += var[i][j] / (n * dd);
    }
    b.sv += var_of(col) / dd;
    b.esv += std::sqrt(2.0 / (n - 1)) * var_of(col) / dd;
  }
  b.esv /= std::sqrt(dd);
  b.env = std::sqrt(var_of(all)) / (std::sqrt(n) * std::sqrt(dd));
  return b;
}

}  // namespace

TEST(ContrastCurves, PlantedPosteriorsMatchDirectFormulas) {
  // 3 contrast groups of 7 images each, 4 latent dims; planted posteriors
  nd::RngStream rng(6);
  e::Posteriors p;
  p.n = 21;
  p.dim = 4;
  std::vector<double> contrast;
  std::vector<std::vector<std::vector<double>>> mus(3), vars(3);
  for (std::size_t i = 0; i < p.n; ++i) {
    const std::size_t g = i % 3;
    contrast.push_back(1.0 + g + 0.01 * static_cast<double>(i));
    std::vector<double> mu_row, var_row;
    for (std::size_t j = 0; j < p.dim; ++j) {
      mu_row.push_back((g + 1) * rng.standard_normal());
      var_row.push_back(rng.uniform(0.1, 2.0));
    }
    p.mu.insert(p.mu.end(), mu_row.begin(), mu_row.end());
    p.var.insert(p.var.end(), var_row.begin(), var_row.end());
    mus[g].push_back(mu_row);
    vars[g].push_back(var_row);
  }
  const auto units = e::all_units(4);
  const auto c = e::contrast_curves(p, contrast, 3, units);
  ASSERT_EQ(c.count.size(), 3u);
  for (std::size_t g = 0; g < 3; ++g) {
    const auto want = direct_bin(mus[g], vars[g]);
    EXPECT_EQ(c.count[g], 7u);
    EXPECT_NEAR(c.sm[g], want.sm, 1e-12);
    EXPECT_NEAR(c.sv[g], want.sv, 1e-12);
    EXPECT_NEAR(c.nv[g], want.nv, 1e-12);
    EXPECT_NEAR(c.err_sm[g], want.esm, 1e-12);
    EXPECT_NEAR(c.err_sv[g], want.esv, 1e-12);
    EXPECT_NEAR(c.err_nv[g], want.env, 1e-12);
    EXPECT_GE(c.err_sm[g], 0);
  }
  std::size_t total = 0;
  for (auto k : c.count) total += k;
  EXPECT_EQ(total, p.n);

  // contrast exclusion and dropped bins
  const auto cut = e::contrast_curves(p, contrast, 3, units, 2.5);
  EXPECT_EQ(cut.excluded_images, 7u);
  const auto tiny = e::contrast_curves(p, contrast, 15, units);
  EXPECT_GT(tiny.dropped_bins, 0u);
}

TEST(ContrastCurves, IdenticalImagesHaveZeroSignalVariance) {
  std::vector<d::Image> same(10, d::Image(16, 0.3));
  d::Dataset ds;
  ds.side = 4;
  nd::RngStream rng(7);
  const auto x = rng.normal_vector(16);
  for (int i = 0; i < 10; ++i) ds.push(x);
  ds.refresh_contrast();
  const m::Model model(small_spec(m::Variant::vae), 8);
  const auto p = e::infer(model, ds);
  const auto c = e::contrast_curves(p, ds.contrast, 1, e::all_units(p.dim));
  EXPECT_EQ(c.sv[0], 0.0);
}

TEST(ContrastCurves, PriorMatchingModelHasPriorNoiseVariance) {
  const auto ds = random_images(60, 4, 9);
  m::Model model(small_spec(m::Variant::eavae_softplus_laplace), 10);
  model.zero_heads();
  const auto p = e::infer(model, ds);
  const auto c = e::contrast_curves(p, ds.contrast, 5, e::all_units(p.dim));
  for (double nv : c.nv) EXPECT_DOUBLE_EQ(nv, 2.0);
  for (double sm : c.sm) EXPECT_EQ(sm, 0.0);
}

TEST(Sta, SingleBasisImage) {
  d::Dataset ds;
  ds.side = 2;
  ds.push(std::vector<double>{1, 0, 0, 0});
  e::Posteriors p;
  p.n = 1;
  p.dim = 3;
  p.mu = {1, 1, 1};
  p.var = {1, 1, 1};
  const auto rf = e::sta_receptive_fields(p, ds);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(rf[j * 4 + 0], 1.0);
    for (std::size_t q = 1; q < 4; ++q) EXPECT_EQ(rf[j * 4 + q], 0.0);
  }
  const auto l = e::linear_responses(rf, 3, ds);
  EXPECT_EQ(l, (std::vector<double>{1, 1, 1}));
}

TEST(InformativeUnits, ConstantUnitScoresZero) {
  const auto ds = random_images(30, 4, 11);
  const m::Model model(small_spec(m::Variant::vae), 12);
  auto p = e::infer(model, ds);
  for (std::size_t i = 0; i < p.n; ++i) p.mu[i * p.dim + 2] = 0.75;
  const auto iu = e::informative_units(model, p);
  EXPECT_EQ(iu.scores[2], 0.0);
  EXPECT_EQ(std::count(iu.units.begin(), iu.units.end(), 2u), 0);
  for (std::size_t j = 0; j < p.dim; ++j)
    if (j != 2) EXPECT_GT(iu.scores[j], 0.0);
}

TEST(InformativeUnits, TwoMeansRecoversPlantedGroups) {
  nd::RngStream rng(13);
  std::vector<double> scores;
  std::vector<std::size_t> want_high;
  for (std::size_t k = 0; k < 40; ++k) {
    const bool high = rng.uniform() < 0.4;
    scores.push_back(high ? rng.uniform(0.5, 0.8) : rng.uniform(0.0, 0.05));
    if (high) want_high.push_back(k);
  }
  const auto tm = e::two_means(scores);
  EXPECT_FALSE(tm.degenerate);
  EXPECT_EQ(tm.high, want_high);
  const auto flat = e::two_means(std::vector<double>(5, 0.2));
  EXPECT_TRUE(flat.degenerate);
  EXPECT_EQ(flat.high.size(), 5u);
}

TEST(Morph, QuadraticFitCases) {
  const auto grid = e::lambda_grid();
  ASSERT_EQ(grid.size(), 21u);
  std::vector<double> peak, mono;
  for (double l : grid) {
    peak.push_back(-(l - 0.5) * (l - 0.5) + 0.3);
    mono.push_back(l);
  }
  const auto f = e::fit_quadratic(grid, peak);
  EXPECT_NEAR(f.a, -1.0, 1e-12);
  EXPECT_NEAR(f.vertex(), 0.5, 1e-12);
  for (double w : e::default_windows()) EXPECT_TRUE(f.central_peak(w));
  const auto g = e::fit_quadratic(grid, mono);
  EXPECT_FALSE(g.central_peak(0.5));

  nd::RngStream rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const double v = rng.uniform(0.3, 0.7);
    std::vector<double> y;
    for (double l : grid) y.push_back(-2.0 * (l - v) * (l - v) + 1.0 + 0.005 * rng.standard_normal());
    EXPECT_NEAR(e::fit_quadratic(grid, y).vertex(), v, 0.02);
  }
}

TEST(Morph, AnalysisCoversAllPairs) {
  d::Dataset ds = random_images(40, 4, 15);
  for (std::size_t i = 0; i < ds.n; ++i) ds.labels.push_back(static_cast<int>(i % 4));
  const m::Model model(small_spec(m::Variant::eavae_lognormal), 16);
  const auto p = e::infer(model, ds);
  const auto protos = e::prototypes(model, ds, p);
  ASSERT_EQ(protos.size(), 4u);
  const auto r = e::morph_analysis(model, protos);
  EXPECT_EQ(r.pairs.size(), 6u);
  EXPECT_EQ(r.pairs[0].width.size(), 21u);
  EXPECT_EQ(r.central_fraction.size(), r.windows.size());
  // endpoints reproduce the prototype widths
  EXPECT_DOUBLE_EQ(r.pairs[0].width[0], e::posterior_width(model, protos[0].image));
  EXPECT_DOUBLE_EQ(r.pairs[0].width[20], e::posterior_width(model, protos[1].image));
}

TEST(Corruption, LevelZeroIsUncorrupted) {
  const auto ds = random_images(20, 4, 17);
  const m::Model model(small_spec(m::Variant::eavae_softplus_laplace), 18);
  const double base = num::mean(e::posterior_widths(e::infer(model, ds)));
  const std::vector<double> levels{0.0, 1.0, 2.0};
  for (auto kind : {e::Corruption::blur, e::Corruption::pixel_noise}) {
    const auto c = e::corruption_sweep(model, ds, kind, levels);
    EXPECT_EQ(c.mean_width[0], base);
    EXPECT_EQ(c.mean_s.size(), 3u);
  }
  EXPECT_THROW(e::corruption_sweep(model, ds, e::Corruption::blur, std::vector<double>{2, 1}), std::invalid_argument);
}

TEST(Corruption, PriorMatchingModelGivesFlatCurve) {
  const auto ds = random_images(20, 4, 19);
  m::Model model(small_spec(m::Variant::vae), 20);
  model.zero_heads();
  const auto c = e::corruption_sweep(model, ds, e::Corruption::pixel_noise, std::vector<double>{0, 0.5, 1, 2});
  for (double w : c.mean_width) EXPECT_DOUBLE_EQ(w, std::sqrt(2.0));
}

TEST(Ood, ExceedanceProperties) {
  nd::RngStream rng(21);
  const auto id = rng.normal_vector(2001);
  std::vector<double> ex;
  for (double u : id) ex.push_back(e::exceedance(id, u));
  EXPECT_NEAR(num::median(ex), 0.5, 1e-3);

  // invariant under a common strictly increasing transform
  std::vector<double> tid;
  for (double v : id) tid.push_back(std::exp(3 * v) + 1);
  for (double probe : {-1.0, 0.0, 0.7, 2.5}) EXPECT_EQ(e::exceedance(id, probe), e::exceedance(tid, std::exp(3 * probe) + 1));

  // constant widths: ties give the tie value
  const std::vector<double> flat(10, 0.4);
  EXPECT_EQ(e::exceedance(flat, 0.4), 0.5);
  EXPECT_EQ(e::exceedance(flat, 0.5), 0.0);
  EXPECT_EQ(e::exceedance(flat, 0.3), 1.0);
}

TEST(Ood, ReportAgainstItself) {
  const auto ds = random_images(101, 4, 22);
  const m::Model model(small_spec(m::Variant::eavae_softplus_laplace), 23);
  const auto r = e::ood_report(model, ds, {{"self", ds}});
  ASSERT_EQ(r.sources.size(), 1u);
  EXPECT_NEAR(r.sources[0].median_exceedance, 0.5, 1e-12);
  EXPECT_EQ(r.sources[0].width, r.id.width);
  for (double u : r.id.width) EXPECT_GT(u, 0);
}

TEST(Bowtie, IndependentVsMultiplicative) {
  nd::RngStream rng(24);
  const std::size_t n = 10000, dim = 2;
  std::vector<double> indep(n * dim), gsm(n * dim), flat(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = 0.7071 * rng.standard_gamma_shape2();
    for (std::size_t j = 0; j < dim; ++j) {
      indep[i * dim + j] = rng.standard_normal();
      gsm[i * dim + j] = s * rng.standard_normal();
      flat[i * dim + j] = j == 0 ? rng.standard_normal() : 1.5;
    }
  }
  const auto units = e::all_units(dim);
  nd::RngStream pr(25);
  for (const auto& bp : e::bowtie_analysis(indep, n, dim, units, 20, pr))
    EXPECT_NEAR(bp.flanking_std / bp.central_std, 1.0, 0.1);
  for (const auto& bp : e::bowtie_analysis(gsm, n, dim, units, 20, pr)) EXPECT_GT(bp.flanking_std, 1.2 * bp.central_std);
  // conditioned latent constant: both stds zero
  for (const auto& bp : e::bowtie_analysis(flat, n, dim, units, 20, pr))
    if (bp.conditioned == 1) {
      EXPECT_EQ(bp.central_std, 0.0);
      EXPECT_EQ(bp.flanking_std, 0.0);
    }
  EXPECT_THROW(e::bowtie_analysis(indep, 7, dim, units, 1, pr), std::invalid_argument);
}

namespace {

// Brute-force NNLS for few columns: best feasible unconstrained solution over
// every support set.
std::vector<double> brute_nnls(const std::vector<double>& a, const std::vector<double>& y, std::size_t rows,
                               std::size_t cols) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_x(cols, 0.0);
  for (std::size_t mask = 0; mask < (1u << cols); ++mask) {
    std::vector<std::size_t> sup;
    for (std::size_t c = 0; c < cols; ++c)
      if (mask & (1u << c)) sup.push_back(c);
    std::vector<double> x(cols, 0.0);
    if (!sup.empty()) {
      Eigen::MatrixXd as(rows, sup.size());
      Eigen::VectorXd ys(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < sup.size(); ++k) as(r, k) = a[r * cols + sup[k]];
        ys(r) = y[r];
      }
      const Eigen::VectorXd sol = as.colPivHouseholderQr().solve(ys);
      if ((sol.array() < 0).any()) continue;
      for (std::size_t k = 0; k < sup.size(); ++k) x[sup[k]] = sol(k);
    }
    double obj = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      double pred = 0;
      for (std::size_t c = 0; c < cols; ++c) pred += a[r * cols + c] * x[c];
      obj += (pred - y[r]) * (pred - y[r]);
    }
    if (obj < best) {
      best = obj;
      best_x = x;
    }
  }
  return best_x;
}

}  // namespace

TEST(Nnls, MatchesBruteForceAndIsMonotone) {
  nd::RngStream rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 30, cols = 5;
    std::vector<double> a(rows * cols), y(rows);
    for (auto& v : a) v = rng.standard_normal();
    for (auto& v : y) v = rng.standard_normal();
    const auto got = e::nnls(a, y, rows, cols, 1e-14, 100000, true);
    const auto want = brute_nnls(a, y, rows, cols);
    for (std::size_t c = 0; c < cols; ++c) {
      EXPECT_GE(got.x[c], 0.0);
      EXPECT_NEAR(got.x[c], want[c], 1e-8);
    }
    for (std::size_t k = 1; k < got.objective.size(); ++k) EXPECT_LE(got.objective[k], got.objective[k - 1] + 1e-12);
  }
}

namespace {

struct PlantedDn {
  std::vector<double> l, z, w, sigma2;
};

PlantedDn plant_dn(std::size_t n, std::size_t dim, double density, std::uint64_t seed, bool zero_w = false) {
  nd::RngStream rng(seed);
  PlantedDn p;
  p.w.assign(dim * dim, 0.0);
  p.sigma2.resize(dim);
  for (std::size_t j = 0; j < dim; ++j)
    for (std::size_t i = 0; i < dim; ++i)
      if (i != j && !zero_w && rng.uniform() < density) p.w[j * dim + i] = rng.uniform(0.2, 1.0);
  for (auto& s : p.sigma2) s = rng.uniform(0.5, 1.5);
  p.l.resize(n * dim);
  p.z.resize(n * dim);
  for (auto& v : p.l) v = rng.standard_normal();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < dim; ++i) {
      double den = p.sigma2[i];
      for (std::size_t j = 0; j < dim; ++j) den += p.w[j * dim + i] * p.l[r * dim + j] * p.l[r * dim + j];
      p.z[r * dim + i] = p.l[r * dim + i] / std::sqrt(den);
    }
  return p;
}

}  // namespace

TEST(DivisiveNormalization, PlantAndRecover) {
  const std::size_t n = 5000, dim = 32;
  const auto p = plant_dn(n, dim, 0.2, 27);
  const auto f = e::fit_divisive_normalization(p.l, p.z, n, dim);
  double err = 0, ref = 0;
  for (std::size_t k = 0; k < dim * dim; ++k) {
    err += (f.w[k] - p.w[k]) * (f.w[k] - p.w[k]);
    ref += p.w[k] * p.w[k];
    ASSERT_GE(f.w[k], 0.0);
  }
  EXPECT_LT(std::sqrt(err / ref), 0.05);
  for (std::size_t i = 0; i < dim; ++i) {
    EXPECT_NEAR(f.sigma2[i] / p.sigma2[i], 1.0, 0.05);
    EXPECT_FALSE(f.flagged[i]);
  }
}

TEST(DivisiveNormalization, DegenerateCases) {
  const std::size_t n = 2000, dim = 6;
  const auto p = plant_dn(n, dim, 0.0, 28, true);
  const auto f = e::fit_divisive_normalization(p.l, p.z, n, dim);
  for (double w : f.w) EXPECT_NEAR(w, 0.0, 1e-6);
  for (std::size_t i = 0; i < dim; ++i) EXPECT_NEAR(f.sigma2[i], p.sigma2[i], 1e-6);

  // pure linear responses: z = L gives w = 0, sigma^2 = 1
  const auto g = e::fit_divisive_normalization(p.l, p.l, n, dim);
  for (double w : g.w) EXPECT_NEAR(w, 0.0, 1e-8);
  for (double s : g.sigma2) EXPECT_NEAR(s, 1.0, 1e-8);

  // a latent that never passes the threshold is flagged
  auto z = p.z;
  for (std::size_t r = 0; r < n; ++r) z[r * dim + 3] = 0.0;
  const auto h = e::fit_divisive_normalization(p.l, z, n, dim);
  EXPECT_TRUE(h.flagged[3]);
  EXPECT_FALSE(h.flagged[2]);
}

TEST(NormalizationIndex, SlopeNotOffset) {
  nd::RngStream rng(29);
  const auto l = rng.normal_vector(20);
  std::vector<double> half, same, affine;
  for (double v : l) {
    half.push_back(0.5 * v);
    same.push_back(v);
    affine.push_back(0.3 * v + 4.0);
  }
  EXPECT_NEAR(e::normalization_index(l, half), 0.5, 1e-12);
  EXPECT_NEAR(e::normalization_index(l, same), 1.0, 1e-12);
  EXPECT_NEAR(e::normalization_index(l, affine), 0.3, 1e-12);
  EXPECT_THROW(e::normalization_index(std::vector<double>(5, 1.0), same), std::domain_error);
}

namespace {

double brute_ks(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pts(a);
  pts.insert(pts.end(), b.begin(), b.end());
  double d = 0;
  for (double t : pts) {
    double fa = 0, fb = 0;
    for (double v : a) fa += v <= t;
    for (double v : b) fb += v <= t;
    d = std::max(d, std::abs(fa / a.size() - fb / b.size()));
  }
  return d;
}

// Two-sided p from integrating the t density numerically.
double t_pvalue_by_quadrature(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * std::numbers::pi);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const double inner = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(pdf, 0.0, std::abs(t), 15, 1e-14);
  return 1.0 - 2.0 * inner;
}

}  // namespace

TEST(Stats, KolmogorovSmirnov) {
  const std::vector<double> a{0.1, 0.5, 0.3, 0.9};
  EXPECT_EQ(e::ks_statistic(a, a), 0.0);
  EXPECT_EQ(e::ks_statistic({1, 2, 3}, {4, 5}), 1.0);
  nd::RngStream rng(30);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = rng.normal_vector(37), y = rng.normal_vector(52);
    for (auto& v : y) v = std::round(v * 4) / 4 + 0.2;  // with ties
    for (auto& v : x) v = std::round(v * 4) / 4;
    EXPECT_NEAR(e::ks_statistic(x, y), brute_ks(x, y), 1e-10);
  }
}

TEST(Stats, PairedT) {
  nd::RngStream rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = rng.normal_vector(45), b = rng.normal_vector(45);
    for (auto& v : a) v += 0.3;
    const auto r = e::paired_t(a, b);
    std::vector<double> diff(45);
    for (std::size_t i = 0; i < 45; ++i) diff[i] = a[i] - b[i];
    const double t = num::mean(diff) / (num::stddev(diff) / std::sqrt(45.0));
    EXPECT_NEAR(r.t, t, 1e-10);
    EXPECT_NEAR(r.p, t_pvalue_by_quadrature(t, 44), 1e-10);
  }
  EXPECT_THROW(e::paired_t(std::vector<double>{1}, std::vector<double>{2}), std::invalid_argument);
  const auto same = e::paired_t(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(same.p, 1.0);
}

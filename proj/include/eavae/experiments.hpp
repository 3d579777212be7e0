#pragma once

// Subcommand pipelines. Each run_* reads a RunConfig, writes stamped CSV/JSON
// into an output directory and returns its JSON summary.

#include <filesystem>
#include <string>
#include <vector>

#include "classifier.hpp"
#include "config.hpp"
#include "data.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "models.hpp"
#include "training.hpp"

namespace eavae::experiments {

namespace fs = std::filesystem;
namespace nd = ndgrad;
using config::RunConfig;
using io::json;

struct Splits {
  data::Dataset train;
  data::Dataset test;
};

/// Materializes the train/test images described by `cfg.data`.
inline Splits make_data(const RunConfig& cfg) {
  const auto& d = cfg.data;
  Splits s;
  if (d.source == "gsm") {
    s.train = data::synth_gsm(d.gsm, d.n_train, cfg.seed * 2 + 11);
    s.test = data::synth_gsm(d.gsm, d.n_test, cfg.seed * 2 + 12);
  } else if (d.source == "mnist") {
    auto all = data::load_idx(d.images, d.labels);
    nd::RngStream rng(cfg.seed ^ 0xda7aULL);
    if (d.augment) all = data::augment_contrast(all, d.contrast, d.augment_sigma, rng, d.augment_factor);
    std::tie(s.train, s.test) = data::split(all, 1.0 - d.test_fraction, rng);
  } else {
    if (d.train_cache.empty() || d.test_cache.empty())
      throw std::invalid_argument("data.source=cache needs data.train_cache and data.test_cache");
    s.train = data::load_dataset(d.train_cache);
    s.test = data::load_dataset(d.test_cache);
  }
  if (d.zscore) {
    s.train = data::zscore_rescale(s.train);
    s.test = data::zscore_rescale(s.test);
  }
  return s;
}

/// Test split, capped at eval.max_images.
inline data::Dataset test_images(const RunConfig& cfg) {
  auto t = make_data(cfg).test;
  if (cfg.eval.max_images == 0 || cfg.eval.max_images >= t.n) return t;
  std::vector<std::size_t> rows(cfg.eval.max_images);
  std::iota(rows.begin(), rows.end(), 0);
  return t.subset(rows);
}

inline fs::path checkpoint_path(const RunConfig& cfg, const fs::path& out) {
  return cfg.checkpoint.empty() ? out / "checkpoint.eavae" : fs::path(cfg.checkpoint);
}

struct Loaded {
  models::Model model;
  std::string hash;
};

inline Loaded load_model(const fs::path& path) {
  if (!fs::exists(path)) throw config::CheckpointMissing("checkpoint not found: " + path.string());
  return {training::load_checkpoint(path).model(), io::file_hash(path)};
}

inline io::Stamp stamp(const RunConfig& cfg, const std::string& checkpoint_hash = "none") {
  return {config::hash(cfg), checkpoint_hash, cfg.seed, io::kToolVersion};
}

inline json finish(const fs::path& path, const std::string& name, json summary, const io::Stamp& st) {
  summary["experiment"] = name;
  summary["meta"] = st.to_json();
  io::write_json(path, summary);
  return summary;
}

inline double prior_variance(const models::ModelSpec& spec) {
  return spec.z_family_enum() == dist::ZFamily::laplace ? 2.0 : 1.0;
}

inline double prior_std(const models::ModelSpec& spec) { return std::sqrt(prior_variance(spec)); }

/// Latent units used by the contrast and DN statistics.
inline eval::InformativeUnits select_units(const models::Model& model, const eval::Posteriors& p, bool informative) {
  if (informative) return eval::informative_units(model, p);
  eval::InformativeUnits u;
  u.units = eval::all_units(p.dim);
  u.scores.assign(p.dim, 0.0);
  return u;
}

// ---- synth-data ----

inline json run_synth_data(const RunConfig& cfg, const fs::path& out) {
  const auto s = make_data(cfg);
  const auto st = stamp(cfg);
  data::save_dataset(out / "train.eavaeds", s.train, st);
  data::save_dataset(out / "test.eavaeds", s.test, st);
  io::CsvWriter csv(out / "synth_contrast.csv", {"split", "index", "contrast"}, &st);
  for (std::size_t i = 0; i < s.train.n; ++i) csv.row("train", i, s.train.contrast[i]);
  for (std::size_t i = 0; i < s.test.n; ++i) csv.row("test", i, s.test.contrast[i]);
  json j = {{"source", cfg.data.source},
            {"side", s.train.side},
            {"n_train", s.train.n},
            {"n_test", s.test.n},
            {"pixel_range", s.train.pixel_range},
            {"contrast_median", num::median(s.train.contrast)},
            {"contrast_p10", num::quantile(s.train.contrast, 0.1)},
            {"contrast_p90", num::quantile(s.train.contrast, 0.9)}};
  return finish(out / "synth_summary.json", "synth-data", j, st);
}

// ---- train ----

inline json run_train(const RunConfig& cfg, const fs::path& out,
                      const std::function<void(const training::EpochLog&)>& on_epoch = {}) {
  const auto s = make_data(cfg);
  if (s.train.dim() != cfg.model.input_dim)
    throw std::invalid_argument("model.input_dim is " + std::to_string(cfg.model.input_dim) + " but images have " +
                                std::to_string(s.train.dim()) + " pixels");
  models::Model model(cfg.model, cfg.seed);
  const auto r = training::train(model, s.train, cfg.train, on_epoch);
  const auto st = stamp(cfg);
  const fs::path ck = out / "checkpoint.eavae";
  training::save_checkpoint(ck, r.checkpoint, st);
  const auto st2 = stamp(cfg, io::file_hash(ck));
  training::write_loss_log(out / "loss_log.csv", r.log, st2);
  const auto test = training::evaluate(model, s.test, cfg.train, cfg.seed + 2);
  json j = {{"epochs_run", r.log.size()},
            {"best_epoch", r.checkpoint.best_epoch},
            {"best_val", r.checkpoint.best_val},
            {"initial_val", r.initial_val},
            {"test", {{"recon", test.recon}, {"kl_z", test.kl_z}, {"kl_s", test.kl_s}, {"total", test.total}}}};
  return finish(out / "train_summary.json", "train", j, st2);
}

// ---- eval-contrast ----

inline json run_eval_contrast(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  const auto p = eval::infer(model, test, cfg.seed + 3, cfg.eval.s_samples);
  const auto sel = select_units(model, p, cfg.eval.informative_only);
  const auto cc = eval::contrast_curves(p, test.contrast, cfg.eval.n_bins, sel.units, cfg.eval.max_contrast);
  {
    io::CsvWriter csv(out / "contrast_curves.csv",
                      {"contrast", "contrast_lo", "contrast_hi", "count", "sm", "sv", "nv", "err_sm", "err_sv", "err_nv"},
                      &st);
    for (std::size_t b = 0; b < cc.center.size(); ++b)
      csv.row(cc.center[b], cc.lo[b], cc.hi[b], cc.count[b], cc.sm[b], cc.sv[b], cc.nv[b], cc.err_sm[b], cc.err_sv[b],
              cc.err_nv[b]);
  }
  const double sigma = model.spec().sigma_obs;
  std::vector<double> nv_img(p.n), width = eval::posterior_widths(p, sel.units);
  for (std::size_t i = 0; i < p.n; ++i) {
    double acc = 0;
    for (auto j : sel.units) acc += p.var_at(i, j);
    nv_img[i] = acc / static_cast<double>(sel.units.size());
  }
  {
    io::CsvWriter csv(out / "contrast_images.csv", {"index", "contrast", "nv", "width", "s_mean"}, &st);
    for (std::size_t i = 0; i < p.n; ++i)
      csv.row(i, test.contrast[i], nv_img[i], width[i], p.has_s() ? p.s_mean[i] : std::nan(""));
  }
  // trend statistics over the binned curve above sigma_obs, and over images
  std::vector<double> bc, bnv, ic, inv, low;
  std::size_t increases = 0;
  for (std::size_t b = 0; b < cc.center.size(); ++b)
    if (cc.center[b] > sigma) {
      if (!bnv.empty() && cc.nv[b] > bnv.back()) ++increases;
      bc.push_back(cc.center[b]);
      bnv.push_back(cc.nv[b]);
    }
  for (std::size_t i = 0; i < p.n; ++i) {
    if (test.contrast[i] > sigma) {
      ic.push_back(test.contrast[i]);
      inv.push_back(nv_img[i]);
    }
    if (test.contrast[i] < sigma / 2) low.push_back(nv_img[i]);
  }
  const double pv = prior_variance(model.spec());
  json j = {{"prior_variance", pv},
            {"sigma_obs", sigma},
            {"units", sel.units},
            {"n_units", sel.units.size()},
            {"bins_kept", cc.center.size()},
            {"bins_dropped", cc.dropped_bins},
            {"images_excluded", cc.excluded_images},
            {"bins_above_sigma", bc.size()},
            {"nv_increases_above_sigma", increases},
            {"rho_contrast_nv_binned", bc.size() >= 2 ? num::spearman(bc, bnv) : std::nan("")},
            {"rho_contrast_nv_images", ic.size() >= 2 ? num::spearman(ic, inv) : std::nan("")},
            {"low_contrast_images", low.size()},
            {"low_contrast_nv", low.empty() ? std::nan("") : num::mean(low)},
            {"low_contrast_rel_dev", low.empty() ? std::nan("") : std::abs(num::mean(low) - pv) / pv},
            {"rho_contrast_s", p.has_s() ? num::spearman(test.contrast, p.s_mean) : std::nan("")}};
  if (test.true_s.size() == p.n && p.has_s()) j["rho_true_s_s"] = num::spearman(test.true_s, p.s_mean);
  return finish(out / "contrast_summary.json", "eval-contrast", j, st);
}

// ---- eval-uninformative ----

inline json run_eval_uninformative(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  const auto p = eval::infer(model, test, cfg.seed + 3, cfg.eval.s_samples);
  const auto inf = eval::informative_units(model, p);
  {
    io::CsvWriter csv(out / "informative_units.csv", {"unit", "score", "informative"}, &st);
    std::vector<bool> in(p.dim, false);
    for (auto u : inf.units) in[u] = true;
    for (std::size_t j = 0; j < p.dim; ++j) csv.row(j, inf.scores[j], static_cast<int>(in[j]));
  }
  const auto rf = eval::sta_receptive_fields(p, test);
  {
    io::CsvWriter csv(out / "receptive_fields.csv", {"unit", "pixel", "value"}, &st);
    for (std::size_t j = 0; j < p.dim; ++j)
      for (std::size_t m = 0; m < test.dim(); ++m) csv.row(j, m, rf[j * test.dim() + m]);
  }
  // the average image as an uninformative probe
  const auto avg = data::average_image(test);
  const auto pa = eval::infer(model, avg, cfg.seed + 4, cfg.eval.s_samples);
  const auto id_w = eval::posterior_widths(p);
  const double u_avg = eval::posterior_widths(pa)[0];
  {
    io::CsvWriter csv(out / "uninformative_widths.csv", {"source", "index", "width", "s_mean"}, &st);
    for (std::size_t i = 0; i < p.n; ++i) csv.row("id", i, id_w[i], p.has_s() ? p.s_mean[i] : std::nan(""));
    csv.row("average", 0, u_avg, pa.has_s() ? pa.s_mean[0] : std::nan(""));
  }
  json j = {{"informative_units", inf.units},
            {"n_informative", inf.units.size()},
            {"clustering_fallback", inf.fallback},
            {"average_image_width", u_avg},
            {"average_image_s", pa.has_s() ? pa.s_mean[0] : std::nan("")},
            {"id_width_median", num::median(id_w)},
            {"p_id_exceeds_average", eval::exceedance(id_w, u_avg)},
            {"prior_std", prior_std(model.spec())}};
  return finish(out / "uninformative_summary.json", "eval-uninformative", j, st);
}

// ---- eval-morph ----

inline json run_eval_morph(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  const auto p = eval::infer(model, test, cfg.seed + 3, cfg.eval.s_samples);
  const auto protos = eval::prototypes(model, test, p);
  const auto r = eval::morph_analysis(model, protos, cfg.eval.lambda_points, cfg.seed + 5);
  {
    io::CsvWriter csv(out / "morph_curves.csv", {"label_a", "label_b", "lambda", "width", "s_mean"}, &st);
    for (const auto& mp : r.pairs)
      for (std::size_t k = 0; k < r.lambdas.size(); ++k)
        csv.row(mp.a, mp.b, r.lambdas[k], mp.width[k], mp.s_mean.empty() ? std::nan("") : mp.s_mean[k]);
  }
  {
    io::CsvWriter csv(out / "morph_fits.csv", {"label_a", "label_b", "a", "b", "c", "vertex", "concave"}, &st);
    for (const auto& mp : r.pairs)
      csv.row(mp.a, mp.b, mp.fit.a, mp.fit.b, mp.fit.c, mp.fit.vertex(), static_cast<int>(mp.fit.concave()));
  }
  json windows = json::array();
  {
    io::CsvWriter csv(out / "morph_windows.csv", {"window", "central_count", "pairs", "fraction"}, &st);
    for (std::size_t k = 0; k < r.windows.size(); ++k) {
      csv.row(r.windows[k], r.central_count(r.windows[k]), r.pairs.size(), r.central_fraction[k]);
      windows.push_back({{"window", r.windows[k]}, {"central_count", r.central_count(r.windows[k])}});
    }
  }
  json j = {{"pairs", r.pairs.size()}, {"central_count_L0.5", r.central_count(0.5)}, {"windows", windows}};
  return finish(out / "morph_summary.json", "eval-morph", j, st);
}

// ---- eval-corrupt ----

inline json run_eval_corrupt(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  io::CsvWriter csv(out / "corruption.csv", {"kind", "level", "mean_width", "mean_s"}, &st);
  json j = json::object();
  for (const auto& [name, kind, levels] :
       {std::tuple{"blur", eval::Corruption::blur, cfg.eval.blur_levels},
        std::tuple{"noise", eval::Corruption::pixel_noise, cfg.eval.noise_levels}}) {
    if (levels.empty()) continue;
    const auto c = eval::corruption_sweep(model, test, kind, levels, cfg.seed + 6);
    for (std::size_t k = 0; k < levels.size(); ++k)
      csv.row(name, levels[k], c.mean_width[k], c.mean_s.empty() ? std::nan("") : c.mean_s[k]);
    j[name] = {{"levels", levels},
               {"mean_width", c.mean_width},
               {"rho_level_width", levels.size() >= 2 ? num::spearman(levels, c.mean_width) : std::nan("")},
               {"rise", c.mean_width.back() - c.mean_width.front()}};
  }
  return finish(out / "corruption_summary.json", "eval-corrupt", j, st);
}

// ---- eval-ood ----

inline std::pair<std::string, data::Dataset> ood_source(const std::string& tag, const data::Dataset& id,
                                                        nd::RngStream& rng) {
  if (tag == "shuffled") return {tag, data::pixel_shuffle(id, rng)};
  if (tag == "average") {
    auto d = id.empty_like();
    d.push(data::average_image(id));
    d.refresh_contrast();
    return {tag, d};
  }
  const std::string prefix = "cache:";
  if (tag.rfind(prefix, 0) == 0) {
    auto d = data::load_dataset(tag.substr(prefix.size()));
    if (d.side != id.side) d = data::resize(d, id.side);
    return {tag, data::match_intensity(d, id)};
  }
  throw std::invalid_argument("unknown OOD source '" + tag + "' (expected shuffled, average or cache:PATH)");
}

inline json run_eval_ood(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  nd::RngStream rng(cfg.seed + 7);
  std::vector<std::pair<std::string, data::Dataset>> sources;
  for (const auto& tag : cfg.eval.ood_sources) sources.push_back(ood_source(tag, test, rng));
  const auto r = eval::ood_report(model, test, sources, cfg.seed + 8);
  io::CsvWriter csv(out / "ood_widths.csv", {"source", "index", "width", "s_mean", "p_id_exceeds"}, &st);
  auto dump = [&](const eval::OodSource& s) {
    for (std::size_t i = 0; i < s.width.size(); ++i)
      csv.row(s.tag, i, s.width[i], s.s_mean.empty() ? std::nan("") : s.s_mean[i], s.exceed[i]);
  };
  dump(r.id);
  json j = {{"id_p90", r.id_p90}, {"id_median", r.id.median_width}, {"sources", json::object()}};
  for (const auto& s : r.sources) {
    dump(s);
    std::size_t above = 0;
    for (double u : s.width) above += u > r.id_p90;
    j["sources"][s.tag] = {{"n", s.width.size()},
                           {"median_width", s.median_width},
                           {"median_p_id_exceeds", s.median_exceedance},
                           {"fraction_above_id_p90", static_cast<double>(above) / static_cast<double>(s.width.size())},
                           {"median_above_id_p90", s.median_width > r.id_p90},
                           {"ks_vs_id", eval::ks_statistic(s.width, r.id.width)},
                           {"median_s", s.s_mean.empty() ? std::nan("") : num::median(s.s_mean)}};
  }
  return finish(out / "ood_summary.json", "eval-ood", j, st);
}

// ---- eval-dn ----

inline json run_eval_dn(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto test = test_images(cfg);
  const auto st = stamp(cfg, ck);
  const auto p = eval::infer(model, test, cfg.seed + 3, cfg.eval.s_samples);
  const auto sel = select_units(model, p, cfg.eval.informative_only);
  const auto& units = sel.units;
  const std::size_t d = units.size(), n = p.n, m = test.dim();
  const auto rf_all = eval::sta_receptive_fields(p, test);
  std::vector<double> rf(d * m), mu(n * d);
  for (std::size_t k = 0; k < d; ++k) {
    std::copy_n(rf_all.begin() + units[k] * m, m, rf.begin() + k * m);
    for (std::size_t i = 0; i < n; ++i) mu[i * d + k] = p.mu_at(i, units[k]);
  }
  const auto lin = eval::linear_responses(rf, d, test);
  auto opt = cfg.eval.dn;
  opt.seed = cfg.seed + 9;
  const auto fit = eval::fit_divisive_normalization(lin, mu, n, d, opt);
  {
    io::CsvWriter csv(out / "dn_weights.csv", {"from_unit", "to_unit", "weight"}, &st);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i)
        if (i != j && !fit.flagged[i]) csv.row(units[j], units[i], fit.weight(j, i));
  }
  {
    io::CsvWriter csv(out / "dn_latents.csv", {"unit", "sigma2", "residual_rms", "samples_used", "flagged"}, &st);
    for (std::size_t i = 0; i < d; ++i)
      csv.row(units[i], fit.sigma2[i], fit.residual_rms[i], fit.samples_used[i], static_cast<int>(fit.flagged[i]));
  }
  std::vector<double> idx_c, idx_v;
  {
    io::CsvWriter csv(out / "normalization_index.csv", {"index", "contrast", "normalization_index"}, &st);
    for (std::size_t i = 0; i < n; ++i) {
      const std::span<const double> l(lin.data() + i * d, d), z(mu.data() + i * d, d);
      if (d < 2 || num::variance(l) == 0) continue;
      const double v = eval::normalization_index(l, z);
      csv.row(i, test.contrast[i], v);
      idx_c.push_back(test.contrast[i]);
      idx_v.push_back(v);
    }
  }
  json bow = nullptr;
  if (d >= 2 && n >= 8) {
    nd::RngStream r1(cfg.seed + 10), r2(cfg.seed + 10);
    const auto local = eval::all_units(d);
    const auto bz = eval::bowtie_analysis(mu, n, d, local, cfg.eval.bowtie_pairs, r1);
    const auto bl = eval::bowtie_analysis(lin, n, d, local, cfg.eval.bowtie_pairs, r2);
    io::CsvWriter csv(out / "bowtie.csv",
                      {"conditioning", "conditioned", "central_std_mu", "flanking_std_mu", "central_std_linear",
                       "flanking_std_linear"},
                      &st);
    double rz = 0, rl = 0;
    std::size_t kz = 0, kl = 0;
    for (std::size_t k = 0; k < bz.size(); ++k) {
      csv.row(units[bz[k].conditioning], units[bz[k].conditioned], bz[k].central_std, bz[k].flanking_std,
              bl[k].central_std, bl[k].flanking_std);
      if (bz[k].central_std > 0) rz += bz[k].flanking_std / bz[k].central_std, ++kz;
      if (bl[k].central_std > 0) rl += bl[k].flanking_std / bl[k].central_std, ++kl;
    }
    bow = {{"pairs", bz.size()},
           {"mean_flanking_over_central_mu", kz ? rz / kz : std::nan("")},
           {"mean_flanking_over_central_linear", kl ? rl / kl : std::nan("")}};
  }
  std::size_t flagged = 0;
  std::vector<double> ws;
  for (std::size_t i = 0; i < d; ++i) {
    flagged += fit.flagged[i];
    if (fit.flagged[i]) continue;
    for (std::size_t j = 0; j < d; ++j)
      if (j != i) ws.push_back(fit.weight(j, i));
  }
  json j = {{"units", units},
            {"flagged_units", flagged},
            {"weight_mean", ws.empty() ? std::nan("") : num::mean(ws)},
            {"weight_median", ws.empty() ? std::nan("") : num::median(ws)},
            {"images_with_index", idx_v.size()},
            {"rho_contrast_index", idx_v.size() >= 2 ? num::spearman(idx_c, idx_v) : std::nan("")},
            {"bowtie", bow}};
  return finish(out / "dn_summary.json", "eval-dn", j, st);
}

// ---- eval-latent-grid ----

inline json run_eval_latent_grid(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  const auto st = stamp(cfg, ck);
  const std::size_t zd = model.spec().z_dim();
  const std::vector<double> s_values = model.spec().has_s() ? cfg.eval.grid_s : std::vector<double>{1.0};
  double points = 1;
  for (std::size_t k = 0; k < zd; ++k) points *= static_cast<double>(cfg.eval.grid_axis.size());
  const bool grid = points <= static_cast<double>(cfg.eval.max_grid_points);
  json per_s = json::array();
  if (grid) {
    io::CsvWriter csv(out / "latent_grid.csv", {"point", "s", "z", "contrast"}, &st);
    const std::vector<std::vector<double>> axes(zd, cfg.eval.grid_axis);
    for (double s : s_values) {
      const auto g = models::latent_grid_contrast(model, axes, s);
      std::vector<double> c;
      for (std::size_t k = 0; k < g.size(); ++k) {
        std::string z;
        for (std::size_t t = 0; t < g[k].z.size(); ++t) z += (t ? " " : "") + io::format_double(g[k].z[t]);
        csv.row(k, s, z, g[k].contrast);
        c.push_back(g[k].contrast);
      }
      per_s.push_back({{"s", s}, {"grid_contrast_mean", num::mean(c)}, {"grid_contrast_std", num::stddev(c)}});
    }
  }
  json shells = json::array();
  {
    io::CsvWriter csv(out / "latent_shell.csv", {"direction", "s", "radius", "contrast"}, &st);
    const double radius = cfg.eval.shell_radius * prior_std(model.spec());
    for (double s : s_values) {
      nd::RngStream rng(cfg.seed + 11);  // same directions for every s
      const auto g = models::latent_shell_contrast(model, cfg.eval.shell_directions, radius, s, rng);
      std::vector<double> c;
      for (std::size_t k = 0; k < g.size(); ++k) {
        csv.row(k, s, radius, g[k].contrast);
        c.push_back(g[k].contrast);
      }
      shells.push_back({{"s", s}, {"shell_contrast_mean", num::mean(c)}, {"shell_contrast_std", num::stddev(c)}});
    }
  }
  json j = {{"z_dim", zd}, {"grid_evaluated", grid}, {"grid", per_s}, {"shell", shells}};
  return finish(out / "latent_grid_summary.json", "eval-latent-grid", j, st);
}

// ---- classify ----

struct ClassifyRun {
  classifier::Classifier clf;
  classifier::EntropyCurves curves;
  double accuracy = 0;
  std::vector<std::pair<std::string, std::vector<double>>> ood_entropy;
};

inline ClassifyRun classify_model(const RunConfig& cfg, const models::Model& model, const Splits& s) {
  ClassifyRun r;
  auto spec = cfg.classifier;
  r.clf = classifier::train_mlp(model, s.train, spec, cfg.seed + 12);
  r.accuracy = classifier::accuracy(r.clf, model, s.test, spec.n_samples, cfg.seed + 13);
  const auto p = eval::infer(model, s.test, cfg.seed + 3, cfg.eval.s_samples);
  const auto protos = eval::prototypes(model, s.test, p);
  r.curves = classifier::morph_entropy_curves(r.clf, model, protos, eval::lambda_grid(cfg.eval.lambda_points),
                                              spec.n_samples, cfg.seed + 14);
  nd::RngStream rng(cfg.seed + 7);
  for (const auto& tag : cfg.eval.ood_sources) {
    const auto [name, ds] = ood_source(tag, s.test, rng);
    std::vector<double> h;
    for (const auto& pr : classifier::predictive_entropy(r.clf, model, ds.pixels, spec.n_samples, cfg.seed + 15))
      h.push_back(pr.entropy);
    r.ood_entropy.emplace_back(name, std::move(h));
  }
  return r;
}

inline json run_classify(const RunConfig& cfg, const fs::path& out) {
  const auto [model, ck] = load_model(checkpoint_path(cfg, out));
  auto s = make_data(cfg);
  if (cfg.eval.max_images > 0 && cfg.eval.max_images < s.test.n) s.test = test_images(cfg);
  std::vector<std::pair<std::string, ClassifyRun>> runs;
  runs.emplace_back("model", classify_model(cfg, model, s));
  std::string ref_hash = "none";
  if (!cfg.reference_checkpoint.empty()) {
    const auto [ref, h] = load_model(cfg.reference_checkpoint);
    ref_hash = h;
    runs.emplace_back("reference", classify_model(cfg, ref, s));
  }
  const auto st = stamp(cfg, ref_hash == "none" ? ck : ck + "+" + ref_hash);
  const double hmax = std::log(static_cast<double>(cfg.classifier.n_classes));
  double max_h = 0;
  {
    io::CsvWriter csv(out / "entropy_curves.csv", {"model", "label_a", "label_b", "lambda", "entropy"}, &st);
    for (const auto& [tag, r] : runs)
      for (std::size_t k = 0; k < r.curves.pairs.size(); ++k)
        for (std::size_t t = 0; t < r.curves.lambdas.size(); ++t) {
          csv.row(tag, r.curves.pairs[k].first, r.curves.pairs[k].second, r.curves.lambdas[t], r.curves.entropy[k][t]);
          max_h = std::max(max_h, r.curves.entropy[k][t]);
        }
  }
  json models = json::object();
  {
    io::CsvWriter csv(out / "ood_entropy.csv", {"model", "source", "index", "entropy"}, &st);
    for (const auto& [tag, r] : runs) {
      json src = json::object();
      for (const auto& [name, h] : r.ood_entropy) {
        for (std::size_t i = 0; i < h.size(); ++i) csv.row(tag, name, i, h[i]);
        for (double v : h) max_h = std::max(max_h, v);
        src[name] = {{"mean_entropy", num::mean(h)}, {"median_entropy", num::median(h)}};
      }
      models[tag] = {{"test_accuracy", r.accuracy},
                     {"mean_intermediate_entropy_sum", num::mean(r.curves.intermediate_sum)},
                     {"ood", src}};
    }
  }
  json j = {{"models", models}, {"max_entropy", max_h}, {"entropy_bound", hmax}, {"within_bound", max_h <= hmax + 1e-12}};
  if (runs.size() == 2) {
    const auto t = classifier::compare_entropy(runs[0].second.curves, runs[1].second.curves);
    j["paired_t"] = {{"t", t.t}, {"p", t.p}, {"mean_diff", t.mean_diff}, {"df", t.df}};
  }
  return finish(out / "classify_summary.json", "classify", j, st);
}

// ---- report ----

inline json run_report(const RunConfig& cfg, const fs::path& out) {
  std::vector<fs::path> files;
  if (fs::exists(out))
    for (const auto& e : fs::directory_iterator(out))
      if (e.path().extension() == ".json" && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json summaries = json::object(), outputs = json::array();
  for (const auto& f : files) summaries[f.stem().string()] = io::read_json(f);
  std::vector<fs::path> all;
  if (fs::exists(out))
    for (const auto& e : fs::directory_iterator(out))
      if (e.is_regular_file() && e.path().filename() != "manifest.json") all.push_back(e.path());
  std::sort(all.begin(), all.end());
  for (const auto& f : all) outputs.push_back({{"file", f.filename().string()}, {"hash", io::file_hash(f)}});
  const auto ckp = checkpoint_path(cfg, out);
  const auto st = stamp(cfg, fs::exists(ckp) ? io::file_hash(ckp) : "none");
  json j = {{"summaries", summaries}, {"outputs", outputs}};
  return finish(out / "manifest.json", "report", j, st);
}

/// Subcommand name -> pipeline.
inline const std::vector<std::pair<std::string, std::function<json(const RunConfig&, const fs::path&)>>>& pipelines() {
  static const std::vector<std::pair<std::string, std::function<json(const RunConfig&, const fs::path&)>>> p = {
      {"synth-data", run_synth_data},
      {"train", [](const RunConfig& c, const fs::path& o) { return run_train(c, o); }},
      {"eval-contrast", run_eval_contrast},
      {"eval-uninformative", run_eval_uninformative},
      {"eval-morph", run_eval_morph},
      {"eval-corrupt", run_eval_corrupt},
      {"eval-ood", run_eval_ood},
      {"eval-dn", run_eval_dn},
      {"eval-latent-grid", run_eval_latent_grid},
      {"classify", run_classify},
      {"report", run_report}};
  return p;
}

}  // namespace eavae::experiments

#pragma once

// Run configuration: one JSON document covering data, model, training,
// evaluation and classifier settings. Keys are addressed with dotted paths
// ("train.epochs"); anything not present in the defaults is rejected.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "classifier.hpp"
#include "data.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "models.hpp"
#include "training.hpp"

namespace eavae::eval {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DnOptions, z_threshold, n_fits, subsample, seed, tol, max_sweeps)
}  // namespace eavae::eval

namespace eavae::data {
inline void to_json(nlohmann::json& j, const ContrastDistribution& c) {
  j = {{"log_mu", c.log_mu}, {"log_sigma", c.log_sigma}, {"lo", c.lo}, {"hi", c.hi}, {"constant", nullptr}};
  if (c.constant) j["constant"] = *c.constant;
}
inline void from_json(const nlohmann::json& j, ContrastDistribution& c) {
  const ContrastDistribution d;
  c.log_mu = j.value("log_mu", d.log_mu);
  c.log_sigma = j.value("log_sigma", d.log_sigma);
  c.lo = j.value("lo", d.lo);
  c.hi = j.value("hi", d.hi);
  c.constant.reset();
  if (j.contains("constant") && !j["constant"].is_null()) c.constant = j["constant"].get<double>();
}
}  // namespace eavae::data

namespace eavae::config {

using io::json;

struct ConfigMissing : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidKey : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointMissing : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataSpec {
  std::string source = "gsm";  // gsm | mnist | cache
  data::GsmSpec gsm;
  std::size_t n_train = 50000;  // gsm: training pool (validation is split from it)
  std::size_t n_test = 5000;
  std::string images = "data/mnist5k/images-idx3-ubyte.gz";
  std::string labels = "data/mnist5k/labels-idx1-ubyte.gz";
  double test_fraction = 0.2;  // mnist: held-out share
  bool augment = false;        // contrast augmentation of [0,1] images
  data::ContrastDistribution contrast;
  double augment_sigma = 0.25;
  std::size_t augment_factor = 10;
  bool zscore = false;          // rescale so mean +- 3 sd spans [0, 1]
  std::string train_cache;      // cache: dataset files written by synth-data
  std::string test_cache;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSpec, source, gsm, n_train, n_test, images, labels, test_fraction,
                                                augment, contrast, augment_sigma, augment_factor, zscore, train_cache,
                                                test_cache)

struct EvalSpec {
  std::size_t n_bins = 30;
  std::optional<double> max_contrast;
  bool informative_only = true;  // contrast and DN statistics over informative units
  std::size_t s_samples = 64;
  std::size_t max_images = 0;    // 0: whole test split
  std::size_t lambda_points = 21;
  std::vector<double> blur_levels{0, 1, 2, 4, 8, 16};
  std::vector<double> noise_levels{0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<std::string> ood_sources{"shuffled", "average"};
  std::size_t bowtie_pairs = 100;
  eval::DnOptions dn;
  std::vector<double> grid_axis{-2, -1, 0, 1, 2};
  std::vector<double> grid_s{0.5, 1, 2};
  std::size_t max_grid_points = 100000;
  std::size_t shell_directions = 100;
  double shell_radius = 2.0;
};

inline void to_json(json& j, const EvalSpec& e) {
  j = {{"n_bins", e.n_bins},
       {"max_contrast", nullptr},
       {"informative_only", e.informative_only},
       {"s_samples", e.s_samples},
       {"max_images", e.max_images},
       {"lambda_points", e.lambda_points},
       {"blur_levels", e.blur_levels},
       {"noise_levels", e.noise_levels},
       {"ood_sources", e.ood_sources},
       {"bowtie_pairs", e.bowtie_pairs},
       {"dn", e.dn},
       {"grid_axis", e.grid_axis},
       {"grid_s", e.grid_s},
       {"max_grid_points", e.max_grid_points},
       {"shell_directions", e.shell_directions},
       {"shell_radius", e.shell_radius}};
  if (e.max_contrast) j["max_contrast"] = *e.max_contrast;
}
inline void from_json(const json& j, EvalSpec& e) {
  const EvalSpec d;
  e.n_bins = j.value("n_bins", d.n_bins);
  e.max_contrast.reset();
  if (j.contains("max_contrast") && !j["max_contrast"].is_null()) e.max_contrast = j["max_contrast"].get<double>();
  e.informative_only = j.value("informative_only", d.informative_only);
  e.s_samples = j.value("s_samples", d.s_samples);
  e.max_images = j.value("max_images", d.max_images);
  e.lambda_points = j.value("lambda_points", d.lambda_points);
  e.blur_levels = j.value("blur_levels", d.blur_levels);
  e.noise_levels = j.value("noise_levels", d.noise_levels);
  e.ood_sources = j.value("ood_sources", d.ood_sources);
  e.bowtie_pairs = j.value("bowtie_pairs", d.bowtie_pairs);
  e.dn = j.value("dn", d.dn);
  e.grid_axis = j.value("grid_axis", d.grid_axis);
  e.grid_s = j.value("grid_s", d.grid_s);
  e.max_grid_points = j.value("max_grid_points", d.max_grid_points);
  e.shell_directions = j.value("shell_directions", d.shell_directions);
  e.shell_radius = j.value("shell_radius", d.shell_radius);
}

struct RunConfig {
  std::uint64_t seed = 0;  // master seed: data, init, training, evaluation
  DataSpec data;
  models::ModelSpec model;
  training::TrainConfig train;
  EvalSpec eval;
  classifier::MlpSpec classifier;
  std::string checkpoint;            // empty: <out>/checkpoint.eavae
  std::string reference_checkpoint;  // classify: second model for the paired comparison

  void validate() const {
    if (data.source != "gsm" && data.source != "mnist" && data.source != "cache")
      throw std::invalid_argument("data.source must be gsm, mnist or cache (got '" + data.source + "')");
    if (!(data.test_fraction > 0 && data.test_fraction < 1))
      throw std::invalid_argument("data.test_fraction must lie in (0,1)");
    model.validate();
    train.validate();
    if (eval.n_bins == 0) throw std::invalid_argument("eval.n_bins must be >= 1");
    if (eval.lambda_points < 3) throw std::invalid_argument("eval.lambda_points must be >= 3");
  }
};

/// Serialized form; train.seed is derived from the master seed and not exposed.
inline json to_json_doc(const RunConfig& c) {
  json t = c.train;
  t.erase("seed");
  return {{"seed", c.seed},
          {"data", c.data},
          {"model", c.model},
          {"train", t},
          {"eval", c.eval},
          {"classifier", c.classifier},
          {"checkpoint", c.checkpoint},
          {"reference_checkpoint", c.reference_checkpoint}};
}

inline RunConfig from_json_doc(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.data = j.value("data", c.data);
  c.model = j.value("model", c.model);
  c.train = j.value("train", c.train);
  c.eval = j.value("eval", c.eval);
  c.classifier = j.value("classifier", c.classifier);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  c.reference_checkpoint = j.value("reference_checkpoint", c.reference_checkpoint);
  c.train.seed = c.seed;
  return c;
}

/// Dotted leaf paths of a JSON object; arrays and scalars are leaves.
inline void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

inline std::map<std::string, json> accepted_keys() {
  std::map<std::string, json> keys;
  flatten(to_json_doc(RunConfig{}), "", keys);
  return keys;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  for (const auto& [k, v] : accepted_keys()) {
    const std::size_t d = edit_distance(key, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline void check_key(const std::string& key) {
  const auto keys = accepted_keys();
  if (keys.count(key)) return;
  // a prefix of a valid key names an object; allow whole-object overrides
  const std::string pre = key + ".";
  for (const auto& [k, v] : keys)
    if (k.rfind(pre, 0) == 0) return;
  throw InvalidKey("unknown config key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
}

inline void check_document(const json& j) {
  if (!j.is_object()) throw InvalidKey("config root must be a JSON object");
  std::map<std::string, json> leaves;
  flatten(j, "", leaves);
  for (const auto& [k, v] : leaves)
    if (!k.empty()) check_key(k);
}

/// Applies KEY=VALUE; VALUE is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidKey("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  check_key(key);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::string ptr = "/" + key;
  std::replace(ptr.begin(), ptr.end(), '.', '/');
  doc[json::json_pointer(ptr)] = value;
}

/// Loads a config file (or the defaults when `path` is empty), applies
/// overrides and an optional seed, and validates the result.
inline RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed = std::nullopt) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigMissing("config file not found: " + path.string());
    doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw InvalidKey("config file is not valid JSON: " + path.string());
  }
  check_document(doc);
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  json merged = to_json_doc(RunConfig{});
  merged.merge_patch(doc);
  RunConfig c;
  try {
    c = from_json_doc(merged);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::string hash(const RunConfig& c) { return io::json_hash(to_json_doc(c)); }

}  // namespace eavae::config

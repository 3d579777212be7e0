// eavae: one subcommand per pipeline, outputs into --out.

#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "eavae/experiments.hpp"

namespace {

using eavae::io::json;
namespace cfgns = eavae::config;
namespace ex = eavae::experiments;

constexpr int kMissingConfig = 2;
constexpr int kInvalidKey = 3;
constexpr int kMissingCheckpoint = 4;

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

const std::map<std::string, std::string>& descriptions() {
  static const std::map<std::string, std::string> d = {
      {"synth-data", "Write the train/test split as dataset caches plus per-image contrast"},
      {"train", "Train a model and write checkpoint, loss log and summary"},
      {"eval-contrast", "Signal mean, signal variance and noise variance against contrast"},
      {"eval-uninformative", "Informative units, receptive fields, widths of uninformative images"},
      {"eval-morph", "Posterior width along morphs between digit prototypes"},
      {"eval-corrupt", "Mean posterior width under blur and pixel noise sweeps"},
      {"eval-ood", "Posterior widths of out-of-distribution sources against the test set"},
      {"eval-dn", "Divisive normalization fit, normalization index and bow-tie statistics"},
      {"eval-latent-grid", "Decode a latent grid and a shell of directions"},
      {"classify", "Digit classifier on posterior samples, predictive entropy along morphs"},
      {"report", "Manifest of all summaries and output hashes in --out"}};
  return d;
}

std::string key_listing() {
  std::ostringstream os;
  os << "Accepted config keys (default):\n";
  for (const auto& [k, v] : cfgns::accepted_keys()) os << "  " << k << " = " << v.dump() << '\n';
  return os.str();
}

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::vector<std::string> sets;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate VAEs and explaining-away VAEs", "eavae"};
  app.require_subcommand(1);
  app.set_version_flag("--version", eavae::io::kToolVersion);
  Options opt;
  const std::string keys = key_listing();
  std::string chosen;
  for (const auto& [name, run] : ex::pipelines()) {
    auto* sub = app.add_subcommand(name, descriptions().at(name));
    sub->add_option("--config", opt.config, "JSON config file");
    sub->add_option("--out", opt.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", opt.seed, "Master seed (overrides the config)");
    sub->add_option("--threads", opt.threads, "Worker cap")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--set", opt.sets, "KEY=VALUE override, repeatable");
    sub->footer(keys);
    sub->callback([&chosen, n = name] { chosen = n; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    const auto cfg = cfgns::load(opt.config, opt.sets, opt.seed);
    std::filesystem::create_directories(opt.out);
    for (const auto& [name, run] : ex::pipelines()) {
      if (name != chosen) continue;
      json summary;
      if (name == "train") {
        summary = ex::run_train(cfg, opt.out, [](const eavae::training::EpochLog& e) {
          std::cerr << "epoch " << e.epoch << " loss " << e.total << " val " << e.val_total << '\n';
        });
      } else {
        summary = run(cfg, opt.out);
      }
      std::cout << summary.dump(2) << '\n';
    }
  } catch (const cfgns::ConfigMissing& e) {
    return fail("missing_config", e.what(), kMissingConfig);
  } catch (const cfgns::InvalidKey& e) {
    return fail("invalid_key", e.what(), kInvalidKey);
  } catch (const cfgns::CheckpointMissing& e) {
    return fail("missing_checkpoint", e.what(), kMissingCheckpoint);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}

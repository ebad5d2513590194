// Command-line driver for the detect-and-denoise workbench.
//
// Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric error.

#include <CLI11.hpp>
#include <iostream>

#include "obsdef/harness/pipeline.hpp"

namespace hn = obsdef::harness;

int main(int argc, char** argv) {
  CLI::App app{"observation-attack defense workbench"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  long seed = -1;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "override config seed");
  app.add_option("--out", out_dir, "override output directory");
  app.add_option("--set", overrides, "config override key=value (repeatable)");

  app.add_subcommand("train-policy", "train the victim policy");
  app.add_subcommand("collect", "collect D_normal with the trained policy");
  app.add_subcommand("augment", "build offline adversarial datasets");
  app.add_subcommand("train-detector", "train the anomaly detector");
  app.add_subcommand("train-denoiser", "train the denoiser");
  app.add_subcommand("tune-thresholds", "calibrate c_anomaly and c_vul");
  app.add_subcommand("evaluate", "run the attack/defense evaluation matrix");
  app.add_subcommand("adaptive-eval", "run defense-aware adaptive attacks");
  app.add_subcommand("report", "emit csv/markdown/svg reports from metrics");

  CLI11_PARSE(app, argc, argv);

  try {
    hn::json cj = hn::json::object();
    if (!config_path.empty()) cj = hn::load_json_file(config_path);
    if (seed >= 0) cj["seed"] = seed;
    if (!out_dir.empty()) cj["out"] = out_dir;
    for (const auto& kv : overrides) hn::apply_override(cj, kv);
    hn::ExperimentConfig cfg = hn::config_from_json(cj);

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "train-policy") hn::run_train_policy(cfg);
    else if (cmd == "collect") hn::run_collect(cfg);
    else if (cmd == "augment") hn::run_augment(cfg);
    else if (cmd == "train-detector") hn::run_train_detector(cfg);
    else if (cmd == "train-denoiser") hn::run_train_denoiser(cfg);
    else if (cmd == "tune-thresholds") hn::run_tune_thresholds(cfg);
    else if (cmd == "evaluate") hn::run_evaluate(cfg);
    else if (cmd == "adaptive-eval") hn::run_adaptive_eval(cfg);
    else if (cmd == "report") hn::run_report(cfg);
    std::cout << cmd << ": ok (out=" << cfg.out << ")\n";
    return 0;
  } catch (const hn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const hn::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}

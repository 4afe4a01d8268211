// ensemble-forge: generate data, train, evaluate and report an ensembling run.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ensforge/errors.hpp"
#include "ensforge/experiment.hpp"
#include "ensforge/report.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kMissing = 3, kRuntime = 4 };

struct Args {
  std::string config;
  std::string run_dir;
  bool force = false;
  int jobs = 1;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required();
  cmd->add_option("--run-dir", a.run_dir, "override run_dir from the config");
  cmd->add_flag("--force", a.force, "overwrite an existing run directory");
  cmd->add_option("--jobs", a.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", a.seed, "override dataset.master_seed");
}

int run(const std::string& command, const Args& a, const CLI::App& app) {
  using namespace ensforge;
  RunOptions opts;
  if (!a.run_dir.empty()) opts.run_dir = a.run_dir;
  if (app.get_subcommand(command)->count("--seed")) opts.seed = a.seed;
  opts.force = a.force;
  opts.jobs = a.jobs;
  opts.log = &std::cerr;

  const ExperimentConfig cfg = apply_overrides(load_config(a.config), opts);
  if (command == "generate") {
    cmd_generate(cfg, opts);
  } else if (command == "train") {
    cmd_train(cfg, opts);
  } else if (command == "evaluate") {
    const auto records = cmd_evaluate(cfg, opts);
    std::cout << comparison_text(comparison_rows(records));
  } else {
    std::cout << cmd_compare_report(cfg.run_dir);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensembling experiments for segmentation-based object detection"};
  app.require_subcommand(1);
  Args args;
  const std::pair<const char*, const char*> commands[] = {
      {"generate", "write train/val/test scenes"},
      {"train", "train the baseline and every method"},
      {"evaluate", "predict, sweep thresholds, write the comparison table"},
      {"report", "summary text and curves from an evaluated run"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help), args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, args, app);
  } catch (const ensforge::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ensforge::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

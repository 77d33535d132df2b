#pragma once

// Argument parsing and the top-level error policy for the acpo binary.
// run_cli takes argv-style arguments in natural order so tests can invoke
// commands in-process and assert on exit codes without spawning a process.

#include <algorithm>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "acpo/commands.hpp"

namespace acpo {

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"toy diffusion fine-tuning against a learned quality scorer"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> out_dir;
  std::optional<uint64_t> seed;
  std::vector<std::string> image_paths;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    // One token per occurrence, or the greedy vector default would swallow
    // positionals that follow a --set.
    sub->add_option("--set", overrides, "KEY=VALUE override (repeatable)")
        ->allow_extra_args(false);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "master seed");
  };

  CLI::App* train_iqa = app.add_subcommand("train-iqa", "train the quality scorer");
  add_common(train_iqa);
  CLI::App* train_base = app.add_subcommand("train-base", "train the base denoiser");
  add_common(train_base);
  CLI::App* finetune =
      app.add_subcommand("finetune", "fine-tune adapters against the stored scorer");
  add_common(finetune);
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "paired held-out comparison of base vs adapted");
  add_common(evaluate);
  CLI::App* ablate =
      app.add_subcommand("ablate", "sweep quality weight, window, and anchor");
  add_common(ablate);
  CLI::App* score = app.add_subcommand("score", "score PGM images with the stored scorer");
  add_common(score);
  score->add_option("images", image_paths, "PGM files to score")->required();
  CLI::App* export_data =
      app.add_subcommand("export-data", "write the scorer corpus as PGM files");
  add_common(export_data);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = resolve_config(config_path, overrides, out_dir, seed);
    if (train_iqa->parsed()) cmd_train_iqa(cfg);
    else if (train_base->parsed()) cmd_train_base(cfg);
    else if (finetune->parsed()) cmd_finetune(cfg);
    else if (evaluate->parsed()) cmd_evaluate(cfg);
    else if (ablate->parsed()) cmd_ablate(cfg);
    else if (score->parsed()) cmd_score(cfg, image_paths, out);
    else if (export_data->parsed()) cmd_export_data(cfg);
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const DependencyError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const InvariantBreach& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace acpo

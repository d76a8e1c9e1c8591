#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "advpnml/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Adversarial pNML defense lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out_dir, "output directory (overrides output_dir)");
    cmd->add_option("--seed", seed, "global seed (overrides seed)");
    cmd->add_option("--jobs", jobs, "evaluation worker threads")->check(CLI::PositiveNumber);
  };
  CLI::App* gen = app.add_subcommand("gen-data", "generate or check the dataset");
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "evaluate attacks with and without the defense");
  CLI::App* sweep = app.add_subcommand("sweep", "evaluate along the configured sweep axis");
  for (CLI::App* cmd : {gen, train, eval, sweep}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    const advpnml::ExperimentConfig cfg = advpnml::load_config(config_path);
    advpnml::CommandOptions opts;
    if (!out_dir.empty()) opts.out = out_dir;
    opts.seed = seed;
    opts.jobs = jobs;
    opts.log = &std::cout;
    if (gen->parsed()) {
      advpnml::cmd_gen_data(cfg, opts);
    } else if (train->parsed()) {
      advpnml::cmd_train(cfg, opts);
    } else if (eval->parsed()) {
      advpnml::cmd_eval(cfg, opts);
    } else {
      advpnml::cmd_sweep(cfg, opts);
    }
  } catch (const std::exception& e) {
    std::cerr << "advpnml: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

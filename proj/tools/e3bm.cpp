#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "e3bm/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"E3BM meta-learning harness"};
  app.require_subcommand(0, 1);

  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "Print the default config as TOML and exit");

  std::string config_path, out_path, state_path, split = "test";
  std::size_t episodes = 0, workers = 1;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "Run seed (overrides E3BM_SEED and the config)");
  };

  CLI::App* train = app.add_subcommand("train", "Meta-train and test one configuration");
  train->add_option("--config", config_path, "TOML config")->required();
  train->add_option("--out", out_path, "Output directory")->required();
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a snapshot");
  eval->add_option("--state", state_path, "state.json from a training run")->required();
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--episodes", episodes, "Episode count (default: test_episode_count)");
  eval->add_option("--out", out_path, "Write the result as JSON here");
  add_common(eval);

  CLI::App* ablate = app.add_subcommand("ablate", "Run the nine ablation cells");
  ablate->add_option("--config", config_path, "TOML config")->required();
  ablate->add_option("--out", out_path, "Output directory")->required();
  add_common(ablate);

  CLI::App* trace = app.add_subcommand("trace", "Export alpha/v traces in long format");
  trace->add_option("--state", state_path, "state.json; history.csv must sit next to it")->required();
  trace->add_option("--out", out_path, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? e3bm::kExitOk : e3bm::kExitConfig;
  }

  if (print_defaults) {
    std::cout << e3bm::to_toml(e3bm::RunConfig{});
    return e3bm::kExitOk;
  }

  e3bm::CommonOptions opt;
  opt.workers = workers;
  opt.env_seed = std::getenv("E3BM_SEED");
  auto* seed_opt = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()->get_option_no_throw("--seed");
  if (seed_opt && seed_opt->count() > 0) opt.seed = seed;

  if (*train) return e3bm::cmd_train(config_path, out_path, opt);
  if (*eval) return e3bm::cmd_eval(state_path, split, episodes, out_path, opt);
  if (*ablate) return e3bm::cmd_ablate(config_path, out_path, opt);
  if (*trace) return e3bm::cmd_trace(state_path, out_path);

  std::cerr << app.help();
  return e3bm::kExitConfig;
}

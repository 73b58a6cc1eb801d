#pragma once

// Subcommands behind the e3bm CLI. Each returns the process exit code:
// 0 success, 1 runtime failure, 2 configuration error. Logs go to `err`,
// data goes to files; only `eval` prints its result line to `out`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "e3bm/config.hpp"
#include "e3bm/meta_state.hpp"
#include "e3bm/trainer.hpp"

namespace e3bm {

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitConfig = 2 };

struct CommonOptions {
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;  // --seed, wins over E3BM_SEED
  const char* env_seed = nullptr;     // value of E3BM_SEED, if set
};

// "63.8 ±0.4": percent with one decimal.
inline std::string format_accuracy(double mean, double ci95) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f ±%.1f", 100.0 * mean, 100.0 * ci95);
  return buf;
}

namespace detail {

namespace fs = std::filesystem;

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline RunConfig resolve_config(const std::string& path, const CommonOptions& opt) {
  RunConfig c = load_config(path);
  apply_seed_override(c, opt.env_seed);
  if (opt.seed) c.seed = *opt.seed;
  return c;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::optional<FrozenSchedule> frozen_for(const RunConfig& c) {
  const bool optimal = c.ablation.v_mode == VMode::Optimal || c.ablation.a_mode == AMode::Optimal;
  if (!optimal) return std::nullopt;
  return load_freeze(c.freeze_file, c.M);
}

inline nlohmann::json history_json(const std::vector<HistoryRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const HistoryRow& r : rows) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    j["val_acc"] = r.val_acc ? nlohmann::json(*r.val_acc) : nlohmann::json();
    j["ci95"] = r.ci95 ? nlohmann::json(*r.ci95) : nlohmann::json();
    j["alpha"] = r.alpha;
    j["v"] = r.v;
    j["train_loss"] = std::isfinite(r.train_loss) ? nlohmann::json(r.train_loss) : nlohmann::json();
    out.push_back(j);
  }
  return out;
}

inline std::string ablation_label(const AblationConfig& ab) {
  return "v=" + enum_name(ab.v_mode) + ",a=" + enum_name(ab.a_mode);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOutcome {
  TrainingResult training;
  EvalResult test;
  double seconds = 0.0;
};

inline TrainOutcome train_and_test(const RunConfig& c, const std::optional<FrozenSchedule>& frozen,
                                   std::size_t workers, const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const TaskGenerator gen(c.generator, c.generator_seed);
  TrainOutcome out;
  out.training = run_meta_training(c, gen, frozen, workers, log);
  out.test = evaluate(out.training.best, gen, Split::Test, c.test_episode_count, frozen, workers);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline nlohmann::json metrics_json(const RunConfig& c, const TrainOutcome& o) {
  nlohmann::json j;
  j["run_id"] = config_hash(c) + "-" + std::to_string(c.seed);
  j["config_hash"] = config_hash(c);
  j["ablation"] = detail::ablation_label(c.ablation);
  j["history"] = detail::history_json(o.training.history);
  j["initial_val"] = {{"mean_acc", o.training.initial_val.mean}, {"ci95", o.training.initial_val.ci95}};
  j["best_val_acc"] = o.training.best_val_acc;
  j["best_iteration"] = o.training.best_iteration;
  j["test"] = {{"mean_acc", o.test.mean}, {"ci95", o.test.ci95}, {"episodes", o.test.accuracies.size()}};
  j["wall_clock_seconds"] = o.seconds;
  return j;
}

inline int cmd_train(const std::string& config_path, const std::string& out_dir, const CommonOptions& opt,
                     std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const RunConfig c = detail::resolve_config(config_path, opt);
    const auto frozen = detail::frozen_for(c);
    detail::ensure_dir(out_dir);
    const TrainOutcome o = train_and_test(c, frozen, opt.workers, [&](const std::string& s) { err << s << '\n'; });
    const detail::fs::path dir(out_dir);
    save_snapshot((dir / "state.json").string(), o.training.best);
    std::ostringstream hist;
    write_history(hist, o.training.history, c.M);
    detail::write_text(dir / "history.csv", hist.str());
    detail::write_text(dir / "metrics.json", metrics_json(c, o).dump(1) + "\n");
    save_freeze((dir / "freeze.json").string(), o.training.best.params.priors);
    err << "test " << format_accuracy(o.test.mean, o.test.ci95) << " (best val at iteration "
        << o.training.best_iteration << ")\n";
    return int(kExitOk);
  });
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

// n_episodes = 0 uses the snapshot's test_episode_count. The result line is
// printed to `out` and written as JSON to `json_path` (skipped when empty).
inline int cmd_eval(const std::string& state_path, const std::string& split_name, std::size_t n_episodes,
                    const std::string& json_path, const CommonOptions& opt, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto split = parse_split(split_name);
    if (!split) throw ConfigError("split", "unknown split \"" + split_name + "\"; expected train, val or test");
    const MetaState s = load_snapshot(state_path);
    const std::size_t n = n_episodes == 0 ? s.config.test_episode_count : n_episodes;
    if (n < 2) throw ConfigError("episodes", "at least 2 episodes are needed for a confidence interval");
    const auto frozen = detail::frozen_for(s.config);
    const TaskGenerator gen(s.config.generator, s.config.generator_seed);
    const EvalResult r = evaluate(s, gen, *split, n, frozen, opt.workers);
    out << format_accuracy(r.mean, r.ci95) << '\n';
    if (!json_path.empty()) {
      nlohmann::json j{{"split", split_name},
                       {"episodes", n},
                       {"mean_acc", r.mean},
                       {"ci95", r.ci95},
                       {"formatted", format_accuracy(r.mean, r.ci95)},
                       {"accuracies", r.accuracies}};
      detail::write_text(json_path, j.dump(1) + "\n");
    }
    return int(kExitOk);
  });
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string option;  // "v1".."v5", "a1".."a4"
  AblationConfig cell;
  double test_acc = 0.0;
  double ci95 = 0.0;
  double best_val_acc = 0.0;
  std::size_t best_iteration = 0;
  std::vector<std::uint64_t> test_seeds;
};

// The nine rows: (v1)-(v5) with alpha as in (a4), then (a1)-(a4) with v as in
// (v5). "optimal" cells reuse the values learned by the matching "learnable"
// cell; the shared (v5, a4) cell is trained once.
inline std::vector<AblationConfig> ablation_grid() {
  return {{VMode::E3bm, AMode::Fixed},      {VMode::Learnable, AMode::Fixed},    {VMode::Optimal, AMode::Fixed},
          {VMode::Equal, AMode::Fixed},     {VMode::LastEpoch, AMode::Fixed},    {VMode::LastEpoch, AMode::E3bm},
          {VMode::LastEpoch, AMode::Learnable}, {VMode::LastEpoch, AMode::Optimal}, {VMode::LastEpoch, AMode::Fixed}};
}

inline std::vector<AblationRow> run_ablation(const RunConfig& base, std::size_t workers, const Logger& log) {
  const std::vector<AblationConfig> grid = ablation_grid();
  const char* options[] = {"v1", "v2", "v3", "v4", "v5", "a1", "a2", "a3", "a4"};
  std::vector<AblationRow> rows;
  std::optional<PriorSchedule> learned_v, learned_a;
  std::optional<AblationRow> shared;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const AblationConfig& cell = grid[i];
    AblationRow row;
    row.option = options[i];
    row.cell = cell;
    if (cell == AblationConfig{VMode::LastEpoch, AMode::Fixed} && shared) {
      AblationRow copy = *shared;
      copy.option = row.option;
      rows.push_back(copy);
      continue;
    }
    RunConfig c = base;
    c.ablation = cell;
    std::optional<FrozenSchedule> frozen;
    if (cell.v_mode == VMode::Optimal) {
      frozen = FrozenSchedule{std::vector<double>(c.M, c.fixed_alpha), learned_v->v};
      c.freeze_file = "<v2 learnable>";
    }
    if (cell.a_mode == AMode::Optimal) {
      std::vector<double> last(c.M, 0.0);
      last.back() = 1.0;
      frozen = FrozenSchedule{learned_a->alpha, last};
      c.freeze_file = "<a2 learnable>";
    }
    log("ablation " + row.option + " (" + detail::ablation_label(cell) + ")");
    const TrainOutcome o = train_and_test(c, frozen, workers, log);
    if (cell.v_mode == VMode::Learnable) learned_v = o.training.best.params.priors;
    if (cell.a_mode == AMode::Learnable) learned_a = o.training.best.params.priors;
    row.test_acc = o.test.mean;
    row.ci95 = o.test.ci95;
    row.best_val_acc = o.training.best_val_acc;
    row.best_iteration = o.training.best_iteration;
    row.test_seeds = o.test.episode_seeds;
    if (cell == AblationConfig{VMode::LastEpoch, AMode::Fixed}) shared = row;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "option,v_mode,a_mode,test_acc,ci95,best_val_acc,best_iteration\n";
  for (const auto& r : rows) {
    o << r.option << ',' << enum_name(r.cell.v_mode) << ',' << enum_name(r.cell.a_mode) << ','
      << detail::fmt17(r.test_acc) << ',' << detail::fmt17(r.ci95) << ',' << detail::fmt17(r.best_val_acc) << ','
      << r.best_iteration << '\n';
  }
  return o.str();
}

inline std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(8) << "option" << std::setw(12) << "v_mode" << std::setw(12) << "a_mode"
    << "test accuracy\n";
  for (const auto& r : rows) {
    o << std::setw(8) << r.option << std::setw(12) << enum_name(r.cell.v_mode) << std::setw(12)
      << enum_name(r.cell.a_mode) << format_accuracy(r.test_acc, r.ci95) << '\n';
  }
  return o.str();
}

inline int cmd_ablate(const std::string& config_path, const std::string& out_dir, const CommonOptions& opt,
                      std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const RunConfig c = detail::resolve_config(config_path, opt);
    detail::ensure_dir(out_dir);
    const auto rows = run_ablation(c, opt.workers, [&](const std::string& s) { err << s << '\n'; });
    const detail::fs::path dir(out_dir);
    detail::write_text(dir / "ablation.csv", ablation_csv(rows));
    detail::write_text(dir / "ablation.txt", ablation_text(rows));
    nlohmann::json seeds = nlohmann::json::object();
    for (const auto& r : rows) {
      seeds[r.option] = {{"run_seed", c.seed},
                         {"generator_seed", c.generator_seed},
                         {"test_episode_seeds", r.test_seeds}};
    }
    detail::write_text(dir / "episode_seeds.json", seeds.dump(1) + "\n");
    err << ablation_text(rows);
    return int(kExitOk);
  });
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

// Long-format alpha/v rows from the history CSV beside the snapshot.
inline std::string trace_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream o;
  o << "iteration,quantity,epoch_index,value\n";
  for (const HistoryRow& r : rows) {
    if (r.alpha.empty()) continue;  // rejected step: nothing realized
    for (std::size_t m = 0; m < r.alpha.size(); ++m)
      o << r.iteration << ",alpha," << m + 1 << ',' << detail::fmt17(r.alpha[m]) << '\n';
    for (std::size_t m = 0; m < r.v.size(); ++m)
      o << r.iteration << ",v," << m + 1 << ',' << detail::fmt17(r.v[m]) << '\n';
  }
  return o.str();
}

inline int cmd_trace(const std::string& state_path, const std::string& out_path, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const detail::fs::path history = detail::fs::path(state_path).parent_path() / "history.csv";
    std::ifstream in(history);
    if (!in) throw Error("missing history: " + history.string());
    const auto rows = read_history(in);
    for (const auto& r : rows) {
      for (double x : r.alpha)
        if (!std::isfinite(x)) throw Error("history holds a non-finite alpha at iteration " + std::to_string(r.iteration));
      for (double x : r.v)
        if (!std::isfinite(x)) throw Error("history holds a non-finite v at iteration " + std::to_string(r.iteration));
    }
    detail::write_text(out_path, trace_csv(rows));
    return int(kExitOk);
  });
}

}  // namespace e3bm

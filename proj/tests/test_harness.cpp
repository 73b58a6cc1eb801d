#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "e3bm/harness.hpp"

namespace {

using namespace e3bm;
namespace fs = std::filesystem;

RunConfig tiny_config() {
  RunConfig c;
  c.meta_iterations = 6;
  c.eval_every = 3;
  c.eval_episode_count = 4;
  c.test_episode_count = 5;
  c.meta_batch_size = 2;
  c.Q = 3;
  c.hidden_dim = 4;
  c.base_hidden = 8;
  c.generator.dim = 6;
  return c;
}

class Harness : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("e3bm_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write_config(const std::string& text, const std::string& name = "run.toml") {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  fs::path dir_;
};

TEST(Format, AccuracyLine) {
  EXPECT_EQ(format_accuracy(0.638, 0.004), "63.8 ±0.4");
  EXPECT_EQ(format_accuracy(1.0, 0.0), "100.0 ±0.0");
}

TEST_F(Harness, TrainWritesArtifactsThatRoundTrip) {
  const RunConfig c = tiny_config();
  std::ostringstream err;
  ASSERT_EQ(cmd_train(write_config(to_toml(c)), path("out"), {}, err), kExitOk) << err.str();
  for (const char* f : {"state.json", "history.csv", "metrics.json", "freeze.json"})
    EXPECT_TRUE(fs::exists(dir_ / "out" / f)) << f;

  const MetaState s = load_snapshot(path("out/state.json"));
  EXPECT_EQ(s.config, c);
  EXPECT_EQ(parse_snapshot(snapshot_text(s)), s);

  std::ifstream hin(path("out/history.csv"));
  const auto rows = read_history(hin);
  EXPECT_EQ(rows.size(), c.meta_iterations);

  const auto freeze = load_freeze(path("out/freeze.json"), c.M);
  EXPECT_EQ(freeze.alpha, s.params.priors.alpha);
  EXPECT_EQ(freeze.v, s.params.priors.v);

  const auto m = nlohmann::json::parse(slurp(path("out/metrics.json")));
  EXPECT_EQ(m.at("config_hash"), config_hash(c));
  EXPECT_EQ(m.at("ablation"), "v=e3bm,a=e3bm");
  EXPECT_EQ(m.at("test").at("episodes"), c.test_episode_count);
  EXPECT_TRUE(m.contains("wall_clock_seconds"));
}

TEST_F(Harness, MetricsAreDeterministicModuloWallClock) {
  const std::string cfg = write_config(to_toml(tiny_config()));
  std::ostringstream err;
  ASSERT_EQ(cmd_train(cfg, path("a"), {}, err), kExitOk);
  CommonOptions two;
  two.workers = 3;
  ASSERT_EQ(cmd_train(cfg, path("b"), two, err), kExitOk);
  auto a = nlohmann::json::parse(slurp(path("a/metrics.json")));
  auto b = nlohmann::json::parse(slurp(path("b/metrics.json")));
  a.erase("wall_clock_seconds");
  b.erase("wall_clock_seconds");
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(path("a/state.json")), slurp(path("b/state.json")));
  EXPECT_EQ(slurp(path("a/history.csv")), slurp(path("b/history.csv")));
}

TEST_F(Harness, SeedPrecedence) {
  const std::string cfg = write_config(to_toml(tiny_config()));
  std::ostringstream err;
  CommonOptions env;
  env.env_seed = "7";
  ASSERT_EQ(cmd_train(cfg, path("env"), env, err), kExitOk);
  EXPECT_EQ(load_snapshot(path("env/state.json")).config.seed, 7u);
  CommonOptions both = env;
  both.seed = 11;
  ASSERT_EQ(cmd_train(cfg, path("flag"), both, err), kExitOk);
  EXPECT_EQ(load_snapshot(path("flag/state.json")).config.seed, 11u);
  CommonOptions bad;
  bad.env_seed = "seven";
  EXPECT_EQ(cmd_train(cfg, path("bad"), bad, err), kExitConfig);
}

TEST_F(Harness, MissingLambdaIsAConfigError) {
  std::istringstream in(to_toml(tiny_config()));
  std::string line, text;
  while (std::getline(in, line))
    if (line.rfind("lambda1", 0) != 0) text += line + "\n";
  std::ostringstream err;
  EXPECT_EQ(cmd_train(write_config(text), path("out"), {}, err), kExitConfig);
  EXPECT_NE(err.str().find("lambda1"), std::string::npos) << err.str();
  EXPECT_FALSE(fs::exists(dir_ / "out" / "state.json"));
}

TEST_F(Harness, EvalExitCodes) {
  std::ostringstream err, out;
  ASSERT_EQ(cmd_train(write_config(to_toml(tiny_config())), path("out"), {}, err), kExitOk);

  EXPECT_EQ(cmd_eval(path("out/state.json"), "val", 6, path("eval.json"), {}, out, err), kExitOk);
  EXPECT_TRUE(std::regex_match(out.str(), std::regex(R"(\d{1,3}\.\d ±\d{1,3}\.\d\n)"))) << out.str();
  const auto j = nlohmann::json::parse(slurp(path("eval.json")));
  EXPECT_EQ(j.at("episodes"), 6);
  EXPECT_EQ(j.at("accuracies").size(), 6u);

  EXPECT_EQ(cmd_eval(path("out/state.json"), "test", 1, "", {}, out, err), kExitConfig);
  EXPECT_EQ(cmd_eval(path("out/state.json"), "holdout", 5, "", {}, out, err), kExitConfig);
  EXPECT_EQ(cmd_eval(path("missing.json"), "test", 5, "", {}, out, err), kExitRuntime);

  std::string text = slurp(path("out/state.json"));
  std::ofstream(path("cut.json")) << text.substr(0, text.size() / 2);
  EXPECT_EQ(cmd_eval(path("cut.json"), "test", 5, "", {}, out, err), kExitRuntime);
  std::ofstream(path("junk.json")) << "{\"format\": \"something-else\"}";
  EXPECT_EQ(cmd_eval(path("junk.json"), "test", 5, "", {}, out, err), kExitRuntime);
}

TEST_F(Harness, EvalMatchesLibrary) {
  std::ostringstream err, out;
  ASSERT_EQ(cmd_train(write_config(to_toml(tiny_config())), path("out"), {}, err), kExitOk);
  ASSERT_EQ(cmd_eval(path("out/state.json"), "test", 8, "", {}, out, err), kExitOk);
  const MetaState s = load_snapshot(path("out/state.json"));
  const TaskGenerator gen(s.config.generator, s.config.generator_seed);
  const EvalResult r = evaluate(s, gen, Split::Test, 8, std::nullopt, 1);
  EXPECT_EQ(out.str(), format_accuracy(r.mean, r.ci95) + "\n");
}

TEST_F(Harness, TraceRowCount) {
  RunConfig c = tiny_config();
  c.constrained = true;
  std::ostringstream err;
  ASSERT_EQ(cmd_train(write_config(to_toml(c)), path("out"), {}, err), kExitOk);
  ASSERT_EQ(cmd_trace(path("out/state.json"), path("trace.csv"), err), kExitOk);
  std::ifstream in(path("trace.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,quantity,epoch_index,value");
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const double v = std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(n, 2 * c.M * c.meta_iterations);

  fs::remove(dir_ / "out" / "history.csv");
  EXPECT_EQ(cmd_trace(path("out/state.json"), path("trace2.csv"), err), kExitRuntime);
}

TEST_F(Harness, AblationGridAndSharedSeeds) {
  const auto grid = ablation_grid();
  ASSERT_EQ(grid.size(), 9u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(grid[i].a_mode, AMode::Fixed);
  for (std::size_t i = 5; i < 9; ++i) EXPECT_EQ(grid[i].v_mode, VMode::LastEpoch);

  std::ostringstream err;
  RunConfig c = tiny_config();
  c.meta_iterations = 3;
  ASSERT_EQ(cmd_ablate(write_config(to_toml(c)), path("ab"), {}, err), kExitOk) << err.str();
  std::ifstream in(path("ab/ablation.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  rows = lines.size();
  EXPECT_EQ(rows, 9u);
  // v5 and a4 are the same cell.
  EXPECT_EQ(lines[4].substr(2), lines[8].substr(2));

  const auto seeds = nlohmann::json::parse(slurp(path("ab/episode_seeds.json")));
  ASSERT_EQ(seeds.size(), 9u);
  for (const auto& [k, v] : seeds.items()) EXPECT_EQ(v, seeds.at("v1")) << k;
  EXPECT_TRUE(fs::exists(dir_ / "ab" / "ablation.txt"));
}

}  // namespace

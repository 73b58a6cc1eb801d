#include <gtest/gtest.h>

#include <cstring>
#include <set>
#include <sstream>

#include "e3bm/episode.hpp"

namespace {

using namespace e3bm;

// Measured once with the oracle below; see DefaultGeneratorCalibration.
constexpr double kCalibration = 0.99976;

GeneratorConfig default_generator() { return GeneratorConfig{}; }

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

TEST(SampleEpisode, FiveWayOneShotShape) {
  const GaussianClusters gen(default_generator(), 1);
  const Episode ep = gen.sample(Split::Train, 5, 1, 15, 0);
  EXPECT_EQ(ep.train_x.shape, Shape::matrix(5, 16));
  EXPECT_EQ(ep.test_x.shape, Shape::matrix(75, 16));
  EXPECT_EQ(std::multiset<std::size_t>(ep.train_y.begin(), ep.train_y.end()),
            (std::multiset<std::size_t>{0, 1, 2, 3, 4}));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(std::count(ep.test_y.begin(), ep.test_y.end(), k), 15);
}

TEST(SampleEpisode, DeterministicUnderSeeds) {
  const GaussianClusters a(default_generator(), 9), b(default_generator(), 9);
  const Episode e1 = a.sample(Split::Val, 5, 2, 3, 77), e2 = b.sample(Split::Val, 5, 2, 3, 77);
  EXPECT_TRUE(same_bits(e1.train_x, e2.train_x));
  EXPECT_TRUE(same_bits(e1.test_x, e2.test_x));
  EXPECT_EQ(e1.train_y, e2.train_y);
  EXPECT_EQ(e1.meta.class_permutation, e2.meta.class_permutation);
  const Episode e3 = a.sample(Split::Val, 5, 2, 3, 78);
  EXPECT_FALSE(same_bits(e1.train_x, e3.train_x));
}

TEST(SampleEpisode, ZeroNoiseIsPerfectlySeparable) {
  GeneratorConfig cfg = default_generator();
  cfg.noise_sigma = 0.0;
  const GaussianClusters gen(cfg, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    EXPECT_EQ(centroid_oracle(gen.sample(Split::Test, 5, 1, 15, s)), 1.0);
  }
}

TEST(SampleEpisode, NExceedingPoolIsAnError) {
  const GaussianClusters gen(default_generator(), 1);
  try {
    gen.sample(Split::Val, 17, 1, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
  EXPECT_NO_THROW(gen.sample(Split::Val, 16, 1, 1, 0));
}

TEST(SampleEpisode, PoolsAreDisjoint) {
  const GaussianClusters gen(default_generator(), 1);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (auto id : gen.pool(s)) seen.insert(id);
    total += gen.pool_size(s);
  }
  EXPECT_EQ(seen.size(), total);
  EXPECT_EQ(total, 100u);

  // sampled episodes only draw from their own split's pool
  const auto test_pool = gen.pool(Split::Test);
  const std::set<std::size_t> allowed(test_pool.begin(), test_pool.end());
  for (std::uint64_t s = 0; s < 200; ++s) {
    for (auto id : gen.sample(Split::Test, 5, 1, 1, s).meta.class_permutation) EXPECT_TRUE(allowed.count(id));
  }
}

// Property: label balance holds for 10,000 random episodes, and train/test
// rows are distinct draws.
TEST(SampleEpisode, LabelBalanceProperty) {
  GeneratorConfig cfg = default_generator();
  cfg.dim = 3;
  const GaussianClusters gen(cfg, 5);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t N = 1 + rng() % 8, K = 1 + rng() % 3, Q = 1 + rng() % 4;
    const Split split = static_cast<Split>(rng() % 3);
    const Episode ep = gen.sample(split, N, K, Q, rng());
    ASSERT_FALSE(check_episode(ep, N, K, Q).has_value()) << *check_episode(ep, N, K, Q);
    std::set<std::vector<double>> rows;
    for (std::size_t r = 0; r < ep.train_x.rows(); ++r)
      rows.insert({ep.train_x.data.begin() + r * 3, ep.train_x.data.begin() + r * 3 + 3});
    for (std::size_t r = 0; r < ep.test_x.rows(); ++r)
      ASSERT_FALSE(rows.count({ep.test_x.data.begin() + r * 3, ep.test_x.data.begin() + r * 3 + 3}));
  }
}

TEST(SampleEpisode, LabelsArePermutedPerEpisode) {
  const GaussianClusters gen(default_generator(), 2);
  std::set<std::vector<std::size_t>> perms;
  for (std::uint64_t s = 0; s < 50; ++s) perms.insert(gen.sample(Split::Train, 5, 1, 1, s).meta.class_permutation);
  EXPECT_GT(perms.size(), 45u);
}

TEST(CentroidOracle, TieGoesToLowerClass) {
  Episode ep;
  ep.train_x = Tensor::from_rows({{-1.0, 0.0}, {1.0, 0.0}});
  ep.train_y = {0, 1};
  ep.test_x = Tensor::from_rows({{0.0, 5.0}, {0.0, -2.0}});
  ep.test_y = {0, 1};
  EXPECT_DOUBLE_EQ(centroid_oracle(ep), 0.5);
}

// Calibration of the default generator: mean nearest-centroid accuracy over
// 1000 5-way 1-shot test episodes. The measured value (seed 0) is frozen here.
TEST(CentroidOracle, DefaultGeneratorCalibration) {
  const GaussianClusters gen(default_generator(), 0);
  double total = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) total += centroid_oracle(gen.sample(Split::Test, 5, 1, 15, s));
  const double mean = total / 1000.0;
  RecordProperty("calibration", std::to_string(mean));
  EXPECT_GE(mean, 0.97);
  EXPECT_NEAR(mean, kCalibration, 1e-9);
}

TEST(EpisodeCsv, RoundTrip) {
  const GaussianClusters gen(default_generator(), 4);
  std::vector<Episode> eps{gen.sample(Split::Train, 3, 2, 2, 1), gen.sample(Split::Test, 4, 1, 3, 2)};
  std::stringstream buf;
  write_episodes(buf, eps);
  const auto back = read_episodes(buf);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(same_bits(back[i].train_x, eps[i].train_x));
    EXPECT_TRUE(same_bits(back[i].test_x, eps[i].test_x));
    EXPECT_EQ(back[i].train_y, eps[i].train_y);
    EXPECT_EQ(back[i].test_y, eps[i].test_y);
    EXPECT_EQ(back[i].meta.split, eps[i].meta.split);
  }
}

TEST(EpisodeCsv, EmptyInputGivesNoEpisodes) {
  std::stringstream empty;
  EXPECT_TRUE(read_episodes(empty).empty());
  std::stringstream header_only("episode_id,split,role,label,f0\n");
  EXPECT_TRUE(read_episodes(header_only).empty());
}

TEST(EpisodeCsv, ExtraClassOccurrenceIsRejectedByName) {
  std::stringstream in(
      "episode_id,split,role,label,f0\n"
      "0,train,train,0,0.1\n"
      "0,train,train,1,0.2\n"
      "0,train,train,2,0.3\n"
      "0,train,train,2,0.4\n"
      "0,train,test,0,0.5\n"
      "0,train,test,1,0.6\n"
      "0,train,test,2,0.7\n");
  try {
    read_episodes(in);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos) << e.what();
    EXPECT_EQ(e.line(), 5u);
  }
}

TEST(EpisodeCsv, MalformedRowsReportLineNumbers) {
  auto line_of = [](const std::string& body) -> std::size_t {
    std::stringstream in("episode_id,split,role,label,f0,f1\n" + body);
    try {
      read_episodes(in);
    } catch (const FormatError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("0,train,train,0,1.0,2.0\n0,train,train,1,1.0\n"), 3u);
  EXPECT_EQ(line_of("0,train,train,0,1.0,abc\n"), 2u);
  EXPECT_EQ(line_of("0,train,query,0,1.0,2.0\n"), 2u);
  EXPECT_EQ(line_of("0,holdout,train,0,1.0,2.0\n"), 2u);
  EXPECT_EQ(line_of("x,train,train,0,1.0,2.0\n"), 2u);
  std::stringstream bad_header("id,split,role,label\n");
  EXPECT_THROW(read_episodes(bad_header), FormatError);
}

TEST(FileEpisodes, ServesEpisodesBySplit) {
  const GaussianClusters gen(default_generator(), 4);
  std::vector<Episode> eps{gen.sample(Split::Train, 3, 1, 2, 1), gen.sample(Split::Test, 3, 1, 2, 2)};
  const FileEpisodes files(eps);
  EXPECT_EQ(files.count(Split::Train), 1u);
  EXPECT_TRUE(same_bits(files.sample(Split::Test, 3, 1, 2, 5).test_x, eps[1].test_x));
  EXPECT_THROW(files.sample(Split::Val, 3, 1, 2, 0), Error);
  EXPECT_THROW(files.sample(Split::Train, 3, 2, 2, 0), Error);
}

}  // namespace

#pragma once

// Synthetic N-way K-shot episodes, the episode CSV format, and the
// nearest-centroid difficulty oracle.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "e3bm/error.hpp"
#include "e3bm/rng.hpp"
#include "e3bm/tensor.hpp"

namespace e3bm {

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

struct EpisodeMeta {
  std::string generator;                     // "gaussian-clusters" or "file"
  std::uint64_t seed = 0;                    // episode seed (or episode id for files)
  Split split = Split::Train;
  std::vector<std::size_t> class_permutation;  // latent class id of each local label
};

struct Episode {
  Tensor train_x;                     // [N*K x d]
  std::vector<std::size_t> train_y;   // local labels 0..N-1
  Tensor test_x;                      // [N*Q x d]
  std::vector<std::size_t> test_y;
  EpisodeMeta meta;

  std::size_t dim() const noexcept { return train_x.cols(); }
  std::size_t ways() const {
    std::size_t n = 0;
    for (auto y : train_y) n = std::max(n, y + 1);
    return n;
  }
};

// Checks the label-balance invariants: every class 0..N-1 appears exactly K
// times in train and Q times in test. Returns a message naming the offending
// class, or nullopt when valid.
inline std::optional<std::string> check_episode(const Episode& ep, std::size_t N, std::size_t K, std::size_t Q) {
  if (ep.train_x.rows() != ep.train_y.size() || ep.test_x.rows() != ep.test_y.size()) {
    return "row count does not match label count";
  }
  if (ep.train_x.cols() != ep.test_x.cols()) return "train and test feature dims differ";
  auto count = [&](const std::vector<std::size_t>& ys, std::size_t expected, const char* role)
      -> std::optional<std::string> {
    std::vector<std::size_t> c(N, 0);
    for (auto y : ys) {
      if (y >= N) return std::string(role) + " label " + std::to_string(y) + " outside 0.." + std::to_string(N - 1);
      ++c[y];
    }
    for (std::size_t k = 0; k < N; ++k) {
      if (c[k] != expected) {
        return "class " + std::to_string(k) + " appears " + std::to_string(c[k]) + " times in " + role +
               ", expected " + std::to_string(expected);
      }
    }
    return std::nullopt;
  };
  if (auto e = count(ep.train_y, K, "train")) return e;
  return count(ep.test_y, Q, "test");
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  std::string kind = "gaussian-clusters";  // or "file"
  std::size_t dim = 16;
  std::size_t pool_train = 64;
  std::size_t pool_val = 16;
  std::size_t pool_test = 20;
  double separation = 2.0;
  double noise_sigma = 0.5;
  std::string path;  // episode CSV for kind = "file"

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

// Gaussian-cluster task distribution. Latent classes are split into disjoint
// train/val/test pools; class c has a fixed mean drawn once per generator seed.
class GaussianClusters {
 public:
  GaussianClusters(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    const std::size_t total = cfg.pool_train + cfg.pool_val + cfg.pool_test;
    means_.reserve(total);
    for (std::size_t c = 0; c < total; ++c) {
      std::mt19937_64 rng(derive_seed(seed, "class-mean", {c}));
      std::uniform_real_distribution<double> u(-cfg.separation, cfg.separation);
      std::vector<double> mu(cfg.dim);
      for (double& v : mu) v = u(rng);
      means_.push_back(std::move(mu));
    }
  }

  std::size_t pool_size(Split s) const noexcept {
    switch (s) {
      case Split::Train: return cfg_.pool_train;
      case Split::Val: return cfg_.pool_val;
      case Split::Test: return cfg_.pool_test;
    }
    return 0;
  }

  // Latent class ids belonging to a split. Pools are contiguous and disjoint.
  std::vector<std::size_t> pool(Split s) const {
    std::size_t first = 0;
    if (s != Split::Train) first += cfg_.pool_train;
    if (s == Split::Test) first += cfg_.pool_val;
    std::vector<std::size_t> ids(pool_size(s));
    std::iota(ids.begin(), ids.end(), first);
    return ids;
  }

  const std::vector<double>& class_mean(std::size_t latent) const { return means_.at(latent); }
  const GeneratorConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }

  Episode sample(Split split, std::size_t N, std::size_t K, std::size_t Q, std::uint64_t episode_seed) const {
    const std::size_t pool_n = pool_size(split);
    if (N > pool_n) {
      throw Error("sample_episode: N = " + std::to_string(N) + " exceeds the " + split_name(split) +
                  " pool size " + std::to_string(pool_n));
    }
    if (N == 0 || K == 0 || Q == 0) throw Error("sample_episode: N, K and Q must be at least 1");

    std::mt19937_64 rng(derive_seed(seed_, split_name(split), {episode_seed}));
    std::vector<std::size_t> ids = pool(split);
    // Partial Fisher-Yates: the first N entries are the episode's classes,
    // in local-label order.
    for (std::size_t i = 0; i < N; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(N);

    const std::size_t d = cfg_.dim;
    Episode ep;
    ep.train_x = Tensor::zeros(Shape::matrix(N * K, d));
    ep.test_x = Tensor::zeros(Shape::matrix(N * Q, d));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t label = 0; label < N; ++label) {
      const auto& mu = means_[ids[label]];
      for (std::size_t s = 0; s < K + Q; ++s) {
        const bool is_train = s < K;
        Tensor& x = is_train ? ep.train_x : ep.test_x;
        const std::size_t row = is_train ? label * K + s : label * Q + (s - K);
        for (std::size_t j = 0; j < d; ++j) x(row, j) = mu[j] + cfg_.noise_sigma * noise(rng);
      }
      for (std::size_t s = 0; s < K; ++s) ep.train_y.push_back(label);
      for (std::size_t s = 0; s < Q; ++s) ep.test_y.push_back(label);
    }
    ep.meta = {"gaussian-clusters", episode_seed, split, std::move(ids)};
    return ep;
  }

 private:
  GeneratorConfig cfg_;
  std::uint64_t seed_;
  std::vector<std::vector<double>> means_;
};

// ---------------------------------------------------------------------------
// Episode CSV
//   episode_id,split,role,label,f0,...,f{d-1}
// One sample per row, role in {train,test}, values written with 17
// significant digits.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline void write_episodes(std::ostream& out, const std::vector<Episode>& episodes) {
  const std::size_t d = episodes.empty() ? 0 : episodes.front().dim();
  out << "episode_id,split,role,label";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    if (ep.dim() != d) throw Error("save_episodes: episodes have different feature dims");
    auto rows = [&](const Tensor& x, const std::vector<std::size_t>& y, const char* role) {
      for (std::size_t r = 0; r < x.rows(); ++r) {
        out << e << ',' << split_name(ep.meta.split) << ',' << role << ',' << y[r];
        for (std::size_t j = 0; j < d; ++j) out << ',' << format_double(x(r, j));
        out << '\n';
      }
    };
    rows(ep.train_x, ep.train_y, "train");
    rows(ep.test_x, ep.test_y, "test");
  }
}

inline void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path);
  if (!out) throw Error("save_episodes: cannot open " + path);
  write_episodes(out, episodes);
  if (!out) throw Error("save_episodes: write failed for " + path);
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

inline double parse_double(std::string_view s, std::size_t line) {
  // strtod accepts the %.17g output exactly and is locale-independent for "C".
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || !std::isfinite(v)) {
    throw FormatError(line, "invalid number '" + tmp + "'");
  }
  return v;
}

inline std::size_t parse_index(std::string_view s, std::size_t line, const char* what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError(line, std::string("invalid ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

inline std::vector<Episode> read_episodes(std::istream& in) {
  struct Pending {
    std::string split;
    std::vector<std::vector<double>> train_rows, test_rows;
    std::vector<std::size_t> train_y, test_y;
    std::vector<std::size_t> train_lines, test_lines;
    std::size_t last_line = 0;
  };
  std::string line;
  std::size_t lineno = 0;
  std::size_t d = 0;
  std::vector<std::size_t> order;
  std::map<std::size_t, Pending> pending;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line.empty()) continue;
      const auto head = detail::split_csv(line);
      if (head.size() < 4 || head[0] != "episode_id" || head[1] != "split" || head[2] != "role" || head[3] != "label") {
        throw FormatError(lineno, "header must start with episode_id,split,role,label");
      }
      d = head.size() - 4;
      for (std::size_t j = 0; j < d; ++j) {
        if (head[4 + j] != "f" + std::to_string(j)) throw FormatError(lineno, "expected feature column f" + std::to_string(j));
      }
      continue;
    }
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != d + 4) {
      throw FormatError(lineno, "expected " + std::to_string(d + 4) + " fields, got " + std::to_string(f.size()));
    }
    const std::size_t id = detail::parse_index(f[0], lineno, "episode_id");
    if (!parse_split(f[1])) throw FormatError(lineno, "unknown split '" + std::string(f[1]) + "'");
    if (f[2] != "train" && f[2] != "test") throw FormatError(lineno, "role must be train or test");
    const std::size_t label = detail::parse_index(f[3], lineno, "label");
    std::vector<double> row(d);
    for (std::size_t j = 0; j < d; ++j) row[j] = detail::parse_double(f[4 + j], lineno);

    auto [it, inserted] = pending.try_emplace(id);
    Pending& p = it->second;
    if (inserted) {
      order.push_back(id);
      p.split = std::string(f[1]);
    } else if (p.split != f[1]) {
      throw FormatError(lineno, "episode " + std::to_string(id) + " changes split");
    }
    if (f[2] == "train") {
      p.train_rows.push_back(std::move(row));
      p.train_y.push_back(label);
      p.train_lines.push_back(lineno);
    } else {
      p.test_rows.push_back(std::move(row));
      p.test_y.push_back(label);
      p.test_lines.push_back(lineno);
    }
    p.last_line = lineno;
  }

  // Most frequent per-class count; ties resolve to the smaller count.
  auto expected_count = [](const std::vector<std::size_t>& counts) {
    std::map<std::size_t, std::size_t> freq;
    for (auto c : counts) ++freq[c];
    std::size_t best = 0, best_freq = 0;
    for (auto [c, n] : freq) {
      if (n > best_freq) {
        best = c;
        best_freq = n;
      }
    }
    return best;
  };

  std::vector<Episode> episodes;
  for (std::size_t id : order) {
    Pending& p = pending[id];
    std::size_t N = 0;
    for (auto y : p.train_y) N = std::max(N, y + 1);
    for (auto y : p.test_y) N = std::max(N, y + 1);
    auto validate = [&](const std::vector<std::size_t>& ys, const std::vector<std::size_t>& lines, const char* role) {
      std::vector<std::size_t> counts(N, 0);
      for (auto y : ys) ++counts[y];
      const std::size_t expected = expected_count(counts);
      if (expected == 0) throw FormatError(p.last_line, "episode " + std::to_string(id) + " has no " + role + " rows");
      std::vector<std::size_t> seen(N, 0);
      for (std::size_t i = 0; i < ys.size(); ++i) {
        if (++seen[ys[i]] > expected) {
          throw FormatError(lines[i], "episode " + std::to_string(id) + ": class " + std::to_string(ys[i]) +
                                          " appears " + std::to_string(counts[ys[i]]) + " times in " + role +
                                          ", expected " + std::to_string(expected));
        }
      }
      for (std::size_t k = 0; k < N; ++k) {
        if (counts[k] != expected) {
          throw FormatError(p.last_line, "episode " + std::to_string(id) + ": class " + std::to_string(k) +
                                             " appears " + std::to_string(counts[k]) + " times in " + role +
                                             ", expected " + std::to_string(expected));
        }
      }
    };
    validate(p.train_y, p.train_lines, "train");
    validate(p.test_y, p.test_lines, "test");

    auto to_tensor = [&](const std::vector<std::vector<double>>& rows) {
      Tensor t = Tensor::zeros(Shape::matrix(rows.size(), d));
      for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + r * d);
      return t;
    };
    Episode ep;
    ep.train_x = to_tensor(p.train_rows);
    ep.train_y = std::move(p.train_y);
    ep.test_x = to_tensor(p.test_rows);
    ep.test_y = std::move(p.test_y);
    ep.meta.generator = "file";
    ep.meta.seed = id;
    ep.meta.split = *parse_split(p.split);
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_episodes: cannot open " + path);
  return read_episodes(in);
}

// Episodes read from a CSV file, served by split.
class FileEpisodes {
 public:
  explicit FileEpisodes(std::vector<Episode> episodes) {
    for (auto& ep : episodes) by_split_[static_cast<int>(ep.meta.split)].push_back(std::move(ep));
  }

  std::size_t count(Split s) const noexcept { return by_split_[static_cast<int>(s)].size(); }
  std::size_t dim() const noexcept {
    for (const auto& pool : by_split_) {
      if (!pool.empty()) return pool.front().dim();
    }
    return 0;
  }

  Episode sample(Split split, std::size_t N, std::size_t K, std::size_t Q, std::uint64_t episode_seed) const {
    const auto& pool = by_split_[static_cast<int>(split)];
    if (pool.empty()) throw Error(std::string("file episodes: no episodes for split ") + split_name(split));
    const Episode& ep = pool[episode_seed % pool.size()];
    if (auto err = check_episode(ep, N, K, Q)) {
      throw Error("file episodes: episode " + std::to_string(ep.meta.seed) + " is not " + std::to_string(N) + "-way " +
                  std::to_string(K) + "-shot with " + std::to_string(Q) + " queries: " + *err);
    }
    return ep;
  }

 private:
  std::vector<Episode> by_split_[3];
};

// Either task source behind one sampling interface.
class TaskGenerator {
 public:
  TaskGenerator(const GeneratorConfig& cfg, std::uint64_t seed) : impl_(make(cfg, seed)) {}

  Episode sample(Split split, std::size_t N, std::size_t K, std::size_t Q, std::uint64_t episode_seed) const {
    return std::visit([&](const auto& g) { return g.sample(split, N, K, Q, episode_seed); }, impl_);
  }

  std::size_t dim() const {
    if (const auto* g = std::get_if<GaussianClusters>(&impl_)) return g->config().dim;
    return std::get<FileEpisodes>(impl_).dim();
  }

 private:
  static std::variant<GaussianClusters, FileEpisodes> make(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.kind == "gaussian-clusters") return GaussianClusters(cfg, seed);
    if (cfg.kind == "file") return FileEpisodes(load_episodes(cfg.path));
    throw Error("unknown generator kind '" + cfg.kind + "'");
  }

  std::variant<GaussianClusters, FileEpisodes> impl_;
};

// ---------------------------------------------------------------------------
// Nearest-centroid oracle
// ---------------------------------------------------------------------------

// Fraction of test points whose nearest train-class centroid (Euclidean) is
// their own class. Ties go to the lower class index.
inline double centroid_oracle(const Episode& ep) {
  const std::size_t N = ep.ways();
  const std::size_t d = ep.dim();
  std::vector<double> centroid(N * d, 0.0);
  std::vector<std::size_t> counts(N, 0);
  for (std::size_t r = 0; r < ep.train_x.rows(); ++r) {
    const std::size_t y = ep.train_y[r];
    ++counts[y];
    for (std::size_t j = 0; j < d; ++j) centroid[y * d + j] += ep.train_x(r, j);
  }
  for (std::size_t k = 0; k < N; ++k) {
    for (std::size_t j = 0; j < d; ++j) centroid[k * d + j] /= static_cast<double>(std::max<std::size_t>(counts[k], 1));
  }
  std::size_t correct = 0;
  for (std::size_t r = 0; r < ep.test_x.rows(); ++r) {
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = ep.test_x(r, j) - centroid[k * d + j];
        dist += diff * diff;
      }
      if (k == 0 || dist < best_dist) {
        best = k;
        best_dist = dist;
      }
    }
    if (best == ep.test_y[r]) ++correct;
  }
  return ep.test_x.rows() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(ep.test_x.rows());
}

}  // namespace e3bm

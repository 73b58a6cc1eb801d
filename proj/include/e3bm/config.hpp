#pragma once

// Run configuration: TOML loading with strict schema validation, a canonical
// TOML emitter for --print-defaults, and a stable config hash.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>
#include <toml.hpp>

#include "e3bm/engine.hpp"
#include "e3bm/episode.hpp"
#include "e3bm/error.hpp"

namespace e3bm {

enum class VInit { Uniform, LastOne };
enum class ThetaOptimizer { Sgd, Adam };

struct RunConfig {
  std::size_t N = 5;
  std::size_t K = 1;
  std::size_t Q = 15;
  std::size_t M = 3;
  Mode mode = Mode::Transductive;
  HyperpriorKind hyperprior = HyperpriorKind::Lstm;
  std::size_t hidden_dim = 16;   // H of the LSTM hyperprior
  std::size_t base_hidden = 32;  // hidden width of the base MLP
  std::size_t meta_batch_size = 4;
  std::size_t meta_iterations = 2000;
  std::size_t eval_every = 100;
  std::size_t eval_episode_count = 200;
  std::size_t test_episode_count = 600;
  double beta1 = 1e-4;
  double beta2 = 1e-4;
  double beta_theta = 1e-3;
  double lambda1 = 1e-4;
  double lambda2 = 1e-4;
  double fixed_alpha = 1e-3;
  double alpha_init = 1e-3;
  VInit v_init = VInit::Uniform;
  bool constrained = false;
  Combine combine = Combine::Logits;
  ThetaOptimizer theta_optimizer = ThetaOptimizer::Sgd;
  AblationConfig ablation;
  std::string freeze_file;  // empty: none
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  std::uint64_t generator_seed = 0;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<Mode> {
  static constexpr std::pair<Mode, std::string_view> values[] = {{Mode::Inductive, "inductive"},
                                                                 {Mode::Transductive, "transductive"}};
};
template <>
struct EnumNames<HyperpriorKind> {
  static constexpr std::pair<HyperpriorKind, std::string_view> values[] = {{HyperpriorKind::Fc, "fc"},
                                                                           {HyperpriorKind::Lstm, "lstm"}};
};
template <>
struct EnumNames<VInit> {
  static constexpr std::pair<VInit, std::string_view> values[] = {{VInit::Uniform, "uniform"},
                                                                  {VInit::LastOne, "last-one"}};
};
template <>
struct EnumNames<Combine> {
  static constexpr std::pair<Combine, std::string_view> values[] = {{Combine::Logits, "logits"},
                                                                    {Combine::Probabilities, "probabilities"}};
};
template <>
struct EnumNames<ThetaOptimizer> {
  static constexpr std::pair<ThetaOptimizer, std::string_view> values[] = {{ThetaOptimizer::Sgd, "sgd"},
                                                                           {ThetaOptimizer::Adam, "adam"}};
};
template <>
struct EnumNames<VMode> {
  static constexpr std::pair<VMode, std::string_view> values[] = {{VMode::E3bm, "e3bm"},
                                                                  {VMode::Learnable, "learnable"},
                                                                  {VMode::Optimal, "optimal"},
                                                                  {VMode::Equal, "equal"},
                                                                  {VMode::LastEpoch, "last-epoch"}};
};
template <>
struct EnumNames<AMode> {
  static constexpr std::pair<AMode, std::string_view> values[] = {{AMode::E3bm, "e3bm"},
                                                                  {AMode::Learnable, "learnable"},
                                                                  {AMode::Optimal, "optimal"},
                                                                  {AMode::Fixed, "fixed"}};
};

}  // namespace detail

template <class E>
std::string enum_name(E e) {
  for (const auto& [v, name] : detail::EnumNames<E>::values)
    if (v == e) return std::string(name);
  return "?";
}

template <class E>
std::optional<E> parse_enum(std::string_view s) {
  for (const auto& [v, name] : detail::EnumNames<E>::values)
    if (name == s) return v;
  return std::nullopt;
}

template <class E>
std::string enum_choices() {
  std::string out;
  for (const auto& [v, name] : detail::EnumNames<E>::values) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void validate(const RunConfig& c) {
  auto require = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) throw ConfigError(field, msg);
  };
  require(c.N >= 2, "N", "must be at least 2");
  require(c.K >= 1, "K", "must be at least 1");
  require(c.Q >= 1, "Q", "must be at least 1");
  require(c.M >= 1 && c.M <= 100, "M", "must lie in [1, 100]");
  require(c.hidden_dim >= 1, "hidden_dim", "must be at least 1");
  require(c.base_hidden >= 1, "base_hidden", "must be at least 1");
  require(c.meta_batch_size >= 1, "meta_batch_size", "must be at least 1");
  require(c.eval_every >= 1, "eval_every", "must be at least 1");
  require(c.eval_episode_count >= 2, "eval_episode_count", "must be at least 2");
  require(c.test_episode_count >= 2, "test_episode_count", "must be at least 2");
  auto positive = [&](double v, const char* field) {
    require(std::isfinite(v) && v > 0.0, field, "must be a positive finite rate");
  };
  positive(c.beta1, "beta1");
  positive(c.beta2, "beta2");
  positive(c.beta_theta, "beta_theta");
  check_lambda(c.lambda1, "lambda1");
  check_lambda(c.lambda2, "lambda2");
  require(std::isfinite(c.fixed_alpha), "fixed_alpha", "must be finite");
  require(std::isfinite(c.alpha_init), "alpha_init", "must be finite");
  const bool optimal = c.ablation.v_mode == VMode::Optimal || c.ablation.a_mode == AMode::Optimal;
  require(!optimal || !c.freeze_file.empty(), "freeze_file", "\"optimal\" ablation modes need a freeze file");
  const GeneratorConfig& g = c.generator;
  require(g.kind == "gaussian-clusters" || g.kind == "file", "generator.kind",
          "must be one of: gaussian-clusters, file");
  require(g.kind != "file" || !g.path.empty(), "generator.path", "required when kind = \"file\"");
  require(g.dim >= 1, "generator.dim", "must be at least 1");
  require(g.pool_train >= 1 && g.pool_val >= 1 && g.pool_test >= 1, "generator.pool_train",
          "every pool must hold at least one class");
  require(std::isfinite(g.separation) && g.separation > 0.0, "generator.separation", "must be positive");
  require(std::isfinite(g.noise_sigma) && g.noise_sigma >= 0.0, "generator.noise_sigma", "must be non-negative");
  if (g.kind == "gaussian-clusters") {
    require(c.N <= std::min({g.pool_train, g.pool_val, g.pool_test}), "N",
            "exceeds the smallest class pool of the generator");
  }
}

// ---------------------------------------------------------------------------
// TOML
// ---------------------------------------------------------------------------

namespace detail {

// Reads the keys of one table; every key is required and unknown keys fail.
class TableReader {
 public:
  TableReader(const toml::table& table, std::string prefix) : table_(table), prefix_(std::move(prefix)) {}

  std::int64_t integer(const std::string& key, std::int64_t min) {
    const toml::node& n = at(key);
    const auto v = n.value_exact<std::int64_t>();
    if (!v) throw ConfigError(field(key), "expected an integer" + where(n));
    if (*v < min) throw ConfigError(field(key), "must be at least " + std::to_string(min) + where(n));
    return *v;
  }

  std::size_t size(const std::string& key, std::int64_t min) { return static_cast<std::size_t>(integer(key, min)); }

  double real(const std::string& key) {
    const toml::node& n = at(key);
    if (const auto f = n.value_exact<double>()) return *f;
    if (const auto i = n.value_exact<std::int64_t>()) return static_cast<double>(*i);
    throw ConfigError(field(key), "expected a number" + where(n));
  }

  bool boolean(const std::string& key) {
    const toml::node& n = at(key);
    const auto v = n.value_exact<bool>();
    if (!v) throw ConfigError(field(key), "expected true or false" + where(n));
    return *v;
  }

  std::string string(const std::string& key) {
    const toml::node& n = at(key);
    const auto v = n.value_exact<std::string>();
    if (!v) throw ConfigError(field(key), "expected a string" + where(n));
    return *v;
  }

  template <class E>
  E choice(const std::string& key) {
    const std::string s = string(key);
    if (auto e = parse_enum<E>(s)) return *e;
    throw ConfigError(field(key), "unknown value \"" + s + "\"; expected one of: " + enum_choices<E>());
  }

  const toml::table& table(const std::string& key) {
    const toml::node& n = at(key);
    if (!n.is_table()) throw ConfigError(field(key), "expected a table" + where(n));
    return *n.as_table();
  }

  void finish() const {
    for (const auto& [k, n] : table_) {
      const std::string key(k.str());
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown key" + where(n));
    }
  }

 private:
  const toml::node& at(const std::string& key) {
    seen_.insert(key);
    const toml::node* n = table_.get(key);
    if (!n) throw ConfigError(field(key), "missing required key");
    return *n;
  }
  std::string field(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  static std::string where(const toml::node& n) {
    const auto& src = n.source();
    return src.begin.line ? " (line " + std::to_string(src.begin.line) + ")" : "";
  }

  const toml::table& table_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_config(std::string_view text, const std::string& source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError("config", source + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
  RunConfig c;
  detail::TableReader r(root, "");
  c.N = r.size("N", 1);
  c.K = r.size("K", 1);
  c.Q = r.size("Q", 1);
  c.M = r.size("M", 1);
  c.mode = r.choice<Mode>("mode");
  c.hyperprior = r.choice<HyperpriorKind>("hyperprior");
  c.hidden_dim = r.size("hidden_dim", 1);
  c.base_hidden = r.size("base_hidden", 1);
  c.meta_batch_size = r.size("meta_batch_size", 1);
  c.meta_iterations = r.size("meta_iterations", 0);
  c.eval_every = r.size("eval_every", 1);
  c.eval_episode_count = r.size("eval_episode_count", 0);
  c.test_episode_count = r.size("test_episode_count", 0);
  c.beta1 = r.real("beta1");
  c.beta2 = r.real("beta2");
  c.beta_theta = r.real("beta_theta");
  c.lambda1 = r.real("lambda1");
  c.lambda2 = r.real("lambda2");
  c.fixed_alpha = r.real("fixed_alpha");
  c.alpha_init = r.real("alpha_init");
  c.v_init = r.choice<VInit>("v_init");
  c.constrained = r.boolean("constrained");
  c.combine = r.choice<Combine>("combine");
  c.theta_optimizer = r.choice<ThetaOptimizer>("theta_optimizer");
  c.ablation.v_mode = r.choice<VMode>("v_mode");
  c.ablation.a_mode = r.choice<AMode>("a_mode");
  c.freeze_file = r.string("freeze_file");
  c.seed = static_cast<std::uint64_t>(r.integer("seed", 0));

  detail::TableReader g(r.table("generator"), "generator");
  c.generator.kind = g.string("kind");
  c.generator.dim = g.size("dim", 1);
  c.generator.pool_train = g.size("pool_train", 1);
  c.generator.pool_val = g.size("pool_val", 1);
  c.generator.pool_test = g.size("pool_test", 1);
  c.generator.separation = g.real("separation");
  c.generator.noise_sigma = g.real("noise_sigma");
  c.generator.path = g.string("path");
  c.generator_seed = static_cast<std::uint64_t>(g.integer("seed", 0));
  g.finish();
  r.finish();

  validate(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path);
}

namespace detail {

// Shortest round-trip form that TOML still reads as a float.
inline std::string toml_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string toml_string(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string to_toml(const RunConfig& c) {
  using detail::toml_real;
  using detail::toml_string;
  std::ostringstream o;
  o << "# episode shape\n"
    << "N = " << c.N << "\nK = " << c.K << "\nQ = " << c.Q << "\n"
    << "\n# ensemble and hyperprior\n"
    << "M = " << c.M << "\n"
    << "mode = " << toml_string(enum_name(c.mode)) << "\n"
    << "hyperprior = " << toml_string(enum_name(c.hyperprior)) << "\n"
    << "hidden_dim = " << c.hidden_dim << "\n"
    << "base_hidden = " << c.base_hidden << "\n"
    << "\n# meta-training\n"
    << "meta_batch_size = " << c.meta_batch_size << "\n"
    << "meta_iterations = " << c.meta_iterations << "\n"
    << "eval_every = " << c.eval_every << "\n"
    << "eval_episode_count = " << c.eval_episode_count << "\n"
    << "test_episode_count = " << c.test_episode_count << "\n"
    << "beta1 = " << toml_real(c.beta1) << "\n"
    << "beta2 = " << toml_real(c.beta2) << "\n"
    << "beta_theta = " << toml_real(c.beta_theta) << "\n"
    << "theta_optimizer = " << toml_string(enum_name(c.theta_optimizer)) << "\n"
    << "lambda1 = " << toml_real(c.lambda1) << "\n"
    << "lambda2 = " << toml_real(c.lambda2) << "\n"
    << "fixed_alpha = " << toml_real(c.fixed_alpha) << "\n"
    << "alpha_init = " << toml_real(c.alpha_init) << "\n"
    << "v_init = " << toml_string(enum_name(c.v_init)) << "\n"
    << "constrained = " << (c.constrained ? "true" : "false") << "\n"
    << "combine = " << toml_string(enum_name(c.combine)) << "\n"
    << "\n# ablation\n"
    << "v_mode = " << toml_string(enum_name(c.ablation.v_mode)) << "\n"
    << "a_mode = " << toml_string(enum_name(c.ablation.a_mode)) << "\n"
    << "freeze_file = " << toml_string(c.freeze_file) << "\n"
    << "\nseed = " << c.seed << "\n"
    << "\n[generator]\n"
    << "kind = " << toml_string(c.generator.kind) << "\n"
    << "dim = " << c.generator.dim << "\n"
    << "pool_train = " << c.generator.pool_train << "\n"
    << "pool_val = " << c.generator.pool_val << "\n"
    << "pool_test = " << c.generator.pool_test << "\n"
    << "separation = " << toml_real(c.generator.separation) << "\n"
    << "noise_sigma = " << toml_real(c.generator.noise_sigma) << "\n"
    << "path = " << toml_string(c.generator.path) << "\n"
    << "seed = " << c.generator_seed << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// JSON and hashing
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["N"] = c.N;
  j["K"] = c.K;
  j["Q"] = c.Q;
  j["M"] = c.M;
  j["mode"] = enum_name(c.mode);
  j["hyperprior"] = enum_name(c.hyperprior);
  j["hidden_dim"] = c.hidden_dim;
  j["base_hidden"] = c.base_hidden;
  j["meta_batch_size"] = c.meta_batch_size;
  j["meta_iterations"] = c.meta_iterations;
  j["eval_every"] = c.eval_every;
  j["eval_episode_count"] = c.eval_episode_count;
  j["test_episode_count"] = c.test_episode_count;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["beta_theta"] = c.beta_theta;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["fixed_alpha"] = c.fixed_alpha;
  j["alpha_init"] = c.alpha_init;
  j["v_init"] = enum_name(c.v_init);
  j["constrained"] = c.constrained;
  j["combine"] = enum_name(c.combine);
  j["theta_optimizer"] = enum_name(c.theta_optimizer);
  j["v_mode"] = enum_name(c.ablation.v_mode);
  j["a_mode"] = enum_name(c.ablation.a_mode);
  j["freeze_file"] = c.freeze_file;
  j["seed"] = c.seed;
  j["generator"] = {{"kind", c.generator.kind},
                    {"dim", c.generator.dim},
                    {"pool_train", c.generator.pool_train},
                    {"pool_val", c.generator.pool_val},
                    {"pool_test", c.generator.pool_test},
                    {"separation", c.generator.separation},
                    {"noise_sigma", c.generator.noise_sigma},
                    {"path", c.generator.path},
                    {"seed", c.generator_seed}};
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  auto need = [&](const nlohmann::json& obj, const char* key) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key)) throw FormatError(0, std::string("config: missing key ") + key);
    return obj.at(key);
  };
  auto choice = [&]<class E>(const char* key, E*) {
    const auto e = parse_enum<E>(need(j, key).template get<std::string>());
    if (!e) throw FormatError(0, std::string("config: bad value for ") + key);
    return *e;
  };
  try {
    RunConfig c;
    c.N = need(j, "N").get<std::size_t>();
    c.K = need(j, "K").get<std::size_t>();
    c.Q = need(j, "Q").get<std::size_t>();
    c.M = need(j, "M").get<std::size_t>();
    c.mode = choice("mode", static_cast<Mode*>(nullptr));
    c.hyperprior = choice("hyperprior", static_cast<HyperpriorKind*>(nullptr));
    c.hidden_dim = need(j, "hidden_dim").get<std::size_t>();
    c.base_hidden = need(j, "base_hidden").get<std::size_t>();
    c.meta_batch_size = need(j, "meta_batch_size").get<std::size_t>();
    c.meta_iterations = need(j, "meta_iterations").get<std::size_t>();
    c.eval_every = need(j, "eval_every").get<std::size_t>();
    c.eval_episode_count = need(j, "eval_episode_count").get<std::size_t>();
    c.test_episode_count = need(j, "test_episode_count").get<std::size_t>();
    c.beta1 = need(j, "beta1").get<double>();
    c.beta2 = need(j, "beta2").get<double>();
    c.beta_theta = need(j, "beta_theta").get<double>();
    c.lambda1 = need(j, "lambda1").get<double>();
    c.lambda2 = need(j, "lambda2").get<double>();
    c.fixed_alpha = need(j, "fixed_alpha").get<double>();
    c.alpha_init = need(j, "alpha_init").get<double>();
    c.v_init = choice("v_init", static_cast<VInit*>(nullptr));
    c.constrained = need(j, "constrained").get<bool>();
    c.combine = choice("combine", static_cast<Combine*>(nullptr));
    c.theta_optimizer = choice("theta_optimizer", static_cast<ThetaOptimizer*>(nullptr));
    c.ablation.v_mode = choice("v_mode", static_cast<VMode*>(nullptr));
    c.ablation.a_mode = choice("a_mode", static_cast<AMode*>(nullptr));
    c.freeze_file = need(j, "freeze_file").get<std::string>();
    c.seed = need(j, "seed").get<std::uint64_t>();
    const auto& g = need(j, "generator");
    c.generator.kind = need(g, "kind").get<std::string>();
    c.generator.dim = need(g, "dim").get<std::size_t>();
    c.generator.pool_train = need(g, "pool_train").get<std::size_t>();
    c.generator.pool_val = need(g, "pool_val").get<std::size_t>();
    c.generator.pool_test = need(g, "pool_test").get<std::size_t>();
    c.generator.separation = need(g, "separation").get<double>();
    c.generator.noise_sigma = need(g, "noise_sigma").get<double>();
    c.generator.path = need(g, "path").get<std::string>();
    c.generator_seed = need(g, "seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("config: ") + e.what());
  }
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hash of the canonical JSON form (keys sorted, shortest round-trip numbers).
inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
  return buf;
}

// E3BM_SEED, when set, replaces the configured run seed.
inline void apply_seed_override(RunConfig& c, const char* env_value) {
  if (!env_value) return;
  std::uint64_t v = 0;
  const std::string_view s(env_value);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("E3BM_SEED", "expected a non-negative integer, got \"" + std::string(s) + "\"");
  }
  c.seed = v;
}

}  // namespace e3bm

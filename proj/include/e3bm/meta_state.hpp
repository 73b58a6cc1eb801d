#pragma once

// Everything meta-learned in one run, plus its versioned JSON snapshot.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "e3bm/config.hpp"
#include "e3bm/engine.hpp"
#include "e3bm/nets.hpp"
#include "e3bm/rng.hpp"

namespace e3bm {

// First and second moment estimates for the optional Adam update of theta,
// one tensor per theta tensor in traversal order.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct MetaState {
  MetaParams params;
  RunConfig config;
  std::size_t feature_dim = 0;
  std::uint64_t iteration = 0;
  std::optional<AdamState> adam;
};

inline bool operator==(const MetaParams& a, const MetaParams& b) {
  return flatten_values(a.theta) == flatten_values(b.theta) && flatten_values(a.psi_a) == flatten_values(b.psi_a) &&
         flatten_values(a.psi_v) == flatten_values(b.psi_v) && a.priors == b.priors &&
         a.psi_a.index() == b.psi_a.index() && a.psi_v.index() == b.psi_v.index();
}

inline bool operator==(const MetaState& a, const MetaState& b) {
  return a.params == b.params && a.config == b.config && a.feature_dim == b.feature_dim &&
         a.iteration == b.iteration && a.adam == b.adam;
}

inline PriorSchedule initial_priors(const RunConfig& c) {
  PriorSchedule p;
  p.alpha.assign(c.M, c.alpha_init);
  if (c.v_init == VInit::Uniform) {
    p.v.assign(c.M, 1.0 / static_cast<double>(c.M));
  } else {
    p.v.assign(c.M, 0.0);
    p.v.back() = 1.0;
  }
  return p;
}

// Untrained state: Glorot theta, hyperpriors that reproduce the priors.
inline MetaState init_state(const RunConfig& c, std::size_t feature_dim) {
  MetaState s;
  s.config = c;
  s.feature_dim = feature_dim;
  std::mt19937_64 theta_rng(derive_seed(c.seed, "theta"));
  const std::vector<std::size_t> dims{feature_dim, c.base_hidden, c.N};
  s.params.theta = init_mlp(dims, theta_rng);
  s.params.priors = initial_priors(c);
  const std::size_t d_sum = summary_dim(feature_dim, s.params.theta);
  auto make = [&](std::string_view tag) -> Hyperprior<Tensor> {
    if (c.hyperprior == HyperpriorKind::Fc) return init_fc_hyperprior(d_sum, s.params.priors);
    std::mt19937_64 rng(derive_seed(c.seed, tag));
    return init_lstm_hyperprior(d_sum, c.hidden_dim, s.params.priors, rng);
  };
  s.params.psi_a = make("psi_a");
  s.params.psi_v = make("psi_v");
  if (c.theta_optimizer == ThetaOptimizer::Adam) {
    AdamState a;
    for (const Tensor& t : flatten_values(s.params.theta)) {
      a.m.push_back(Tensor::zeros(t.shape));
      a.v.push_back(Tensor::zeros(t.shape));
    }
    s.adam = std::move(a);
  }
  return s;
}

inline bool all_finite(const MetaState& s) {
  bool ok = true;
  auto check = [&](const Tensor& t) { ok = ok && t.all_finite(); };
  for_each_tensor(s.params.theta, check);
  for_each_tensor(s.params.psi_a, check);
  for_each_tensor(s.params.psi_v, check);
  for (double a : s.params.priors.alpha) ok = ok && std::isfinite(a);
  for (double v : s.params.priors.v) ok = ok && std::isfinite(v);
  return ok;
}

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

inline constexpr const char* kSnapshotFormat = "e3bm-metastate";
inline constexpr int kSnapshotVersion = 1;

namespace detail {

inline nlohmann::json tensor_json(const Tensor& t) {
  return {{"shape", t.shape.dims()}, {"data", t.data}};
}

template <class P>
nlohmann::json params_json(const P& p) {
  nlohmann::json out = nlohmann::json::object();
  for_each_named(const_cast<P&>(p), "", [&](const std::string& name, const Tensor& t) { out[name] = tensor_json(t); });
  return out;
}

inline Tensor tensor_from_json(const nlohmann::json& j, const Shape& expected, const std::string& where) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
    throw FormatError(0, "snapshot: tensor " + where + " needs shape and data");
  }
  const auto dims = j.at("shape").get<std::vector<std::size_t>>();
  if (dims != expected.dims()) {
    throw FormatError(0, "snapshot: tensor " + where + " has shape " + j.at("shape").dump() + ", expected " +
                             expected.to_string());
  }
  Tensor t = Tensor::zeros(expected);
  const auto& data = j.at("data");
  if (!data.is_array() || data.size() != t.size()) {
    throw FormatError(0, "snapshot: tensor " + where + " has the wrong number of values");
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!data[i].is_number()) throw FormatError(0, "snapshot: tensor " + where + " holds a non-number");
    t.data[i] = data[i].get<double>();
  }
  if (!t.all_finite()) throw FormatError(0, "snapshot: tensor " + where + " holds non-finite values");
  return t;
}

// Fills every named tensor of `skeleton` from `j`; shapes must agree and no
// name may be missing or extra.
template <class P>
void params_from_json(P& skeleton, const nlohmann::json& j, const std::string& part) {
  if (!j.is_object()) throw FormatError(0, "snapshot: " + part + " must be an object");
  std::set<std::string> used;
  for_each_named(skeleton, "", [&](const std::string& name, Tensor& t) {
    if (!j.contains(name)) throw FormatError(0, "snapshot: " + part + " lacks tensor " + name);
    t = tensor_from_json(j.at(name), t.shape, part + "." + name);
    used.insert(name);
  });
  for (const auto& [k, v] : j.items()) {
    if (!used.count(k)) throw FormatError(0, "snapshot: " + part + " has unexpected tensor " + k);
  }
}

inline std::vector<double> finite_list(const nlohmann::json& j, std::size_t n, const std::string& where) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != n) throw FormatError(0, "snapshot: " + where + " must hold " + std::to_string(n) + " values");
  for (double x : v)
    if (!std::isfinite(x)) throw FormatError(0, "snapshot: " + where + " holds non-finite values");
  return v;
}

}  // namespace detail

inline nlohmann::json snapshot_json(const MetaState& s) {
  nlohmann::json j;
  j["format"] = kSnapshotFormat;
  j["version"] = kSnapshotVersion;
  j["config"] = to_json(s.config);
  j["feature_dim"] = s.feature_dim;
  j["iteration"] = s.iteration;
  j["theta"] = detail::params_json(s.params.theta);
  j["psi_a"] = detail::params_json(s.params.psi_a);
  j["psi_v"] = detail::params_json(s.params.psi_v);
  j["priors"] = {{"alpha", s.params.priors.alpha}, {"v", s.params.priors.v}};
  if (s.adam) {
    nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
    for (const Tensor& t : s.adam->m) m.push_back(detail::tensor_json(t));
    for (const Tensor& t : s.adam->v) v.push_back(detail::tensor_json(t));
    j["adam"] = {{"m", m}, {"v", v}, {"step", s.adam->step}};
  }
  return j;
}

inline std::string snapshot_text(const MetaState& s) { return snapshot_json(s).dump(1) + "\n"; }

inline MetaState state_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("format", "") != kSnapshotFormat) {
      throw FormatError(0, "snapshot: not an e3bm MetaState file");
    }
    if (j.value("version", -1) != kSnapshotVersion) {
      throw FormatError(0, "snapshot: unsupported version " + j.value("version", nlohmann::json()).dump());
    }
    const RunConfig config = config_from_json(j.at("config"));
    try {
      validate(config);
    } catch (const ConfigError& e) {
      throw FormatError(0, std::string("snapshot: invalid config: ") + e.what());
    }
    const auto feature_dim = j.at("feature_dim").get<std::size_t>();
    if (feature_dim == 0) throw FormatError(0, "snapshot: feature_dim must be positive");
    MetaState s = init_state(config, feature_dim);
    s.iteration = j.at("iteration").get<std::uint64_t>();
    detail::params_from_json(s.params.theta, j.at("theta"), "theta");
    detail::params_from_json(s.params.psi_a, j.at("psi_a"), "psi_a");
    detail::params_from_json(s.params.psi_v, j.at("psi_v"), "psi_v");
    s.params.priors.alpha = detail::finite_list(j.at("priors").at("alpha"), config.M, "priors.alpha");
    s.params.priors.v = detail::finite_list(j.at("priors").at("v"), config.M, "priors.v");
    if (s.adam) {
      if (!j.contains("adam")) throw FormatError(0, "snapshot: Adam optimizer state missing");
      const auto& a = j.at("adam");
      const auto& ms = a.at("m");
      const auto& vs = a.at("v");
      if (!ms.is_array() || !vs.is_array() || ms.size() != s.adam->m.size() || vs.size() != s.adam->v.size()) {
        throw FormatError(0, "snapshot: Adam moments do not match theta");
      }
      for (std::size_t i = 0; i < s.adam->m.size(); ++i) {
        s.adam->m[i] = detail::tensor_from_json(ms[i], s.adam->m[i].shape, "adam.m");
        s.adam->v[i] = detail::tensor_from_json(vs[i], s.adam->v[i].shape, "adam.v");
      }
      s.adam->step = a.at("step").get<std::uint64_t>();
    } else if (j.contains("adam")) {
      throw FormatError(0, "snapshot: Adam state present but theta_optimizer is sgd");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("snapshot: ") + e.what());
  }
}

inline MetaState parse_snapshot(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(0, std::string("snapshot: ") + e.what());
  }
  return state_from_json(j);
}

inline void save_snapshot(const std::string& path, const MetaState& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << snapshot_text(s);
  if (!out) throw Error("write failed: " + path);
}

inline MetaState load_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_snapshot(buf.str());
}

}  // namespace e3bm

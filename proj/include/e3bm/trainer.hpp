#pragma once

// Outer loop: sample meta-batches, run the inner loop per episode, descend
// the mean episode test loss, hand realized alpha/v back to the priors,
// evaluate with confidence intervals and keep the best-val state.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "e3bm/config.hpp"
#include "e3bm/engine.hpp"
#include "e3bm/episode.hpp"
#include "e3bm/meta_state.hpp"
#include "e3bm/rng.hpp"

namespace e3bm {

using Logger = std::function<void(const std::string&)>;

inline void log_to_stderr(const std::string& msg) { std::cerr << msg << '\n'; }

// Runs f(0..n-1) on up to `workers` threads. Results must be written to
// per-index slots so the outcome does not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Masks and per-episode pieces
// ---------------------------------------------------------------------------

// Which meta parameters an ablation setting trains.
struct TrainableMask {
  bool theta = true;
  bool psi_a = true;
  bool psi_v = true;
  bool alpha_prior = true;
  bool v_prior = true;
};

inline TrainableMask trainable_mask(const AblationConfig& ab) {
  TrainableMask m;
  m.psi_a = ab.a_mode == AMode::E3bm;
  m.psi_v = ab.v_mode == VMode::E3bm;
  m.alpha_prior = ab.a_mode == AMode::E3bm || ab.a_mode == AMode::Learnable;
  m.v_prior = ab.v_mode == VMode::E3bm || ab.v_mode == VMode::Learnable;
  return m;
}

inline InnerConfig inner_config(const RunConfig& c, const std::optional<FrozenSchedule>& frozen, bool create_graph) {
  InnerConfig ic;
  ic.epochs = c.M;
  ic.mode = c.mode;
  ic.lambda1 = c.lambda1;
  ic.lambda2 = c.lambda2;
  ic.fixed_alpha = c.fixed_alpha;
  ic.constrained = c.constrained;
  ic.combine = c.combine;
  ic.ablation = c.ablation;
  ic.frozen = frozen;
  ic.create_graph = create_graph;
  return ic;
}

// Softmax cross-entropy of the combined scores, averaged over the N*Q test rows.
inline ad::Var episode_test_loss(const InnerTrace& trace, std::span<const std::size_t> test_y) {
  return ad::softmax_cross_entropy(trace.y_hat, test_y);
}

inline MetaVars bind_masked(ad::Graph& g, const MetaParams& p, const TrainableMask& m) {
  MetaVars out{bind_params(g, p.theta, m.theta), bind_params(g, p.psi_a, m.psi_a), bind_params(g, p.psi_v, m.psi_v),
               {}, {}};
  for (double a : p.priors.alpha) out.alpha_prior.push_back(g.leaf(Tensor::scalar(a), m.alpha_prior));
  for (double v : p.priors.v) out.v_prior.push_back(g.leaf(Tensor::scalar(v), m.v_prior));
  return out;
}

// Gradients of one episode's test loss w.r.t. each trainable group; groups
// that are frozen stay empty.
struct MetaGradient {
  std::vector<Tensor> theta, psi_a, psi_v;
  std::vector<double> alpha_prior, v_prior;
};

struct EpisodeOutcome {
  bool ok = false;
  std::string error;
  double loss = 0.0;
  std::vector<double> alphas, vs;
  MetaGradient grad;
};

inline EpisodeOutcome episode_gradient(const MetaParams& params, const Episode& ep, const InnerConfig& ic,
                                       const TrainableMask& mask) {
  EpisodeOutcome out;
  try {
    ad::Graph g;
    const MetaVars mv = bind_masked(g, params, mask);
    const InnerTrace trace = inner_loop(g, ep, mv, ic);
    const ad::Var loss = episode_test_loss(trace, ep.test_y);
    out.loss = loss.item();
    for (const auto& a : trace.alphas) out.alphas.push_back(a.item());
    for (const auto& v : trace.vs) out.vs.push_back(v.item());
    if (!std::isfinite(out.loss)) {
      out.error = "non-finite episode test loss";
      return out;
    }
    std::vector<ad::Var> wrt;
    auto add = [&](bool on, const std::vector<ad::Var>& vars) {
      if (on) wrt.insert(wrt.end(), vars.begin(), vars.end());
    };
    add(mask.theta, flatten(mv.theta));
    add(mask.psi_a, flatten(mv.psi_a));
    add(mask.psi_v, flatten(mv.psi_v));
    add(mask.alpha_prior, mv.alpha_prior);
    add(mask.v_prior, mv.v_prior);
    const std::vector<ad::Var> grads = ad::grad(loss, wrt);
    std::size_t k = 0;
    auto take = [&](bool on, std::size_t n, std::vector<Tensor>& dst) {
      if (!on) return;
      for (std::size_t i = 0; i < n; ++i) dst.push_back(grads[k++].value());
    };
    take(mask.theta, tensor_count(params.theta), out.grad.theta);
    take(mask.psi_a, tensor_count(params.psi_a), out.grad.psi_a);
    take(mask.psi_v, tensor_count(params.psi_v), out.grad.psi_v);
    auto take_scalars = [&](bool on, std::size_t n, std::vector<double>& dst) {
      if (!on) return;
      for (std::size_t i = 0; i < n; ++i) dst.push_back(grads[k++].item());
    };
    take_scalars(mask.alpha_prior, params.priors.alpha.size(), out.grad.alpha_prior);
    take_scalars(mask.v_prior, params.priors.v.size(), out.grad.v_prior);
    out.ok = true;
  } catch (const NonFiniteError& e) {
    out.error = e.what();
  } catch (const DomainError& e) {
    out.error = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Meta step
// ---------------------------------------------------------------------------

struct StepReport {
  bool accepted = false;
  std::string warning;
  double loss = 0.0;               // batch mean episode test loss
  std::vector<double> alpha, v;    // batch mean realized values per epoch
};

namespace detail {

inline bool finite_all(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

inline bool finite_all(const std::vector<double>& xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& g, double w) {
  if (acc.empty()) {
    for (const Tensor& t : g) acc.push_back(Tensor::zeros(t.shape));
  }
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) acc[i].data[j] += w * g[i].data[j];
}

inline void accumulate(std::vector<double>& acc, const std::vector<double>& g, double w) {
  if (acc.empty()) acc.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += w * g[i];
}

template <class P>
void descend(P& params, const std::vector<Tensor>& grad, double rate) {
  std::size_t i = 0;
  for_each_tensor(params, [&](Tensor& t) {
    const Tensor& g = grad[i++];
    for (std::size_t j = 0; j < t.size(); ++j) t.data[j] -= rate * g.data[j];
  });
}

inline void adam_update(BaseParams& theta, AdamState& st, const std::vector<Tensor>& grad, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  std::size_t i = 0;
  for_each_tensor(theta, [&](Tensor& t) {
    const Tensor& g = grad[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t j = 0; j < t.size(); ++j) {
      m.data[j] = b1 * m.data[j] + (1.0 - b1) * g.data[j];
      v.data[j] = b2 * v.data[j] + (1.0 - b2) * g.data[j] * g.data[j];
      t.data[j] -= lr * (m.data[j] / c1) / (std::sqrt(v.data[j] / c2) + eps);
    }
    ++i;
  });
}

}  // namespace detail

// One meta step on `state` from `batch`. On any non-finite loss or gradient
// the state is left untouched and the report carries a warning.
inline StepReport meta_step(MetaState& state, const std::vector<Episode>& batch,
                            const std::optional<FrozenSchedule>& frozen = std::nullopt, std::size_t workers = 1) {
  if (batch.empty()) throw Error("meta_step: empty meta-batch");
  const RunConfig& c = state.config;
  const InnerConfig ic = inner_config(c, frozen, true);
  const TrainableMask mask = trainable_mask(c.ablation);

  std::vector<EpisodeOutcome> outcomes(batch.size());
  parallel_for(batch.size(), workers,
               [&](std::size_t b) { outcomes[b] = episode_gradient(state.params, batch[b], ic, mask); });

  StepReport report;
  const std::string where = "meta step " + std::to_string(state.iteration + 1);
  for (std::size_t b = 0; b < outcomes.size(); ++b) {
    if (!outcomes[b].ok) {
      report.warning = where + " rejected: episode " + std::to_string(b) + ": " + outcomes[b].error;
      report.loss = NAN;
      return report;
    }
  }

  // Sum in episode order so the result does not depend on the worker count.
  const double w = 1.0 / static_cast<double>(batch.size());
  MetaGradient total;
  for (const EpisodeOutcome& o : outcomes) {
    report.loss += w * o.loss;
    detail::accumulate(report.alpha, o.alphas, w);
    detail::accumulate(report.v, o.vs, w);
    detail::accumulate(total.theta, o.grad.theta, w);
    detail::accumulate(total.psi_a, o.grad.psi_a, w);
    detail::accumulate(total.psi_v, o.grad.psi_v, w);
    detail::accumulate(total.alpha_prior, o.grad.alpha_prior, w);
    detail::accumulate(total.v_prior, o.grad.v_prior, w);
  }
  if (!detail::finite_all(total.theta) || !detail::finite_all(total.psi_a) || !detail::finite_all(total.psi_v) ||
      !detail::finite_all(total.alpha_prior) || !detail::finite_all(total.v_prior) ||
      !detail::finite_all(report.alpha) || !detail::finite_all(report.v)) {
    report.warning = where + " rejected: non-finite meta-gradient";
    return report;
  }

  MetaState next = state;
  if (mask.theta) {
    if (c.theta_optimizer == ThetaOptimizer::Adam) {
      detail::adam_update(next.params.theta, *next.adam, total.theta, c.beta_theta);
    } else {
      detail::descend(next.params.theta, total.theta, c.beta_theta);
    }
  }
  if (mask.psi_a) detail::descend(next.params.psi_a, total.psi_a, c.beta1);
  if (mask.psi_v) detail::descend(next.params.psi_v, total.psi_v, c.beta2);
  for (std::size_t m = 0; m < total.alpha_prior.size(); ++m)
    next.params.priors.alpha[m] -= c.beta_theta * total.alpha_prior[m];
  for (std::size_t m = 0; m < total.v_prior.size(); ++m) next.params.priors.v[m] -= c.beta_theta * total.v_prior[m];

  // Cross-episode handoff: the next episodes' priors are this batch's
  // realized values. Priors share beta_theta, so a zero rate freezes them.
  if (c.beta_theta > 0.0) {
    if (c.ablation.a_mode == AMode::E3bm) next.params.priors.alpha = report.alpha;
    if (c.ablation.v_mode == VMode::E3bm) next.params.priors.v = report.v;
  }

  if (!all_finite(next)) {
    report.warning = where + " rejected: update produced non-finite parameters";
    return report;
  }
  next.iteration = state.iteration + 1;
  state = std::move(next);
  report.accepted = true;
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean = 0.0;
  double ci95 = 0.0;
  std::vector<double> accuracies;
  std::vector<std::uint64_t> episode_seeds;
};

// Mean and 1.96 * sample stddev / sqrt(n).
inline EvalResult summarize_accuracies(std::vector<double> accs) {
  if (accs.size() < 2) throw ConfigError("episodes", "at least 2 episodes are needed for a confidence interval");
  EvalResult r;
  const double n = static_cast<double>(accs.size());
  for (double a : accs) r.mean += a;
  r.mean /= n;
  double ss = 0.0;
  for (double a : accs) ss += (a - r.mean) * (a - r.mean);
  r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  r.accuracies = std::move(accs);
  return r;
}

// Episode seeds of an evaluation are 0..count-1 on the given split, so every
// state and ablation cell sees the same episodes.
inline std::vector<std::uint64_t> eval_seeds(std::size_t count) {
  std::vector<std::uint64_t> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = i;
  return s;
}

// An episode whose inner loop diverges has no prediction and scores 0.
inline double episode_accuracy(const MetaParams& params, const Episode& ep, const InnerConfig& ic) {
  ad::Graph g;
  const MetaVars mv = bind_meta(g, params, false);
  try {
    return predict(inner_loop(g, ep, mv, ic), ep.test_y).accuracy;
  } catch (const NonFiniteError&) {
    return 0.0;
  } catch (const DomainError&) {
    return 0.0;
  }
}

inline EvalResult evaluate(const MetaState& state, const TaskGenerator& gen, Split split, std::size_t episode_count,
                           const std::optional<FrozenSchedule>& frozen = std::nullopt, std::size_t workers = 1) {
  if (episode_count < 2) throw ConfigError("episodes", "at least 2 episodes are needed for a confidence interval");
  const RunConfig& c = state.config;
  const InnerConfig ic = inner_config(c, frozen, false);
  const auto seeds = eval_seeds(episode_count);
  std::vector<double> accs(episode_count);
  parallel_for(episode_count, workers, [&](std::size_t i) {
    accs[i] = episode_accuracy(state.params, gen.sample(split, c.N, c.K, c.Q, seeds[i]), ic);
  });
  EvalResult r = summarize_accuracies(std::move(accs));
  r.episode_seeds = seeds;
  return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryRow {
  std::size_t iteration = 0;
  std::optional<double> val_acc;
  std::optional<double> ci95;
  std::vector<double> alpha;  // empty for rejected steps
  std::vector<double> v;
  double train_loss = NAN;
};

struct TrainingResult {
  MetaState best;
  MetaState last;
  std::vector<HistoryRow> history;
  EvalResult initial_val;
  double best_val_acc = 0.0;
  std::size_t best_iteration = 0;
};

inline constexpr std::size_t kMaxConsecutiveRejections = 10;

inline std::uint64_t train_episode_seed(std::uint64_t run_seed, std::size_t iteration, std::size_t slot) {
  return derive_seed(run_seed, "train-episode", {iteration, slot});
}

inline TrainingResult run_meta_training(const RunConfig& config, const TaskGenerator& gen,
                                        const std::optional<FrozenSchedule>& frozen = std::nullopt,
                                        std::size_t workers = 1, const Logger& log = log_to_stderr) {
  validate(config);
  TrainingResult out;
  out.last = init_state(config, gen.dim());
  out.best = out.last;
  if (config.meta_iterations == 0) return out;

  out.initial_val = evaluate(out.last, gen, Split::Val, config.eval_episode_count, frozen, workers);
  out.best_val_acc = out.initial_val.mean;
  log("iteration 0: val " + std::to_string(100.0 * out.initial_val.mean));

  std::size_t rejected_in_a_row = 0;
  for (std::size_t it = 1; it <= config.meta_iterations; ++it) {
    std::vector<Episode> batch;
    for (std::size_t b = 0; b < config.meta_batch_size; ++b) {
      batch.push_back(gen.sample(Split::Train, config.N, config.K, config.Q, train_episode_seed(config.seed, it, b)));
    }
    const StepReport step = meta_step(out.last, batch, frozen, workers);
    HistoryRow row;
    row.iteration = it;
    row.train_loss = step.loss;
    if (step.accepted) {
      rejected_in_a_row = 0;
      row.alpha = step.alpha;
      row.v = step.v;
    } else {
      log("warning: " + step.warning);
      if (++rejected_in_a_row >= kMaxConsecutiveRejections) {
        throw NonFiniteError("aborting: " + std::to_string(kMaxConsecutiveRejections) +
                             " consecutive meta steps rejected (last at iteration " + std::to_string(it) + ")");
      }
    }
    if (it % config.eval_every == 0 || it == config.meta_iterations) {
      const EvalResult val = evaluate(out.last, gen, Split::Val, config.eval_episode_count, frozen, workers);
      row.val_acc = val.mean;
      row.ci95 = val.ci95;
      log("iteration " + std::to_string(it) + ": val " + std::to_string(100.0 * val.mean) + " loss " +
          std::to_string(step.loss));
      if (val.mean > out.best_val_acc) {
        out.best_val_acc = val.mean;
        out.best_iteration = it;
        out.best = out.last;
      }
    }
    out.history.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// History CSV and freeze file
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string history_header(std::size_t M) {
  std::string h = "iteration,val_acc,ci95";
  for (std::size_t m = 1; m <= M; ++m) h += ",alpha_" + std::to_string(m);
  for (std::size_t m = 1; m <= M; ++m) h += ",v_" + std::to_string(m);
  return h + ",train_loss";
}

inline void write_history(std::ostream& out, const std::vector<HistoryRow>& rows, std::size_t M) {
  out << history_header(M) << '\n';
  for (const HistoryRow& r : rows) {
    out << r.iteration << ',' << (r.val_acc ? detail::fmt17(*r.val_acc) : "") << ','
        << (r.ci95 ? detail::fmt17(*r.ci95) : "");
    for (std::size_t m = 0; m < M; ++m) out << ',' << (r.alpha.empty() ? "" : detail::fmt17(r.alpha[m]));
    for (std::size_t m = 0; m < M; ++m) out << ',' << (r.v.empty() ? "" : detail::fmt17(r.v[m]));
    out << ',' << detail::fmt17(r.train_loss) << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_real(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(line, "not a number: \"" + s + "\"");
  }
}

}  // namespace detail

inline std::vector<HistoryRow> read_history(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(1, "history: empty file");
  const auto head = detail::split_csv(line);
  if (head.size() < 4 || head[0] != "iteration" || head.back() != "train_loss" || (head.size() - 4) % 2 != 0) {
    throw FormatError(1, "history: unexpected header");
  }
  const std::size_t M = (head.size() - 4) / 2;
  if (line != history_header(M)) throw FormatError(1, "history: unexpected header");
  std::vector<HistoryRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != head.size()) {
      throw FormatError(lineno, "history: expected " + std::to_string(head.size()) + " fields, got " +
                                    std::to_string(cells.size()));
    }
    HistoryRow r;
    r.iteration = static_cast<std::size_t>(detail::parse_real(cells[0], lineno));
    if (!cells[1].empty()) r.val_acc = detail::parse_real(cells[1], lineno);
    if (!cells[2].empty()) r.ci95 = detail::parse_real(cells[2], lineno);
    if (!cells[3].empty()) {
      for (std::size_t m = 0; m < M; ++m) r.alpha.push_back(detail::parse_real(cells[3 + m], lineno));
      for (std::size_t m = 0; m < M; ++m) r.v.push_back(detail::parse_real(cells[3 + M + m], lineno));
    }
    r.train_loss = detail::parse_real(cells.back(), lineno);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json freeze_json(const PriorSchedule& p) { return {{"alpha", p.alpha}, {"v", p.v}}; }

inline void save_freeze(const std::string& path, const PriorSchedule& p) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << freeze_json(p).dump(1) << '\n';
}

inline FrozenSchedule load_freeze(const std::string& path, std::size_t M) {
  std::ifstream in(path);
  if (!in) throw ConfigError("freeze_file", "cannot read " + path);
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    FrozenSchedule f{j.at("alpha").get<std::vector<double>>(), j.at("v").get<std::vector<double>>()};
    if (f.alpha.size() != M || f.v.size() != M) {
      throw ConfigError("freeze_file", path + " holds " + std::to_string(f.alpha.size()) + " epochs, expected M = " +
                                           std::to_string(M));
    }
    if (!detail::finite_all(f.alpha) || !detail::finite_all(f.v)) {
      throw ConfigError("freeze_file", path + " holds non-finite values");
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("freeze_file", path + ": " + e.what());
  }
}

}  // namespace e3bm

#pragma once

// Per-episode inner loop: train M epoch-wise base-learners from the shared
// initializer, ask the hyperprior learners for each epoch's learning rate and
// ensemble weight, and accumulate the weighted test scores. The whole trace
// is one differentiable graph back to theta, both hyperprior learners and the
// prior schedule.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "e3bm/autodiff.hpp"
#include "e3bm/episode.hpp"
#include "e3bm/error.hpp"
#include "e3bm/nets.hpp"

namespace e3bm {

enum class Mode { Inductive, Transductive };
enum class HyperpriorKind { Fc, Lstm };
enum class VMode { E3bm, Learnable, Optimal, Equal, LastEpoch };
enum class AMode { E3bm, Learnable, Optimal, Fixed };
// What the ensemble sums: raw logits or softmax probabilities of each epoch.
enum class Combine { Logits, Probabilities };

struct AblationConfig {
  VMode v_mode = VMode::E3bm;
  AMode a_mode = AMode::E3bm;

  friend bool operator==(const AblationConfig&, const AblationConfig&) = default;
};

// Per-epoch values frozen from a "learnable" run, used by the "optimal" modes.
struct FrozenSchedule {
  std::vector<double> alpha;
  std::vector<double> v;

  friend bool operator==(const FrozenSchedule&, const FrozenSchedule&) = default;
};

struct InnerConfig {
  std::size_t epochs = 3;
  Mode mode = Mode::Inductive;
  double lambda1 = 1e-4;
  double lambda2 = 1e-4;
  double fixed_alpha = 1e-3;
  bool constrained = false;
  Combine combine = Combine::Logits;
  AblationConfig ablation;
  std::optional<FrozenSchedule> frozen;
  // Keep inner gradients differentiable (needed for meta-gradients).
  bool create_graph = true;
};

// Meta-learned quantities bound into one episode's graph.
struct MetaVars {
  Mlp<ad::Var> theta;
  Hyperprior<ad::Var> psi_a;
  Hyperprior<ad::Var> psi_v;
  std::vector<ad::Var> alpha_prior;  // scalars, one per epoch
  std::vector<ad::Var> v_prior;
};

// Tensor-valued meta parameters and their binding into an episode graph.
struct MetaParams {
  BaseParams theta;
  Hyperprior<Tensor> psi_a;
  Hyperprior<Tensor> psi_v;
  PriorSchedule priors;
};

inline MetaVars bind_meta(ad::Graph& g, const MetaParams& p, bool requires_grad) {
  MetaVars out{bind_params(g, p.theta, requires_grad), bind_params(g, p.psi_a, requires_grad),
               bind_params(g, p.psi_v, requires_grad), {}, {}};
  for (double a : p.priors.alpha) out.alpha_prior.push_back(g.leaf(Tensor::scalar(a), requires_grad));
  for (double v : p.priors.v) out.v_prior.push_back(g.leaf(Tensor::scalar(v), requires_grad));
  return out;
}

// Hyperprior input width: feature dim plus (mean, rms) per base tensor.
inline std::size_t summary_dim(std::size_t d, const BaseParams& theta) { return d + 2 * tensor_count(theta); }

struct TaskSummary {
  ad::Var feature_mean;  // [1 x d]
  ad::Var grad_summary;  // [1 x 2T]: per-tensor (mean, rms)
  ad::Var combined;      // [1 x (d + 2T)], the hyperprior input
  Mode mode = Mode::Inductive;
};

struct InnerTrace {
  std::vector<ad::Var> alphas;        // scalars
  std::vector<ad::Var> vs;            // scalars
  std::vector<ad::Var> train_losses;  // scalars
  ad::Var y_hat;                      // [N*Q x N] combined scores
  std::vector<ad::Var> epoch_scores;  // z_m, one per epoch
  std::vector<Mlp<ad::Var>> adapted;  // Theta_1 .. Theta_M
};

// Smoothing floor of the RMS entries: rms = sqrt(ms + eps) - sqrt(eps).
// Exactly zero for a zero gradient and differentiable everywhere.
inline constexpr double kRmsEps = 1e-12;
inline constexpr double kClampEps = 1e-6;

inline double smoothed_rms_offset() { return std::exp(0.5 * std::log(kRmsEps)); }

// Mean of the task inputs: train rows only (inductive) or train and test rows
// (transductive). Test labels are never read.
inline ad::Var feature_mean(ad::Graph& g, const Episode& ep, Mode mode) {
  const ad::Var train = g.constant(ep.train_x);
  if (mode == Mode::Inductive) return ad::mean_axis(train, 0);
  return ad::mean_axis(ad::concat({train, g.constant(ep.test_x)}, 0), 0);
}

inline ad::Var gradient_summary(ad::Graph& g, std::span<const ad::Var> grads) {
  std::vector<ad::Var> parts;
  parts.reserve(2 * grads.size());
  const ad::Var offset = g.scalar(smoothed_rms_offset());
  for (const ad::Var& t : grads) {
    const ad::Var mean = ad::mean_axis(ad::mean_axis(t, 0), 1);
    const ad::Var ms = ad::mean_axis(ad::mean_axis(t * t, 0), 1);
    const ad::Var rms = ad::exp(ad::scale(ad::log(ms + g.scalar(kRmsEps)), 0.5)) - offset;
    parts.push_back(mean);
    parts.push_back(rms);
  }
  return ad::concat(std::span<const ad::Var>(parts), 1);
}

inline TaskSummary summarize(ad::Graph& g, const Episode& ep, std::span<const ad::Var> grads, Mode mode) {
  const ad::Var fm = feature_mean(g, ep, mode);
  const ad::Var gs = gradient_summary(g, grads);
  return {fm, gs, ad::concat({fm, gs}, 1), mode};
}

inline double clamp_unit(double x) { return std::min(std::max(x, kClampEps), 1.0 - kClampEps); }

inline void check_lambda(double lambda, const char* field) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw ConfigError(field, "must lie strictly between 0 and 1, got " + std::to_string(lambda));
  }
}

// lambda * prior + (1 - lambda) * delta, optionally clamped to (eps, 1 - eps).
inline double blend(double prior, double delta, double lambda, bool constrained) {
  check_lambda(lambda, "lambda");
  const double v = lambda * prior + (1.0 - lambda) * delta;
  return constrained ? clamp_unit(v) : v;
}

// Graph version. Outside the clamp interval the result is a constant.
inline ad::Var constrain(ad::Graph& g, const ad::Var& x, bool constrained) {
  if (!constrained) return x;
  const double v = x.item();
  if (v < kClampEps || v > 1.0 - kClampEps) return g.scalar(clamp_unit(v));
  return x;
}

inline ad::Var blend(ad::Graph& g, const ad::Var& prior, const ad::Var& delta, double lambda, bool constrained) {
  check_lambda(lambda, "lambda");
  return constrain(g, ad::scale(prior, lambda) + ad::scale(delta, 1.0 - lambda), constrained);
}

// Steps a hyperprior learner through the epochs of one episode, threading the
// LSTM state. LSTM state starts from the learned (h0, c0) every episode.
class HyperpriorCursor {
 public:
  explicit HyperpriorCursor(const Hyperprior<ad::Var>& net) : net_(net) {
    if (const auto* lstm = std::get_if<LstmHyperprior<ad::Var>>(&net_)) {
      h_ = lstm->h0;
      c_ = lstm->c0;
    }
  }

  // (delta_alpha, delta_v) as a [1 x 2] row for 0-based `epoch`.
  ad::Var step(const ad::Var& summary, std::size_t epoch) {
    if (const auto* fc = std::get_if<FcHyperprior<ad::Var>>(&net_)) return fc_head(summary, *fc, epoch);
    const auto& lstm = std::get<LstmHyperprior<ad::Var>>(net_);
    LstmStep out = lstm_step(summary, h_, c_, lstm);
    h_ = out.h;
    c_ = out.c;
    return out.delta;
  }

 private:
  const Hyperprior<ad::Var>& net_;
  ad::Var h_, c_;
};

namespace detail {

// Component k of a [1 x 2] row as a scalar node.
inline ad::Var component(ad::Graph& g, const ad::Var& row, std::size_t k) {
  return ad::sum(row * g.constant(Tensor::row({k == 0 ? 1.0 : 0.0, k == 1 ? 1.0 : 0.0})));
}

inline const FrozenSchedule& frozen_or_throw(const InnerConfig& cfg) {
  if (!cfg.frozen) throw ConfigError("freeze_file", "\"optimal\" ablation modes need frozen per-epoch values");
  if (cfg.frozen->alpha.size() != cfg.epochs || cfg.frozen->v.size() != cfg.epochs) {
    throw ConfigError("freeze_file", "frozen schedule length does not match M = " + std::to_string(cfg.epochs));
  }
  return *cfg.frozen;
}

}  // namespace detail

inline ad::Var test_scores(const ad::Var& x_test, const Mlp<ad::Var>& params, Combine combine) {
  const ad::Var z = mlp_forward(x_test, params);
  return combine == Combine::Probabilities ? ad::softmax(z) : z;
}

inline InnerTrace inner_loop(ad::Graph& g, const Episode& ep, const MetaVars& meta, const InnerConfig& cfg) {
  const std::size_t M = cfg.epochs;
  if (M == 0) throw ConfigError("M", "must be at least 1");
  if (meta.alpha_prior.size() != M || meta.v_prior.size() != M) {
    throw ShapeError("inner_loop: prior schedule length does not match M = " + std::to_string(M));
  }
  const AblationConfig& ab = cfg.ablation;
  const bool need_summary = ab.a_mode == AMode::E3bm || ab.v_mode == VMode::E3bm;

  const ad::Var x_train = g.constant(ep.train_x);
  const ad::Var x_test = g.constant(ep.test_x);
  const std::optional<ad::Var> task_mean =
      need_summary ? std::optional<ad::Var>(feature_mean(g, ep, cfg.mode)) : std::nullopt;

  HyperpriorCursor cursor_a(meta.psi_a);
  HyperpriorCursor cursor_v(meta.psi_v);

  InnerTrace trace;
  // Inner steps differentiate w.r.t. Theta even when theta itself is frozen
  // (evaluation); such tensors start a fresh leaf.
  Mlp<ad::Var> theta = meta.theta;
  for_each_tensor(theta, [&](ad::Var& t) {
    if (!t.requires_grad()) t = g.leaf(t.value(), true);
  });
  for (std::size_t m = 0; m < M; ++m) {
    const ad::Var loss = ad::softmax_cross_entropy(mlp_forward(x_train, theta), ep.train_y);
    if (!std::isfinite(loss.item())) {
      const std::string prev = m == 0 ? std::string("n/a") : std::to_string(trace.alphas.back().item());
      throw NonFiniteError("inner loop: non-finite train loss at epoch " + std::to_string(m + 1) +
                           " (previous alpha = " + prev + ")");
    }
    const std::vector<ad::Var> params = flatten(theta);
    const std::vector<ad::Var> grads = ad::grad(loss, params, cfg.create_graph);

    std::optional<ad::Var> summary;
    if (need_summary) summary = ad::concat({*task_mean, gradient_summary(g, grads)}, 1);

    ad::Var alpha;
    switch (ab.a_mode) {
      case AMode::E3bm:
        alpha = blend(g, meta.alpha_prior[m], detail::component(g, cursor_a.step(*summary, m), 0), cfg.lambda1,
                      cfg.constrained);
        break;
      case AMode::Learnable:
        alpha = constrain(g, meta.alpha_prior[m], cfg.constrained);
        break;
      case AMode::Optimal:
        alpha = constrain(g, g.scalar(detail::frozen_or_throw(cfg).alpha[m]), cfg.constrained);
        break;
      case AMode::Fixed:
        alpha = constrain(g, g.scalar(cfg.fixed_alpha), cfg.constrained);
        break;
    }

    ad::Var v;
    switch (ab.v_mode) {
      case VMode::E3bm:
        v = blend(g, meta.v_prior[m], detail::component(g, cursor_v.step(*summary, m), 1), cfg.lambda2,
                  cfg.constrained);
        break;
      case VMode::Learnable:
        v = constrain(g, meta.v_prior[m], cfg.constrained);
        break;
      case VMode::Optimal:
        v = constrain(g, g.scalar(detail::frozen_or_throw(cfg).v[m]), cfg.constrained);
        break;
      case VMode::Equal:
        v = constrain(g, g.scalar(1.0 / static_cast<double>(M)), cfg.constrained);
        break;
      case VMode::LastEpoch:
        v = constrain(g, g.scalar(m + 1 == M ? 1.0 : 0.0), cfg.constrained);
        break;
    }

    // Theta_m = Theta_{m-1} - alpha_m * grad
    Mlp<ad::Var> next = theta;
    std::size_t k = 0;
    for_each_tensor(next, [&](ad::Var& t) {
      t = t - grads[k] * alpha;
      ++k;
    });
    theta = std::move(next);

    const ad::Var z = test_scores(x_test, theta, cfg.combine);
    trace.y_hat = m == 0 ? v * z : v * z + trace.y_hat;
    trace.alphas.push_back(alpha);
    trace.vs.push_back(v);
    trace.train_losses.push_back(loss);
    trace.epoch_scores.push_back(z);
    trace.adapted.push_back(theta);
  }
  return trace;
}

// Plain M-step MAML adaptation with a fixed learning rate; the prediction is
// the last base-learner's scores.
inline ad::Var maml_scores(ad::Graph& g, const Episode& ep, const Mlp<ad::Var>& theta0, std::size_t steps,
                           double alpha, bool create_graph) {
  const ad::Var x_train = g.constant(ep.train_x);
  const ad::Var lr = g.scalar(alpha);
  Mlp<ad::Var> theta = theta0;
  for (std::size_t m = 0; m < steps; ++m) {
    const ad::Var loss = ad::softmax_cross_entropy(mlp_forward(x_train, theta), ep.train_y);
    const auto grads = ad::grad(loss, flatten(theta), create_graph);
    std::size_t k = 0;
    for_each_tensor(theta, [&](ad::Var& t) {
      t = t - grads[k] * lr;
      ++k;
    });
  }
  return mlp_forward(g.constant(ep.test_x), theta);
}

struct Prediction {
  std::vector<std::size_t> labels;
  double accuracy = 0.0;
};

// Row-wise argmax of the combined scores (ties to the lowest class index) and
// accuracy against the episode's test labels. Not differentiable.
inline Prediction predict(const InnerTrace& trace, std::span<const std::size_t> test_y) {
  const ad::Var idx = ad::argmax(trace.y_hat);
  Prediction p;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < idx.value().size(); ++r) {
    const auto label = static_cast<std::size_t>(idx.value().data[r]);
    p.labels.push_back(label);
    if (r < test_y.size() && label == test_y[r]) ++correct;
  }
  p.accuracy = test_y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_y.size());
  return p;
}

}  // namespace e3bm

#pragma once

// Differentiable models: the MLP base-learner, the epoch-wise FC hyperprior
// heads and the LSTM hyperprior learner.
//
// Parameter structs are templated on their element type: `Tensor` for stored
// values, `ad::Var` for values bound into a Graph for one episode.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "e3bm/autodiff.hpp"
#include "e3bm/error.hpp"
#include "e3bm/tensor.hpp"

namespace e3bm {

template <class T>
struct Dense {
  T weight;  // [d_in x d_out]
  T bias;    // [1 x d_out]
};

template <class T>
struct Mlp {
  std::vector<Dense<T>> layers;
};

// Gate order: input, forget, candidate, output.
template <class T>
struct LstmCell {
  T w_i, w_f, w_g, w_o;  // [d_sum x H]
  T u_i, u_f, u_g, u_o;  // [H x H]
  T b_i, b_f, b_g, b_o;  // [1 x H]
};

template <class T>
struct LstmHyperprior {
  LstmCell<T> cell;
  Dense<T> readout;  // [H x 2]
  T h0;              // [1 x H]
  T c0;              // [1 x H]
};

// One independent head per inner epoch.
template <class T>
struct FcHyperprior {
  std::vector<Dense<T>> heads;  // each [d_sum x 2]
};

template <class T>
using Hyperprior = std::variant<FcHyperprior<T>, LstmHyperprior<T>>;

using BaseParams = Mlp<Tensor>;

// Cross-episode prior values alpha'_m and v'_m, one per inner epoch.
struct PriorSchedule {
  std::vector<double> alpha;
  std::vector<double> v;

  std::size_t epochs() const noexcept { return alpha.size(); }
  friend bool operator==(const PriorSchedule&, const PriorSchedule&) = default;
};

// ---------------------------------------------------------------------------
// Traversal. Every parameter struct visits its tensors in a fixed order with
// a stable dotted name; serialization and optimizer updates rely on it.
// ---------------------------------------------------------------------------

template <class T, class F>
void for_each_named(Dense<T>& p, const std::string& prefix, F&& f) {
  f(prefix + "weight", p.weight);
  f(prefix + "bias", p.bias);
}

template <class T, class F>
void for_each_named(Mlp<T>& p, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    for_each_named(p.layers[i], prefix + "layers." + std::to_string(i) + ".", f);
  }
}

template <class T, class F>
void for_each_named(LstmCell<T>& p, const std::string& prefix, F&& f) {
  f(prefix + "w_i", p.w_i);
  f(prefix + "w_f", p.w_f);
  f(prefix + "w_g", p.w_g);
  f(prefix + "w_o", p.w_o);
  f(prefix + "u_i", p.u_i);
  f(prefix + "u_f", p.u_f);
  f(prefix + "u_g", p.u_g);
  f(prefix + "u_o", p.u_o);
  f(prefix + "b_i", p.b_i);
  f(prefix + "b_f", p.b_f);
  f(prefix + "b_g", p.b_g);
  f(prefix + "b_o", p.b_o);
}

template <class T, class F>
void for_each_named(LstmHyperprior<T>& p, const std::string& prefix, F&& f) {
  for_each_named(p.cell, prefix + "cell.", f);
  for_each_named(p.readout, prefix + "readout.", f);
  f(prefix + "h0", p.h0);
  f(prefix + "c0", p.c0);
}

template <class T, class F>
void for_each_named(FcHyperprior<T>& p, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    for_each_named(p.heads[i], prefix + "heads." + std::to_string(i) + ".", f);
  }
}

template <class T, class F>
void for_each_named(Hyperprior<T>& p, const std::string& prefix, F&& f) {
  std::visit([&](auto& net) { for_each_named(net, prefix, f); }, p);
}

template <class P, class F>
void for_each_tensor(P& p, F&& f) {
  for_each_named(p, "", [&](const std::string&, auto& t) { f(t); });
}

template <class P, class F>
void for_each_tensor(const P& p, F&& f) {
  for_each_tensor(const_cast<P&>(p), [&](const auto& t) { f(t); });
}

template <class P>
std::size_t tensor_count(const P& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const auto&) { ++n; });
  return n;
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const Tensor& t) { n += t.size(); });
  return n;
}

namespace detail {

template <class Out, class In, class F>
Dense<Out> map_dense(const Dense<In>& d, F&& f) {
  return {f(d.weight), f(d.bias)};
}

template <class Out, class In, class F>
Mlp<Out> map_params(const Mlp<In>& p, F&& f) {
  Mlp<Out> out;
  for (const auto& l : p.layers) out.layers.push_back(map_dense<Out>(l, f));
  return out;
}

template <class Out, class In, class F>
FcHyperprior<Out> map_params(const FcHyperprior<In>& p, F&& f) {
  FcHyperprior<Out> out;
  for (const auto& h : p.heads) out.heads.push_back(map_dense<Out>(h, f));
  return out;
}

template <class Out, class In, class F>
LstmHyperprior<Out> map_params(const LstmHyperprior<In>& p, F&& f) {
  const auto& c = p.cell;
  LstmCell<Out> cell{f(c.w_i), f(c.w_f), f(c.w_g), f(c.w_o), f(c.u_i), f(c.u_f),
                     f(c.u_g), f(c.u_o), f(c.b_i), f(c.b_f), f(c.b_g), f(c.b_o)};
  return {cell, map_dense<Out>(p.readout, f), f(p.h0), f(p.c0)};
}

template <class Out, class In, class F>
Hyperprior<Out> map_params(const Hyperprior<In>& p, F&& f) {
  return std::visit([&](const auto& net) -> Hyperprior<Out> { return map_params<Out>(net, f); }, p);
}

}  // namespace detail

// Bind stored parameters into `g` as leaves.
template <class P>
auto bind_params(ad::Graph& g, const P& values, bool requires_grad) {
  return detail::map_params<ad::Var>(values, [&](const Tensor& t) { return g.leaf(t, requires_grad); });
}

template <class P>
std::vector<ad::Var> flatten(const P& vars) {
  std::vector<ad::Var> out;
  for_each_tensor(vars, [&](const ad::Var& v) { out.push_back(v); });
  return out;
}

template <class P>
std::vector<Tensor> flatten_values(const P& values) {
  std::vector<Tensor> out;
  for_each_tensor(values, [&](const Tensor& t) { out.push_back(t); });
  return out;
}

// Overwrite every tensor of `p` from `values`, in traversal order.
template <class P>
void assign_flat(P& p, std::span<const Tensor> values) {
  std::size_t i = 0;
  for_each_tensor(p, [&](Tensor& t) {
    if (i >= values.size() || !(values[i].shape == t.shape)) {
      throw ShapeError("assign_flat: value " + std::to_string(i) + " does not match parameter shape");
    }
    t = values[i++];
  });
  if (i != values.size()) throw ShapeError("assign_flat: too many values");
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline Tensor glorot_uniform(std::size_t d_in, std::size_t d_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t = Tensor::zeros(Shape::matrix(d_in, d_out));
  for (double& v : t.data) v = u(rng);
  return t;
}

// Layer widths dims[0] -> dims[1] -> ... -> dims.back(); biases start at zero.
inline BaseParams init_mlp(std::span<const std::size_t> dims, std::mt19937_64& rng) {
  if (dims.size() < 2) throw ShapeError("init_mlp: need at least input and output widths");
  BaseParams p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    p.layers.push_back({glorot_uniform(dims[i], dims[i + 1], rng), Tensor::zeros(Shape::row(dims[i + 1]))});
  }
  return p;
}

// Heads start with zero weights and bias (alpha'_m, v'_m), so an untrained
// hyperprior reproduces the prior schedule.
inline FcHyperprior<Tensor> init_fc_hyperprior(std::size_t d_sum, const PriorSchedule& priors) {
  FcHyperprior<Tensor> net;
  for (std::size_t m = 0; m < priors.epochs(); ++m) {
    net.heads.push_back({Tensor::zeros(Shape::matrix(d_sum, 2)), Tensor::row({priors.alpha[m], priors.v[m]})});
  }
  return net;
}

// Cell weights are Glorot-uniform, biases and initial states zero. The readout
// starts at zero weight with bias equal to the mean prior.
inline LstmHyperprior<Tensor> init_lstm_hyperprior(std::size_t d_sum, std::size_t hidden,
                                                   const PriorSchedule& priors, std::mt19937_64& rng) {
  auto in = [&] { return glorot_uniform(d_sum, hidden, rng); };
  auto rec = [&] { return glorot_uniform(hidden, hidden, rng); };
  auto zero_row = [&] { return Tensor::zeros(Shape::row(hidden)); };
  LstmCell<Tensor> cell{in(), in(), in(), in(), rec(), rec(), rec(), rec(),
                        zero_row(), zero_row(), zero_row(), zero_row()};
  double a = 0.0, v = 0.0;
  for (std::size_t m = 0; m < priors.epochs(); ++m) {
    a += priors.alpha[m];
    v += priors.v[m];
  }
  const double n = static_cast<double>(std::max<std::size_t>(priors.epochs(), 1));
  Dense<Tensor> readout{Tensor::zeros(Shape::matrix(hidden, 2)), Tensor::row({a / n, v / n})};
  return {cell, readout, zero_row(), zero_row()};
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// tanh between layers, identity at the output.
inline ad::Var mlp_forward(const ad::Var& x, const Mlp<ad::Var>& params) {
  if (params.layers.empty()) throw ShapeError("mlp_forward: no layers");
  if (x.shape().rank() != 2 || x.shape().cols() != params.layers.front().weight.shape().rows()) {
    throw ShapeError("mlp_forward: input " + x.shape().to_string() + " does not match first layer " +
                     params.layers.front().weight.shape().to_string());
  }
  ad::Var h = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    h = ad::matmul(h, layer.weight) + layer.bias;
    if (i + 1 < params.layers.size()) h = ad::tanh(h);
  }
  return h;
}

struct LstmStep {
  ad::Var delta;  // [1 x 2]: (delta_alpha, delta_v)
  ad::Var h;
  ad::Var c;
};

inline LstmStep lstm_step(const ad::Var& summary, const ad::Var& h_prev, const ad::Var& c_prev,
                          const LstmHyperprior<ad::Var>& net) {
  const auto& k = net.cell;
  const std::size_t d_sum = k.w_i.shape().rows();
  const std::size_t hidden = k.u_i.shape().rows();
  if (summary.shape() != Shape::row(d_sum) || h_prev.shape() != Shape::row(hidden) ||
      c_prev.shape() != Shape::row(hidden)) {
    throw ShapeError("lstm_step: summary " + summary.shape().to_string() + ", h " + h_prev.shape().to_string() +
                     ", c " + c_prev.shape().to_string() + " do not match cell (d_sum " +
                     std::to_string(d_sum) + ", H " + std::to_string(hidden) + ")");
  }
  auto gate = [&](const ad::Var& w, const ad::Var& u, const ad::Var& b) {
    return ad::matmul(summary, w) + ad::matmul(h_prev, u) + b;
  };
  const ad::Var i = ad::sigmoid(gate(k.w_i, k.u_i, k.b_i));
  const ad::Var f = ad::sigmoid(gate(k.w_f, k.u_f, k.b_f));
  const ad::Var g = ad::tanh(gate(k.w_g, k.u_g, k.b_g));
  const ad::Var o = ad::sigmoid(gate(k.w_o, k.u_o, k.b_o));
  const ad::Var c = f * c_prev + i * g;
  const ad::Var h = o * ad::tanh(c);
  const ad::Var delta = ad::matmul(h, net.readout.weight) + net.readout.bias;
  return {delta, h, c};
}

// Head `epoch` (0-based) applied to the summary row.
inline ad::Var fc_head(const ad::Var& summary, const FcHyperprior<ad::Var>& net, std::size_t epoch) {
  if (epoch >= net.heads.size()) {
    throw Error("fc_head: epoch " + std::to_string(epoch) + " out of range for " +
                std::to_string(net.heads.size()) + " heads");
  }
  const auto& head = net.heads[epoch];
  if (summary.shape() != Shape::row(head.weight.shape().rows())) {
    throw ShapeError("fc_head: summary " + summary.shape().to_string() + " does not match head " +
                     head.weight.shape().to_string());
  }
  return ad::matmul(summary, head.weight) + head.bias;
}

}  // namespace e3bm

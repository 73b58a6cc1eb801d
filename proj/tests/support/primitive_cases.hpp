#pragma once

// Randomized cases for every differentiable primitive, each checked against
// central differences to first and second order.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "e3bm/autodiff.hpp"
#include "support/finite_diff.hpp"

namespace e3bm::testing {

using ad::Graph;
using ad::Var;

inline Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(s);
  for (double& v : t.data) v = u(rng);
  return t;
}

struct PrimitiveCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Var(Graph&, const std::vector<Var>&)> build;
};

inline PrimitiveCase make_case(int which, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 4);
  std::bernoulli_distribution coin(0.5);
  const std::size_t R = dim(rng), C = dim(rng), K = dim(rng);
  auto rnd = [&](Shape s) { return random_tensor(rng, s); };

  switch (which) {
    case 0: {
      const bool ta = coin(rng), tb = coin(rng);
      Tensor a = rnd(ta ? Shape::matrix(K, R) : Shape::matrix(R, K));
      Tensor b = rnd(tb ? Shape::matrix(C, K) : Shape::matrix(K, C));
      return {"matmul", {a, b}, [ta, tb](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1], ta, tb); }};
    }
    case 1:
    case 2:
    case 3: {
      // same shape, row broadcast, or scalar broadcast; either operand order
      const int form = std::uniform_int_distribution<int>(0, 2)(rng);
      Shape other = form == 0 ? Shape::matrix(R, C) : form == 1 ? Shape::row(C) : Shape::scalar();
      Tensor a = rnd(Shape::matrix(R, C));
      Tensor b = rnd(other);
      if (coin(rng)) std::swap(a, b);
      static const char* names[] = {"add", "subtract", "multiply"};
      return {names[which - 1], {a, b}, [which](Graph&, const std::vector<Var>& v) {
                return which == 1 ? add(v[0], v[1]) : which == 2 ? sub(v[0], v[1]) : mul(v[0], v[1]);
              }};
    }
    case 4: {
      const double k = std::uniform_real_distribution<double>(-2, 2)(rng);
      return {"scale", {rnd(Shape::matrix(R, C))}, [k](Graph&, const std::vector<Var>& v) { return scale(v[0], k); }};
    }
    case 5:
      return {"tanh", {rnd(Shape::matrix(R, C))}, [](Graph&, const std::vector<Var>& v) { return ad::tanh(v[0]); }};
    case 6:
      return {"sigmoid", {rnd(Shape::matrix(R, C))}, [](Graph&, const std::vector<Var>& v) { return sigmoid(v[0]); }};
    case 7: {
      Tensor a = rnd(Shape::matrix(R, C));
      for (double& x : a.data) x += x >= 0 ? 0.05 : -0.05;  // stay off the kink
      return {"relu", {a}, [](Graph&, const std::vector<Var>& v) { return relu(v[0]); }};
    }
    case 8:
      return {"exp", {rnd(Shape::matrix(R, C))}, [](Graph&, const std::vector<Var>& v) { return ad::exp(v[0]); }};
    case 9:
      return {"log", {random_tensor(rng, Shape::matrix(R, C), 0.5, 2.0)},
              [](Graph&, const std::vector<Var>& v) { return ad::log(v[0]); }};
    case 10: {
      const int axis = coin(rng) ? 1 : 0;
      return {"mean_axis", {rnd(Shape::matrix(R, C))}, [axis](Graph&, const std::vector<Var>& v) { return mean_axis(v[0], axis); }};
    }
    case 11:
      return {"sum", {rnd(Shape::matrix(R, C))}, [](Graph&, const std::vector<Var>& v) { return sum(v[0]); }};
    case 12: {
      const int axis = coin(rng) ? 1 : 0;
      Tensor a = rnd(Shape::matrix(R, C));
      Tensor b = rnd(axis == 1 ? Shape::matrix(R, K) : Shape::matrix(K, C));
      Tensor c = rnd(axis == 1 ? Shape::matrix(R, 1) : Shape::matrix(1, C));
      return {"concat", {a, b, c}, [axis](Graph&, const std::vector<Var>& v) { return ad::concat({v[0], v[1], v[2]}, axis); }};
    }
    case 13:
      return {"softmax", {rnd(Shape::matrix(R, C + 1))}, [](Graph&, const std::vector<Var>& v) { return softmax(v[0]); }};
    default: {
      std::vector<std::size_t> labels(R);
      for (auto& l : labels) l = std::uniform_int_distribution<std::size_t>(0, C)(rng);
      return {"softmax_cross_entropy", {rnd(Shape::matrix(R, C + 1))},
              [labels](Graph&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); }};
    }
  }
}

inline constexpr int kPrimitiveCount = 15;

// sum(weights * op(inputs)) with fixed random weights, so the loss is scalar.
inline double weighted_output(const PrimitiveCase& pc, const Tensor& weights, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return sum(pc.build(g, vars) * g.constant(weights)).item();
}


struct PrimitiveCheck {
  std::string name;
  double error = 0.0;
};

// Relative error of the analytic gradient of sum(w * op(x)).
inline PrimitiveCheck first_order_error(int op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const PrimitiveCase pc = make_case(op, rng);
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : pc.inputs) vars.push_back(g.leaf(t, true));
  const Var out = pc.build(g, vars);
  const Tensor weights = random_tensor(rng, out.shape());
  const auto analytic = ad::grad(ad::sum(out * g.constant(weights)), vars);
  const auto numeric = central_difference(
      [&](const std::vector<Tensor>& in) { return weighted_output(pc, weights, in); }, pc.inputs, 1e-5);
  std::vector<Tensor> a;
  for (const auto& v : analytic) a.push_back(v.value());
  return {pc.name, max_relative_error(a, numeric)};
}

// Same for the gradient of the directional derivative
// sum_i <u_i, d/dx_i sum(w * op(x))>, i.e. a Hessian-vector product.
inline PrimitiveCheck second_order_error(int op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const PrimitiveCase pc = make_case(op, rng);
  Tensor weights;
  std::vector<Tensor> directions;
  auto functional = [&](Graph& g, const std::vector<Var>& vars) {
    const Var out = pc.build(g, vars);
    const auto first = ad::grad(ad::sum(out * g.constant(weights)), vars, true);
    Var acc = g.scalar(0.0);
    for (std::size_t i = 0; i < first.size(); ++i) acc = acc + ad::sum(first[i] * g.constant(directions[i]));
    return acc;
  };
  {
    Graph probe;
    std::vector<Var> vars;
    for (const auto& t : pc.inputs) vars.push_back(probe.constant(t));
    weights = random_tensor(rng, pc.build(probe, vars).shape());
    for (const auto& t : pc.inputs) directions.push_back(random_tensor(rng, t.shape));
  }
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : pc.inputs) vars.push_back(g.leaf(t, true));
  const auto analytic = ad::grad(functional(g, vars), vars);
  const auto numeric = central_difference(
      [&](const std::vector<Tensor>& in) {
        Graph gg;
        std::vector<Var> vv;
        for (const auto& t : in) vv.push_back(gg.leaf(t, true));
        return functional(gg, vv).item();
      },
      pc.inputs, 1e-5);
  std::vector<Tensor> a;
  for (const auto& v : analytic) a.push_back(v.value());
  return {pc.name, max_relative_error(a, numeric, 1e-6)};
}

}  // namespace e3bm::testing

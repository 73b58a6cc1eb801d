#include <gtest/gtest.h>

#include <cstring>
#include <functional>
#include <random>
#include <string>

#include "e3bm/autodiff.hpp"
#include "support/finite_diff.hpp"
#include "support/primitive_cases.hpp"

namespace {

using e3bm::Shape;
using e3bm::Tensor;
using namespace e3bm::ad;
using e3bm::testing::central_difference;
using e3bm::testing::max_relative_error;
using e3bm::testing::first_order_error;
using e3bm::testing::kPrimitiveCount;
using e3bm::testing::random_tensor;
using e3bm::testing::second_order_error;

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

TEST(Primitives, MatmulByHand) {
  Graph g;
  const Var a = g.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  const Var b = g.constant(Tensor::from_rows({{1}, {1}}));
  const Var c = matmul(a, b);
  EXPECT_EQ(c.shape(), Shape::matrix(2, 1));
  EXPECT_DOUBLE_EQ(c.value()(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(c.value()(1, 0), 7.0);
}

TEST(Primitives, MatmulTransposeFlags) {
  Graph g;
  const Var a = g.constant(Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}));
  const Var at = matmul(a, a, true, false);  // [3x3]
  EXPECT_EQ(at.shape(), Shape::matrix(3, 3));
  EXPECT_DOUBLE_EQ(at.value()(0, 0), 17.0);
  EXPECT_DOUBLE_EQ(at.value()(2, 1), 3 * 2 + 6 * 5);
  const Var aat = matmul(a, a, false, true);  // [2x2]
  EXPECT_DOUBLE_EQ(aat.value()(0, 1), 4 + 10 + 18);
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Graph g;
  const Var s = softmax(g.constant(Tensor::zeros(Shape::row(5))));
  for (double v : s.value().data) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Primitives, IdentityCases) {
  Graph g;
  const Var z = g.constant(Tensor::zeros(Shape::row(1)));
  EXPECT_EQ(e3bm::ad::tanh(z).item(), 0.0);
  EXPECT_EQ(sigmoid(z).item(), 0.5);
  EXPECT_EQ(e3bm::ad::exp(z).item(), 1.0);
}

TEST(Primitives, SoftmaxCrossEntropyUniformIsLogN) {
  Graph g;
  const std::vector<std::size_t> labels{0, 3, 4};
  const Var loss = softmax_cross_entropy(g.constant(Tensor::zeros(Shape::matrix(3, 5))), labels);
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-15);
}

TEST(Primitives, ArgmaxTiesGoToLowestIndex) {
  Graph g;
  const Var a = argmax(g.constant(Tensor::from_rows({{1, 3, 3}, {0, 0, 0}, {-1, -2, 5}})));
  EXPECT_EQ(a.value().data, (std::vector<double>{1, 0, 2}));
  EXPECT_FALSE(a.requires_grad());
}

TEST(Primitives, ShapeMismatchNamesOpAndShapes) {
  Graph g;
  const Var a = g.constant(Tensor::zeros(Shape::matrix(2, 3)));
  const Var b = g.constant(Tensor::zeros(Shape::matrix(2, 2)));
  try {
    matmul(a, a);
    FAIL() << "expected ShapeError";
  } catch (const e3bm::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const e3bm::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
  // column vectors do not broadcast
  EXPECT_THROW(add(a, g.constant(Tensor::zeros(Shape::matrix(2, 1)))), e3bm::ShapeError);
}

TEST(Primitives, DomainViolationsThrow) {
  Graph g;
  EXPECT_THROW(e3bm::ad::log(g.constant(Tensor::row({1.0, 0.0}))), e3bm::DomainError);
  EXPECT_THROW(e3bm::ad::log(g.constant(Tensor::row({-2.0}))), e3bm::DomainError);
  EXPECT_THROW(e3bm::ad::exp(g.constant(Tensor::row({800.0}))), e3bm::DomainError);
  EXPECT_THROW(e3bm::ad::log(g.constant(Tensor::row({std::nan("")}))), e3bm::DomainError);
}

TEST(Grad, SquareSum) {
  Graph g;
  const Var x = g.leaf(Tensor::row({3.0}), true);
  const auto gx = grad(sum(x * x), {x});
  EXPECT_DOUBLE_EQ(gx[0].value().data[0], 6.0);
}

TEST(Grad, ConstantLossGivesZeros) {
  Graph g;
  const Var x = g.leaf(Tensor::row({1.0, 2.0, 3.0}), true);
  const Var c = g.scalar(5.0);
  const auto gx = grad(c, {x});
  EXPECT_EQ(gx[0].shape(), x.shape());
  for (double v : gx[0].value().data) EXPECT_EQ(v, 0.0);
}

TEST(Grad, RejectsNonScalarLossAndDetachedWrt) {
  Graph g;
  const Var x = g.leaf(Tensor::row({1.0, 2.0}), true);
  const Var k = g.constant(Tensor::row({1.0, 2.0}));
  EXPECT_THROW(grad(x * x, {x}), e3bm::ShapeError);
  EXPECT_THROW(grad(sum(x * k), {k}), e3bm::Error);
}

TEST(Grad, CreateGraphControlsDetachment) {
  Graph g;
  const Var x = g.leaf(Tensor::row({2.0}), true);
  const Var y = sum(x * x * x);
  EXPECT_TRUE(grad(y, {x}, true)[0].requires_grad());
  const Var detached = grad(y, {x}, false)[0];
  EXPECT_FALSE(detached.requires_grad());
  EXPECT_EQ(detached.node().op, Op::Leaf);
}

TEST(Grad, StopGradientBlocksFlow) {
  Graph g;
  const Var x = g.leaf(Tensor::row({0.3, -0.7}), true);
  const Var y = sum(stop_gradient(x) * x);  // d/dx = stop(x), not 2x
  const auto gx = grad(y, {x});
  EXPECT_DOUBLE_EQ(gx[0].value().data[0], 0.3);
  const auto gz = grad(sum(stop_gradient(x * x)), {x});
  for (double v : gz[0].value().data) EXPECT_EQ(v, 0.0);
}

TEST(Grad, TwoLayerMlpCrossEntropyMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::vector<Tensor> init{random_tensor(rng, Shape::matrix(6, 4)),
                                 random_tensor(rng, Shape::matrix(4, 5)),
                                 random_tensor(rng, Shape::row(5)),
                                 random_tensor(rng, Shape::matrix(5, 3)),
                                 random_tensor(rng, Shape::row(3))};
  const std::vector<std::size_t> labels{0, 2, 1, 1, 0, 2};
  auto build = [&](Graph& g, const std::vector<Tensor>& p, bool rg) {
    std::vector<Var> vars;
    for (const auto& t : p) vars.push_back(g.leaf(t, rg));
    const Var x = g.constant(p[0]);
    const Var h = e3bm::ad::tanh(matmul(x, vars[1]) + vars[2]);
    const Var logits = matmul(h, vars[3]) + vars[4];
    return std::pair{softmax_cross_entropy(logits, labels), vars};
  };
  auto f = [&](const std::vector<Tensor>& p) {
    Graph g;
    return build(g, p, false).first.item();
  };
  Graph g;
  auto [loss, vars] = build(g, init, true);
  const std::vector<Var> wrt(vars.begin() + 1, vars.end());
  const auto analytic = grad(loss, wrt);
  const auto numeric = central_difference(f, init, 1e-5);
  std::vector<Tensor> a, n;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    a.push_back(analytic[i].value());
    n.push_back(numeric[i + 1]);
  }
  EXPECT_LT(max_relative_error(a, n), 1e-6);
}

TEST(SecondOrder, CubeSecondDerivative) {
  Graph g;
  const Var x = g.leaf(Tensor::row({2.0}), true);
  const Var f = sum(x * x * x);
  const std::vector<Var> xs{x};
  const auto h = second_order_grad(f, xs, xs, [](std::span<const Var> gs) { return sum(gs[0]); });
  EXPECT_NEAR(h[0].item(), 12.0, 1e-12);

  // finite differences of the first derivative agree
  auto first = [](double v) {
    Graph gg;
    const Var xv = gg.leaf(Tensor::row({v}), true);
    return grad(sum(xv * xv * xv), {xv})[0].item();
  };
  EXPECT_NEAR((first(2.0 + 1e-5) - first(2.0 - 1e-5)) / 2e-5, 12.0, 1e-6);
}

TEST(SecondOrder, MixedPartialOfBilinearForm) {
  Graph g;
  const Var x = g.leaf(Tensor::row({0.7}), true);
  const Var y = g.leaf(Tensor::row({-1.3}), true);
  const Var f = sum(x * y);
  const std::vector<Var> inner{x}, outer{y};
  const auto h = second_order_grad(f, inner, outer, [](std::span<const Var> gs) { return sum(gs[0]); });
  EXPECT_DOUBLE_EQ(h[0].item(), 1.0);
}

TEST(SecondOrder, OneStepMamlOnLinearModelMatchesClosedForm) {
  const double w0 = 0.4, alpha = 0.05;
  const double xtr = 1.7, ytr = 0.9, xte = -0.6, yte = 1.2;

  Graph g;
  const Var w = g.leaf(Tensor::row({w0}), true);
  const Var rtr = w * g.scalar(xtr) - g.scalar(ytr);
  const Var ltr = scale(sum(rtr * rtr), 0.5);
  const Var gw = grad(ltr, {w}, true)[0];
  const Var adapted = w - gw * g.scalar(alpha);
  const Var rte = adapted * g.scalar(xte) - g.scalar(yte);
  const Var lte = scale(sum(rte * rte), 0.5);
  const double meta = grad(lte, {w})[0].item();

  // hand expansion: (1 - alpha * d2Ltr/dw2) * dLte/dw'
  const double w1 = w0 - alpha * (w0 * xtr - ytr) * xtr;
  const double expected = (1.0 - alpha * xtr * xtr) * (w1 * xte - yte) * xte;
  EXPECT_NEAR(meta, expected, 1e-8);
}

TEST(Determinism, IdenticalSequencesAreBitwiseEqual) {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Graph g(seed);
    const Var a = g.leaf(random_tensor(rng, Shape::matrix(4, 3)), true);
    const Var b = g.leaf(random_tensor(rng, Shape::matrix(3, 5)), true);
    const Var y = softmax(e3bm::ad::tanh(matmul(a, b)));
    const Var loss = sum(y * y);
    auto gs = grad(loss, {a, b}, true);
    const Var second = grad(sum(gs[0] * gs[0]), {b})[0];
    return std::vector<Tensor>{y.value(), gs[0].value(), gs[1].value(), second.value()};
  };
  const auto r1 = run(42), r2 = run(42);
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_TRUE(bitwise_equal(r1[i], r2[i]));
}

// ---------------------------------------------------------------------------
// Property: every differentiable primitive agrees with central differences,
// and so does its second derivative (closure under differentiation).
// ---------------------------------------------------------------------------

TEST(PrimitiveProperty, GradientsMatchFiniteDifferences) {
  for (int op = 0; op < kPrimitiveCount; ++op) {
    for (int seed = 0; seed < 100; ++seed) {
      const auto r = first_order_error(op, 1000 * op + seed);
      ASSERT_LT(r.error, 1e-6) << r.name << " seed " << seed;
    }
  }
}

TEST(PrimitiveProperty, SecondDerivativesMatchFiniteDifferences) {
  for (int op = 0; op < kPrimitiveCount; ++op) {
    for (int seed = 0; seed < 20; ++seed) {
      const auto r = second_order_error(op, 7000 * op + seed);
      ASSERT_LT(r.error, 1e-6) << r.name << " seed " << seed;
    }
  }
}

}  // namespace

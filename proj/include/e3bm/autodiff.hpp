#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is written with the same primitives it differentiates,
// so a gradient returned with create_graph=true is an ordinary graph node and
// can be differentiated again (Hessian-vector products through unrolled
// gradient steps).
//
// Broadcasting is limited to two cases for add/sub/mul:
//   (matrix [R x C], row [1 x C]) and (tensor, scalar), in either operand order.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "e3bm/error.hpp"
#include "e3bm/tensor.hpp"

namespace e3bm::ad {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Sigmoid,
  Relu,
  Exp,
  Log,
  MeanAxis,
  Sum,
  Concat,
  Softmax,
  SoftmaxXent,
  Argmax,
  StopGradient,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Mul: return "multiply";
    case Op::Scale: return "scale";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::MeanAxis: return "mean_axis";
    case Op::Sum: return "sum";
    case Op::Concat: return "concat";
    case Op::Softmax: return "softmax";
    case Op::SoftmaxXent: return "softmax_cross_entropy";
    case Op::Argmax: return "argmax";
    case Op::StopGradient: return "stop_gradient";
  }
  return "?";
}

struct Node {
  NodeId id = 0;
  Tensor value;
  Op op = Op::Leaf;
  std::vector<NodeId> parents;
  bool requires_grad = false;

  // Op attributes.
  double factor = 0.0;               // Scale
  int axis = 0;                      // MeanAxis, Concat
  bool trans_a = false;              // MatMul
  bool trans_b = false;              // MatMul
  std::vector<std::size_t> labels;   // SoftmaxXent

  const Shape& shape() const noexcept { return value.shape; }
};

class Graph;

// Lightweight handle to a node. Valid while its Graph is alive.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Node& node() const;
  const Tensor& value() const { return node().value; }
  const Shape& shape() const { return node().value.shape; }
  bool requires_grad() const { return node().requires_grad; }
  double item() const { return value().item(); }
};

// Append-only node arena. Single-threaded; one Graph per episode.
class Graph {
 public:
  explicit Graph(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t rng_seed() const noexcept { return rng_seed_; }

  // While disabled, new op nodes never require grad.
  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

  Var push(Node n) {
    n.id = static_cast<NodeId>(nodes_.size());
    if (n.op != Op::Leaf) {
      bool any = false;
      for (NodeId p : n.parents) any = any || nodes_[p].requires_grad;
      n.requires_grad = grad_enabled_ && any && n.op != Op::Argmax && n.op != Op::StopGradient;
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.back().id};
  }

 private:
  std::vector<Node> nodes_;
  std::uint64_t rng_seed_;
  bool grad_enabled_ = true;
};

inline const Node& Var::node() const { return graph->node(id); }

class GradModeGuard {
 public:
  GradModeGuard(Graph& g, bool enabled) : graph_(g), previous_(g.grad_enabled()) {
    g.set_grad_enabled(enabled);
  }
  ~GradModeGuard() { graph_.set_grad_enabled(previous_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  Graph& graph_;
  bool previous_;
};

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw Error(std::string(op) + ": operands belong to different graphs");
  }
  return *a.graph;
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.to_string() + " and " +
                   b.to_string());
}

// Output shape of a broadcasting binary op.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (b.is_scalar()) return a;
  if (a.is_scalar()) return b;
  if (a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols()) {
    if (b.rows() == 1) return a;
    if (a.rows() == 1) return b;
  }
  shape_mismatch(op, a, b);
}

// Flat index into an operand broadcast to `out`.
inline std::size_t bindex(const Shape& operand, const Shape& out, std::size_t r, std::size_t c) {
  if (operand.is_scalar()) return 0;
  if (operand.rows() == 1 && out.rows() != 1) return c;
  return r * out.cols() + c;
}

template <class F>
Var binary(Op op, const Var& a, const Var& b, F f) {
  Graph& g = same_graph(a, b, op_name(op));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape out = broadcast_shape(op_name(op), av.shape, bv.shape);
  std::vector<double> values(out.size());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      values[r * out.cols() + c] =
          f(av.data[bindex(av.shape, out, r, c)], bv.data[bindex(bv.shape, out, r, c)]);
    }
  }
  Node n;
  n.op = op;
  n.value = Tensor(out, std::move(values));
  n.parents = {a.id, b.id};
  return g.push(std::move(n));
}

template <class F>
Var unary(Op op, const Var& a, F f) {
  const Tensor& av = a.value();
  std::vector<double> values(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) values[i] = f(av.data[i]);
  Node n;
  n.op = op;
  n.value = Tensor(av.shape, std::move(values));
  n.parents = {a.id};
  return a.graph->push(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

// op(a) . op(b), where op transposes when the flag is set. Both operands rank 2.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  Graph& g = detail::same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape.rank() != 2 || bv.shape.rank() != 2) detail::shape_mismatch("matmul", av.shape, bv.shape);
  const std::size_t m = trans_a ? av.cols() : av.rows();
  const std::size_t k = trans_a ? av.rows() : av.cols();
  const std::size_t kb = trans_b ? bv.cols() : bv.rows();
  const std::size_t n = trans_b ? bv.rows() : bv.cols();
  if (k != kb) detail::shape_mismatch("matmul", av.shape, bv.shape);

  std::vector<double> out(m * n, 0.0);
  const std::size_t ac = av.cols();
  const std::size_t bc = bv.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = trans_a ? av.data[p * ac + i] : av.data[i * ac + p];
      for (std::size_t j = 0; j < n; ++j) {
        const double y = trans_b ? bv.data[j * bc + p] : bv.data[p * bc + j];
        out[i * n + j] += x * y;
      }
    }
  }
  Node node;
  node.op = Op::MatMul;
  node.value = Tensor::matrix(m, n, std::move(out));
  node.parents = {a.id, b.id};
  node.trans_a = trans_a;
  node.trans_b = trans_b;
  return g.push(std::move(node));
}

inline Var add(const Var& a, const Var& b) {
  return detail::binary(Op::Add, a, b, [](double x, double y) { return x + y; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(Op::Sub, a, b, [](double x, double y) { return x - y; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(Op::Mul, a, b, [](double x, double y) { return x * y; });
}

inline Var scale(const Var& a, double factor) {
  const Tensor& av = a.value();
  std::vector<double> values(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) values[i] = factor * av.data[i];
  Node n;
  n.op = Op::Scale;
  n.value = Tensor(av.shape, std::move(values));
  n.parents = {a.id};
  n.factor = factor;
  return a.graph->push(std::move(n));
}

inline Var tanh(const Var& a) {
  return detail::unary(Op::Tanh, a, [](double x) { return std::tanh(x); });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(Op::Sigmoid, a, [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

inline Var relu(const Var& a) {
  return detail::unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline Var exp(const Var& a) {
  for (double x : a.value().data) {
    const double y = std::exp(x);
    if (!std::isfinite(y)) {
      throw DomainError("exp: overflow or non-finite input (x = " + std::to_string(x) + ")");
    }
  }
  return detail::unary(Op::Exp, a, [](double x) { return std::exp(x); });
}

inline Var log(const Var& a) {
  for (double x : a.value().data) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw DomainError("log: input must be positive and finite (x = " + std::to_string(x) + ")");
    }
  }
  return detail::unary(Op::Log, a, [](double x) { return std::log(x); });
}

// Mean over one axis of a matrix, keeping dims: axis 0 -> [1 x C], axis 1 -> [R x 1].
inline Var mean_axis(const Var& a, int axis) {
  const Tensor& av = a.value();
  if (av.shape.rank() != 2 || (axis != 0 && axis != 1)) {
    throw ShapeError("mean_axis: needs a matrix and axis 0 or 1, got " + av.shape.to_string() +
                     " axis " + std::to_string(axis));
  }
  const std::size_t R = av.rows(), C = av.cols();
  Tensor out = axis == 0 ? Tensor::zeros(Shape::matrix(1, C)) : Tensor::zeros(Shape::matrix(R, 1));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      out.data[axis == 0 ? c : r] += av.data[r * C + c];
    }
  }
  const double denom = static_cast<double>(axis == 0 ? R : C);
  for (double& v : out.data) v /= denom;
  Node n;
  n.op = Op::MeanAxis;
  n.value = std::move(out);
  n.parents = {a.id};
  n.axis = axis;
  return a.graph->push(std::move(n));
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  Node n;
  n.op = Op::Sum;
  n.value = Tensor::scalar(s);
  n.parents = {a.id};
  return a.graph->push(std::move(n));
}

// Concatenate matrices along axis 0 (stack rows) or axis 1 (join columns).
inline Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Graph& g = *parts.front().graph;
  const Shape& first = parts.front().shape();
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    detail::same_graph(parts.front(), p, "concat");
    const Shape& s = p.shape();
    if (s.rank() != 2) detail::shape_mismatch("concat", first, s);
    if (axis == 1) {
      if (s.rows() != first.rows()) detail::shape_mismatch("concat", first, s);
      cols += s.cols();
    } else {
      if (s.cols() != first.cols()) detail::shape_mismatch("concat", first, s);
      rows += s.rows();
    }
  }
  if (axis == 1) rows = first.rows();
  else cols = first.cols();

  Tensor out = Tensor::zeros(Shape::matrix(rows, cols));
  std::size_t offset = 0;
  Node n;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) {
        if (axis == 1) out(r, offset + c) = v(r, c);
        else out(offset + r, c) = v(r, c);
      }
    }
    offset += axis == 1 ? v.cols() : v.rows();
    n.parents.push_back(p.id);
  }
  n.op = Op::Concat;
  n.value = std::move(out);
  n.axis = axis;
  return g.push(std::move(n));
}

inline Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Row-wise softmax.
inline Var softmax(const Var& a) {
  const Tensor& av = a.value();
  if (av.shape.rank() != 2) throw ShapeError("softmax: needs a matrix, got " + av.shape.to_string());
  Tensor out = av;
  const std::size_t C = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, av(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out(r, c) = std::exp(av(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < C; ++c) out(r, c) /= z;
  }
  Node n;
  n.op = Op::Softmax;
  n.value = std::move(out);
  n.parents = {a.id};
  return a.graph->push(std::move(n));
}

// Mean over rows of -log softmax(logits)[r, labels[r]]. Returns a scalar.
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  if (lv.shape.rank() != 2 || lv.rows() != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + lv.shape.to_string() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t C = lv.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] >= C) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                       " out of range for " + std::to_string(C) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, lv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(lv(r, c) - mx);
    total += mx + std::log(z) - lv(r, labels[r]);
  }
  Node n;
  n.op = Op::SoftmaxXent;
  n.value = Tensor::scalar(total / static_cast<double>(lv.rows()));
  n.parents = {logits.id};
  n.labels.assign(labels.begin(), labels.end());
  return logits.graph->push(std::move(n));
}

// Row-wise argmax as an [R x 1] index column. Ties go to the lowest index.
// Never differentiable.
inline Var argmax(const Var& a) {
  const Tensor& av = a.value();
  if (av.shape.rank() != 2) throw ShapeError("argmax: needs a matrix, got " + av.shape.to_string());
  Tensor out = Tensor::zeros(Shape::matrix(av.rows(), 1));
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < av.cols(); ++c) {
      if (av(r, c) > av(r, best)) best = c;
    }
    out.data[r] = static_cast<double>(best);
  }
  Node n;
  n.op = Op::Argmax;
  n.value = std::move(out);
  n.parents = {a.id};
  return a.graph->push(std::move(n));
}

inline Var stop_gradient(const Var& a) {
  Node n;
  n.op = Op::StopGradient;
  n.value = a.value();
  n.parents = {a.id};
  return a.graph->push(std::move(n));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

inline Var ones(Graph& g, std::size_t rows, std::size_t cols) {
  return g.constant(Tensor::full(Shape::matrix(rows, cols), 1.0));
}

// Sum a broadcast gradient back down to the operand's shape.
inline Var reduce_to(const Var& grad, const Shape& target) {
  const Shape& gs = grad.shape();
  if (gs == target) return grad;
  if (target.is_scalar()) return sum(grad);
  // row broadcast: [R x C] -> [1 x C]
  return matmul(ones(*grad.graph, 1, gs.rows()), grad);
}

// Selection matrix picking columns [offset, offset + width) of a `total`-wide matrix.
inline Var selector(Graph& g, std::size_t total, std::size_t offset, std::size_t width) {
  Tensor s = Tensor::zeros(Shape::matrix(total, width));
  for (std::size_t j = 0; j < width; ++j) s(offset + j, j) = 1.0;
  return g.constant(std::move(s));
}

// Gradients for each parent of `out` given the upstream gradient `up`.
// Entries stay empty for parents that do not require grad.
inline std::vector<std::optional<Var>> backward_rule(Graph& g, NodeId out_id, const Var& up) {
  // Copy the attributes; pushing nodes may reallocate the arena.
  const Node node = [&] {
    const Node& src = g.node(out_id);
    Node copy;
    copy.op = src.op;
    copy.parents = src.parents;
    copy.factor = src.factor;
    copy.axis = src.axis;
    copy.trans_a = src.trans_a;
    copy.trans_b = src.trans_b;
    copy.labels = src.labels;
    return copy;
  }();
  std::vector<std::optional<Var>> grads(node.parents.size());
  auto parent = [&](std::size_t i) { return Var{&g, node.parents[i]}; };
  auto needs = [&](std::size_t i) { return g.node(node.parents[i]).requires_grad; };
  const Var out{&g, out_id};

  switch (node.op) {
    case Op::Leaf:
    case Op::Argmax:
    case Op::StopGradient:
      break;
    case Op::MatMul: {
      const Var a = parent(0), b = parent(1);
      const bool ta = node.trans_a, tb = node.trans_b;
      if (needs(0)) {
        if (!ta && !tb) grads[0] = matmul(up, b, false, true);
        else if (!ta && tb) grads[0] = matmul(up, b, false, false);
        else if (ta && !tb) grads[0] = matmul(b, up, false, true);
        else grads[0] = matmul(b, up, true, true);
      }
      if (needs(1)) {
        if (!ta && !tb) grads[1] = matmul(a, up, true, false);
        else if (!ta && tb) grads[1] = matmul(up, a, true, false);
        else if (ta && !tb) grads[1] = matmul(a, up, false, false);
        else grads[1] = matmul(up, a, true, true);
      }
      break;
    }
    case Op::Add:
      if (needs(0)) grads[0] = reduce_to(up, parent(0).shape());
      if (needs(1)) grads[1] = reduce_to(up, parent(1).shape());
      break;
    case Op::Sub:
      if (needs(0)) grads[0] = reduce_to(up, parent(0).shape());
      if (needs(1)) grads[1] = reduce_to(scale(up, -1.0), parent(1).shape());
      break;
    case Op::Mul:
      if (needs(0)) grads[0] = reduce_to(mul(up, parent(1)), parent(0).shape());
      if (needs(1)) grads[1] = reduce_to(mul(up, parent(0)), parent(1).shape());
      break;
    case Op::Scale:
      grads[0] = scale(up, node.factor);
      break;
    case Op::Tanh:
      grads[0] = mul(up, sub(g.scalar(1.0), mul(out, out)));
      break;
    case Op::Sigmoid:
      grads[0] = mul(up, mul(out, sub(g.scalar(1.0), out)));
      break;
    case Op::Relu: {
      const Tensor& x = parent(0).value();
      Tensor mask = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) mask.data[i] = x.data[i] > 0.0 ? 1.0 : 0.0;
      grads[0] = mul(up, g.constant(std::move(mask)));
      break;
    }
    case Op::Exp:
      grads[0] = mul(up, out);
      break;
    case Op::Log:
      // d log x = 1/x = exp(-log x)
      grads[0] = mul(up, exp(scale(out, -1.0)));
      break;
    case Op::MeanAxis: {
      const Shape& xs = parent(0).shape();
      if (node.axis == 0) {
        grads[0] = scale(matmul(ones(g, xs.rows(), 1), up), 1.0 / static_cast<double>(xs.rows()));
      } else {
        grads[0] = scale(matmul(up, ones(g, 1, xs.cols())), 1.0 / static_cast<double>(xs.cols()));
      }
      break;
    }
    case Op::Sum: {
      const Shape& xs = parent(0).shape();
      grads[0] = mul(g.constant(Tensor::full(xs, 1.0)), up);
      break;
    }
    case Op::Concat: {
      const Shape os = out.shape();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < node.parents.size(); ++i) {
        const Shape ps = parent(i).shape();
        if (node.axis == 1) {
          if (needs(i)) grads[i] = matmul(up, selector(g, os.cols(), offset, ps.cols()));
          offset += ps.cols();
        } else {
          if (needs(i)) grads[i] = matmul(selector(g, os.rows(), offset, ps.rows()), up, true, false);
          offset += ps.rows();
        }
      }
      break;
    }
    case Op::Softmax: {
      // dx = y * (up - rowsum(up * y))
      const Shape os = out.shape();
      const Var rowsum = scale(mean_axis(mul(up, out), 1), static_cast<double>(os.cols()));
      grads[0] = mul(out, sub(up, matmul(rowsum, ones(g, 1, os.cols()))));
      break;
    }
    case Op::SoftmaxXent: {
      const Var logits = parent(0);
      const Shape ls = logits.shape();
      Tensor onehot = Tensor::zeros(ls);
      for (std::size_t r = 0; r < ls.rows(); ++r) onehot(r, node.labels[r]) = 1.0;
      const Var diff = sub(softmax(logits), g.constant(std::move(onehot)));
      grads[0] = mul(scale(diff, 1.0 / static_cast<double>(ls.rows())), up);
      break;
    }
  }
  return grads;
}

}  // namespace detail

// Gradients of a scalar loss with respect to each node in `wrt`.
//
// With create_graph the returned nodes are part of the graph and can be
// differentiated again; otherwise they are detached constant leaves.
// A wrt node the loss does not depend on gets a zero gradient of its shape.
inline std::vector<Var> grad(const Var& loss, std::span<const Var> wrt, bool create_graph = false) {
  Graph& g = *loss.graph;
  if (!loss.shape().is_scalar()) {
    throw ShapeError("grad: loss must be a scalar, got " + loss.shape().to_string());
  }
  for (const Var& w : wrt) {
    if (w.graph != &g) throw Error("grad: wrt node belongs to a different graph");
    if (!w.requires_grad()) {
      throw Error("grad: wrt node " + std::to_string(w.id) + " does not require grad");
    }
  }

  const NodeId top = loss.id;
  // Nodes that depend on some wrt node; only these carry adjoints.
  std::vector<char> relevant(top + 1, 0);
  for (const Var& w : wrt) {
    if (w.id <= top) relevant[w.id] = 1;
  }
  for (NodeId id = 0; id <= top; ++id) {
    if (relevant[id]) continue;
    const Node& n = g.node(id);
    if (!n.requires_grad || n.op == Op::Leaf) continue;
    for (NodeId p : n.parents) {
      if (relevant[p]) {
        relevant[id] = 1;
        break;
      }
    }
  }

  GradModeGuard mode(g, create_graph);
  std::vector<std::optional<Var>> adjoint(top + 1);
  if (relevant[top]) adjoint[top] = g.scalar(1.0);

  for (std::int64_t i = top; i >= 0; --i) {
    const NodeId id = static_cast<NodeId>(i);
    if (!adjoint[id]) continue;
    const Node& n = g.node(id);
    if (n.op == Op::Leaf || !n.requires_grad) continue;
    const std::vector<NodeId> parents = n.parents;
    auto parent_grads = detail::backward_rule(g, id, *adjoint[id]);
    for (std::size_t k = 0; k < parents.size(); ++k) {
      const NodeId p = parents[k];
      if (!parent_grads[k] || !relevant[p]) continue;
      adjoint[p] = adjoint[p] ? add(*adjoint[p], *parent_grads[k]) : *parent_grads[k];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    const bool reached = w.id <= top && adjoint[w.id].has_value();
    if (!reached) {
      out.push_back(g.constant(Tensor::zeros(w.shape())));
    } else if (create_graph) {
      out.push_back(*adjoint[w.id]);
    } else {
      out.push_back(g.constant(adjoint[w.id]->value()));
    }
  }
  return out;
}

inline std::vector<Var> grad(const Var& loss, std::initializer_list<Var> wrt, bool create_graph = false) {
  return grad(loss, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

// d functional(grad(loss, inner)) / d outer. The inner gradients are built
// with create_graph=true, so this is where Hessian-vector products arise.
template <class Functional>
std::vector<Var> second_order_grad(const Var& loss, std::span<const Var> inner,
                                   std::span<const Var> outer, Functional&& functional) {
  const std::vector<Var> inner_grads = grad(loss, inner, true);
  const Var value = functional(std::span<const Var>(inner_grads));
  return grad(value, outer, false);
}

}  // namespace e3bm::ad

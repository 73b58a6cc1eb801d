#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "e3bm/error.hpp"

namespace e3bm {

// Tensors are either scalars (rank 0) or row-major matrices (rank 2).
// Vectors are stored as [1 x n] rows.
class Shape {
 public:
  Shape() = default;

  static Shape scalar() { return Shape{}; }
  static Shape matrix(std::size_t rows, std::size_t cols) {
    Shape s;
    s.rank_ = 2;
    s.rows_ = rows;
    s.cols_ = cols;
    return s;
  }
  static Shape row(std::size_t n) { return matrix(1, n); }

  std::size_t rank() const noexcept { return rank_; }
  bool is_scalar() const noexcept { return rank_ == 0; }
  std::size_t rows() const noexcept { return rank_ == 0 ? 1 : rows_; }
  std::size_t cols() const noexcept { return rank_ == 0 ? 1 : cols_; }
  std::size_t size() const noexcept { return rows() * cols(); }

  std::vector<std::size_t> dims() const {
    if (rank_ == 0) return {};
    return {rows_, cols_};
  }

  std::string to_string() const {
    if (rank_ == 0) return "[]";
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    return a.rank_ == b.rank_ && a.rows() == b.rows() && a.cols() == b.cols();
  }

 private:
  std::size_t rank_ = 0;
  std::size_t rows_ = 1;
  std::size_t cols_ = 1;
};

// Dense value of 64-bit floats. Plain value type; no graph linkage.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}
  Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                       shape.to_string());
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape::scalar(), {v}); }
  static Tensor full(Shape s, double v) { return Tensor(s, std::vector<double>(s.size(), v)); }
  static Tensor zeros(Shape s) { return full(s, 0.0); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape::matrix(rows, cols), std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape::row(n), std::move(values));
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("tensor: ragged rows");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape::matrix(rows.size(), cols), std::move(values));
  }

  std::size_t rows() const noexcept { return shape.rows(); }
  std::size_t cols() const noexcept { return shape.cols(); }
  std::size_t size() const noexcept { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols() + c]; }
  double item() const { return data.at(0); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

}  // namespace e3bm

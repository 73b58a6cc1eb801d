#pragma once

// Central finite differences, used as the independent oracle for every
// analytic gradient in the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "e3bm/tensor.hpp"

namespace e3bm::testing {

// Numerical gradient of `f` with respect to every entry of every tensor in
// `inputs`. `f` must not keep references to the inputs between calls.
inline std::vector<Tensor> central_difference(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
    double eps) {
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor g = Tensor::zeros(inputs[t].shape);
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t].data[i];
      inputs[t].data[i] = orig + eps;
      const double up = f(inputs);
      inputs[t].data[i] = orig - eps;
      const double down = f(inputs);
      inputs[t].data[i] = orig;
      g.data[i] = (up - down) / (2.0 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max |a - b| / max(max |a|, max |b|, floor) over one tensor.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a.data[i] - b.data[i]));
    scale = std::max({scale, std::abs(a.data[i]), std::abs(b.data[i])});
  }
  return diff / scale;
}

inline double max_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace e3bm::testing

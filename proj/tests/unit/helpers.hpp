#pragma once

#include <random>
#include <vector>

#include "convbert/nn.hpp"
#include "convbert/reference.hpp"
#include "convbert/tensor.hpp"

namespace testing {

inline convbert::Tensor randn(convbert::Rng& rng, convbert::Shape shape, double stddev = 1.0,
                              bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(convbert::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return convbert::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline convbert::reference::Matrix mat(const convbert::Tensor& t) {
  return convbert::reference::Matrix(t.dim(0), t.dim(1), t.data());
}

inline double max_diff(std::span<const double> a, std::span<const double> b) {
  return convbert::reference::max_abs_diff(a, b);
}

inline void fill(const convbert::Tensor& t, double value) {
  convbert::Tensor p = t;
  for (double& x : p.mutable_data()) x = value;
}

}  // namespace testing

#pragma once

// Parameter containers shared by the attention and encoder modules.

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "convbert/tensor.hpp"

namespace convbert {

using Rng = std::mt19937_64;

// Named parameters in declaration order.
class ParameterList {
 public:
  void add(std::string name, Tensor tensor);
  void append(const ParameterList& other);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  // Tensors with duplicates (shared storage) removed, first occurrence kept.
  std::vector<Tensor> unique_tensors() const;
  std::size_t scalar_count() const;
  const Tensor& find(const std::string& name) const;
  void zero_grad() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

Tensor normal_parameter(Shape shape, Rng& rng, double stddev = 0.02);
Tensor constant_parameter(Shape shape, double value);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

// Block-diagonal linear map: `groups` independent slices of the feature axis.
struct GroupedLinear {
  Tensor weight;  // [groups x in/groups x out/groups]
  Tensor bias;    // [out]

  GroupedLinear() = default;
  GroupedLinear(std::size_t in, std::size_t out, std::size_t groups, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-12;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

}  // namespace convbert

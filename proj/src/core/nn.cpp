#include "convbert/nn.hpp"

#include <unordered_set>

#include "convbert/errors.hpp"
#include "convbert/ops.hpp"

namespace convbert {

void ParameterList::add(std::string name, Tensor tensor) { entries_.emplace_back(std::move(name), std::move(tensor)); }

void ParameterList::append(const ParameterList& other) {
  entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

std::vector<Tensor> ParameterList::unique_tensors() const {
  std::vector<Tensor> out;
  std::unordered_set<std::uintptr_t> seen;
  for (const auto& [name, t] : entries_) {
    if (seen.insert(t.id()).second) out.push_back(t);
  }
  return out;
}

std::size_t ParameterList::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : unique_tensors()) n += t.numel();
  return n;
}

const Tensor& ParameterList::find(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw InputError("no parameter named '" + name + "'");
}

void ParameterList::zero_grad() const {
  for (auto [name, t] : entries_) t.zero_grad();
}

Tensor normal_parameter(Shape shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor constant_parameter(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(normal_parameter({in, out}, rng)), bias(constant_parameter({out}, 0.0)) {}

Tensor Linear::operator()(const Tensor& x) const { return grouped_linear(x, weight, bias); }

void Linear::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

GroupedLinear::GroupedLinear(std::size_t in, std::size_t out, std::size_t groups, Rng& rng) {
  if (groups == 0 || in % groups != 0 || out % groups != 0) {
    throw ConfigError("grouped linear: " + std::to_string(groups) + " groups must divide both " + std::to_string(in) +
                      " and " + std::to_string(out));
  }
  weight = normal_parameter({groups, in / groups, out / groups}, rng);
  bias = constant_parameter({out}, 0.0);
}

Tensor GroupedLinear::operator()(const Tensor& x) const { return grouped_linear(x, weight, bias); }

void GroupedLinear::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t width)
    : gamma(constant_parameter({width}, 1.0)), beta(constant_parameter({width}, 0.0)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
}

}  // namespace convbert

#include "convbert/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "convbert/errors.hpp"

namespace convbert {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn, std::size_t param, std::size_t coord) {
  NoGradGuard no_grad;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) {
    throw EvaluationError("non-finite loss while perturbing parameter " + std::to_string(param) + " coordinate " +
                          std::to_string(coord));
  }
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) {
    throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar");
  backward(loss);

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    auto values = p.mutable_data();
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + options.eps;
      const double up = evaluate(loss_fn, pi, c);
      values[c] = saved - options.eps;
      const double down = evaluate(loss_fn, pi, c);
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double rel = std::abs(analytic[c] - numeric) / std::max(1.0, std::abs(analytic[c]));
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.coords_checked == 1) {
        result.max_rel_error = rel;
        result.worst_param = pi;
        result.worst_coord = c;
        result.worst_analytic = analytic[c];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace convbert

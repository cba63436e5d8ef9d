#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "convbert/tensor.hpp"

namespace convbert {

struct GradCheckOptions {
  double eps = 1e-6;
  // Coordinates checked per parameter tensor; tensors at or below this size
  // are checked exhaustively, larger ones are sampled.
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Compares backward() against central differences of `loss_fn` with respect
// to every tensor in `params`. Relative error is
// |analytic - numeric| / max(1, |analytic|). Parameters are restored after
// each perturbation. Throws EvaluationError naming the coordinate when the
// perturbed loss is not finite.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace convbert

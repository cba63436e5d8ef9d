#pragma once

// Verification suites shared by the CLI, the acceptance binary and the unit
// tests.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "convbert/config.hpp"
#include "convbert/pretrain.hpp"

namespace convbert::verify {

// ---- oracle equivalence -------------------------------------------------

struct OracleResult {
  std::string op;
  std::size_t instances = 0;
  double max_error = 0.0;
};

// Seeded random instances (n <= 16, d <= 16, k in {1, 3, 5, 9}) of every
// operator, compared against the naive reference implementation. Returns
// one entry per operator with the worst absolute difference.
std::vector<OracleResult> run_oracle_suite(std::uint64_t seed, std::size_t instances = 50);

// ---- gradient checks ----------------------------------------------------

enum class GradScope { Op, Block, Model };
GradScope parse_grad_scope(std::string_view name);
// Pass threshold on the relative error for a scope.
double grad_threshold(GradScope scope);

struct GradResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
};

std::vector<GradResult> run_grad_suite(GradScope scope, std::uint64_t seed);

// ---- kernel discrimination ----------------------------------------------

struct DiscriminationResult {
  std::size_t draws = 0;
  std::size_t dconv_identical = 0;   // dconv kernels bitwise equal at the repeated token
  std::size_t sdconv_distinct = 0;   // sdconv kernels differ by more than the gap
  double min_sdconv_gap = 0.0;       // smallest max-abs kernel difference seen
};

// Each draw places one token vector at two positions with different
// neighbourhoods and compares the generated kernels there.
DiscriminationResult run_discrimination(std::uint64_t seed, std::size_t draws = 100, double gap = 1e-6);

// ---- complexity ---------------------------------------------------------

struct ScalingPoint {
  std::size_t n = 0;
  std::uint64_t attention_madds = 0;  // attention scores, softmax and context over all layers
  std::uint64_t sdconv_madds = 0;     // kernel generation and lightweight conv over all layers
  double attention_seconds = 0.0;     // best of the repetitions, one operator call
  double sdconv_seconds = 0.0;
};

// Counted costs from count_flops and measured single-call timings of the
// self-attention and span-based dynamic convolution operators at the
// configuration's widths.
std::vector<ScalingPoint> measure_scaling(const ModelConfig& cfg, std::span<const std::size_t> lengths,
                                          std::size_t repetitions = 7);

// ---- pretraining smoke runs ---------------------------------------------

// Documents that walk a fixed random permutation of `words` word types, so
// every token is predictable from its neighbour.
std::vector<std::string> chain_corpus(std::size_t documents, std::size_t words, std::size_t length,
                                      std::uint64_t seed);

struct SmokeSetup {
  Objective objective = Objective::Mlm;
  std::size_t steps = 300;
  double learning_rate = 1e-2;
  std::uint64_t seed = 3;
};

struct SmokeResult {
  double initial_mlm = 0.0;   // held-out masked cross-entropy before training
  double final_mlm = 0.0;
  RtdEvaluation rtd;          // filled for the RTD objective
  std::vector<StepMetrics> metrics;
  double seconds = 0.0;
};

SmokeSetup default_smoke(Objective objective);
SmokeResult run_smoke(const SmokeSetup& setup);

// Bitwise equality of two training logs.
bool same_metrics(const std::vector<StepMetrics>& a, const std::vector<StepMetrics>& b);

}  // namespace convbert::verify

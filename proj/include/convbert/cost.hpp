#pragma once

// Analytic parameter and multiply-add accounting.
//
// Costs follow the operator conventions of ops.hpp: a product [n x a].[a x b]
// costs n*a*b, a grouped product divides that by the group count, biases,
// softmax, layer norm, activations, residual adds and masking cost one unit
// per output element, and lookups, reshapes and concatenations are free.
// count_flops mirrors the instrumented forward pass exactly.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "convbert/config.hpp"

namespace convbert {

struct CostNode {
  CostNode() = default;
  explicit CostNode(std::string node_name) : name(std::move(node_name)) {}

  std::string name;
  // Own counts; only leaves carry non-zero values.
  std::uint64_t params = 0;
  std::uint64_t madds = 0;
  std::vector<CostNode> children;

  std::uint64_t total_params() const;
  std::uint64_t total_madds() const;
  CostNode& child(std::string_view name);
};

class CostReport {
 public:
  CostReport() : root_("model") {}
  CostReport(CostNode root, std::size_t seq_len) : root_(std::move(root)), seq_len_(seq_len) {}

  const CostNode& root() const { return root_; }
  std::size_t seq_len() const { return seq_len_; }
  std::uint64_t total_params() const { return root_.total_params(); }
  std::uint64_t total_madds() const { return root_.total_madds(); }

  // Node at a dotted path below the root ("layer.0.attention.scores").
  // Throws InputError when absent.
  const CostNode& at(std::string_view path) const;
  // Sum of a component over every layer, e.g. "attention.scores".
  std::uint64_t layer_madds(std::string_view component) const;

  // Indented tree, one node per line with its subtree totals.
  std::string to_text() const;
  // `component,params,madds` with one row per node in pre-order; component
  // is the dotted path and the numbers are subtree totals.
  std::string to_csv() const;
  // Rebuilds the tree from to_csv output; interior rows must equal the sum
  // of their children.
  static CostReport from_csv(std::string_view csv);

 private:
  CostNode root_;
  std::size_t seq_len_ = 0;
};

CostReport count_params(const ModelConfig& cfg);
CostReport count_flops(const ModelConfig& cfg, std::size_t n);

}  // namespace convbert

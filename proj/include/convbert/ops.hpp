#pragma once

// Differentiable primitives. Every op checks shapes, records its backward
// closure when grad mode is on, and reports its forward cost to MaddCounter
// (multiply-adds for products, one unit per element for everything else).

#include <cstdint>
#include <span>
#include <vector>

#include "convbert/tensor.hpp"

namespace convbert {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[n x m] + bias[m] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// Shares no storage with the input; the gradient is passed through unchanged.
Tensor reshape(const Tensor& a, Shape shape);

// Overflow-safe softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

// Row-wise normalization over the last axis of a 2-D tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Concatenate two [n x a] and [n x b] tensors along columns.
Tensor concat_cols(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Rows of table[V x m] selected by ids; the backward scatters into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);

// Multiplies row i by valid[i] (0 or 1); empty mask is the identity.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> valid);

// x[n x a] split into `groups` contiguous column slices; slice g is
// multiplied by weight[g] ([a/g x b/g]) and the results are concatenated.
// A rank-2 weight [a x b] means groups == 1. `bias` may be undefined.
Tensor grouped_linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean cross-entropy over rows whose target is >= 0. Returns a constant 0
// when no row has a target.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

// Mean binary cross-entropy with logits over rows with weight != 0.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels, std::span<const double> weights);

}  // namespace convbert

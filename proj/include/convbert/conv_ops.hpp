#pragma once

// Convolution operators for local context modelling: depthwise, lightweight
// (weights tied across the channels of a head, one kernel per position),
// dynamic (kernel generated from the current token) and span-based dynamic
// (kernel generated from the query and a span-aware key).
//
// Taps are centred: output i reads input i + j - (k-1)/2 for j in [0, k),
// with zeros outside the sequence. k must be odd.

#include <cstddef>

#include "convbert/tensor.hpp"

namespace convbert {

// Per-position, per-head softmax-normalized kernels, stored as a tensor of
// shape [n x heads x k].
class KernelSet {
 public:
  KernelSet() = default;
  explicit KernelSet(Tensor values);

  const Tensor& values() const { return values_; }
  std::size_t positions() const { return values_.dim(0); }
  std::size_t heads() const { return values_.dim(1); }
  std::size_t taps() const { return values_.dim(2); }
  double at(std::size_t position, std::size_t head, std::size_t tap) const;

 private:
  Tensor values_;
};

// Weights of a kernel generator: one [d_head x k] map per head plus a
// per-head bias of k logits.
struct KernelGenerator {
  Tensor weight;  // [heads x d_head x k]
  Tensor bias;    // [heads * k], may be undefined

  std::size_t heads() const { return weight.dim(0); }
  std::size_t head_dim() const { return weight.dim(1); }
  std::size_t taps() const { return weight.dim(2); }
};

void require_odd_kernel(std::size_t k);

// x [n x d], w [d x k] -> [n x d]
Tensor dwconv(const Tensor& x, const Tensor& w);

// v [n x d], kernels [n x heads x k] -> [n x d]. Channel c uses head
// c / (d / heads).
Tensor lconv(const Tensor& v, const KernelSet& kernels);

// x [n x 2m] -> first half * sigmoid(second half), [n x m].
Tensor glu(const Tensor& x);

// Kernels softmax(W_f,h . x_i,h) from a single token's head slice.
KernelSet dconv_kernels(const Tensor& x, const KernelGenerator& gen);
Tensor dconv(const Tensor& x, const KernelGenerator& gen);

// Span-aware key: pointwise(dwconv(x, depthwise)) + bias.
// x [n x d], depthwise [d x k], pointwise [d x d_cv], bias [d_cv] or undefined.
Tensor span_key(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise, const Tensor& bias);

// kernels[i][h] = softmax over taps of W_f,h . (q_i ⊙ ks_i) restricted to head h.
KernelSet kernel_gen(const Tensor& q, const Tensor& key_span, const KernelGenerator& gen);

// lconv(v, kernel_gen(q, key_span, gen)).
Tensor sdconv(const Tensor& q, const Tensor& key_span, const Tensor& v, const KernelGenerator& gen);

}  // namespace convbert

#pragma once

// Bottlenecked multi-head self-attention and the mixed attention block that
// concatenates it with a span-based dynamic convolution branch.
//
// Both branches read the same query. Self-attention uses a linear key; the
// convolution branch uses a span-aware key from a depthwise-separable
// convolution of the input and convolves its own value projection. The
// concatenation (width 2 d/γ) goes through a single output projection to d.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convbert/conv_ops.hpp"
#include "convbert/nn.hpp"
#include "convbert/tensor.hpp"

namespace convbert {

struct MixedAttentionConfig {
  std::size_t d = 256;
  std::size_t heads = 4;     // before the bottleneck
  std::size_t reduction = 2; // γ
  std::size_t head_dim = 64;
  std::size_t kernel = 9;
  bool use_conv = true;

  std::size_t bottleneck_width() const { return d / reduction; }
  std::size_t attention_heads() const { return heads / reduction; }
  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

// Validity flags for a batch of equal-length sequences; 1 = real token.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t batch, std::size_t length, std::uint8_t fill = 1);

  std::size_t batch() const { return batch_; }
  std::size_t length() const { return length_; }
  std::span<const std::uint8_t> row(std::size_t b) const;
  void set(std::size_t b, std::size_t i, bool valid);

 private:
  std::size_t batch_ = 0;
  std::size_t length_ = 0;
  std::vector<std::uint8_t> flags_;
};

// Multi-head scaled dot-product attention over [n x heads*head_dim] inputs.
// Keys with valid[j] == 0 get zero weight; a query with no valid key yields
// a zero output row. When `weights` is non-null it receives the post-softmax
// maps as a [heads x n x n] tensor.
Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                      std::span<const std::uint8_t> valid = {}, Tensor* weights = nullptr);

struct Projections {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor key_span;    // undefined without the convolution branch
  Tensor conv_value;  // undefined without the convolution branch
};

struct MixedAttention {
  MixedAttentionConfig config;
  Linear query;
  Linear key;
  Linear value;
  Tensor span_depthwise;  // [d x k]
  Linear span_pointwise;  // d -> d/γ
  KernelGenerator kernel_generator;
  Linear conv_value;
  Linear output;

  MixedAttention() = default;
  MixedAttention(const MixedAttentionConfig& config, Rng& rng);

  Projections project(const Tensor& x, std::span<const std::uint8_t> valid = {}) const;
  Tensor forward(const Tensor& x, std::span<const std::uint8_t> valid = {}, Tensor* attention_weights = nullptr) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

}  // namespace convbert

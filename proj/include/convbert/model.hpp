#pragma once

// Full encoder: embeddings, a stack of post-norm layers (mixed attention then
// grouped feed-forward, each wrapped in residual + layer norm).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convbert/attention.hpp"
#include "convbert/config.hpp"
#include "convbert/nn.hpp"
#include "convbert/tensor.hpp"

namespace convbert {

struct Embeddings {
  Tensor word;        // [vocab x d_emb]
  Linear projection;  // d_emb -> d, only when d_emb != d
  bool projected = false;
  Tensor position;    // [max_positions x d]
  Tensor segment;     // [type_vocab x d]
  LayerNorm norm;

  Embeddings() = default;
  Embeddings(const ModelConfig& cfg, Rng& rng);

  // `segments` may be empty (all zeros). Positions are 0..n-1.
  Tensor operator()(std::span<const std::int64_t> ids, std::span<const std::int64_t> segments = {}) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

struct FeedForward {
  GroupedLinear inner;  // d -> ffn_inner
  GroupedLinear outer;  // ffn_inner -> d

  FeedForward() = default;
  FeedForward(const ModelConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

struct EncoderLayer {
  MixedAttention attention;
  LayerNorm attention_norm;
  FeedForward ffn;
  LayerNorm ffn_norm;

  EncoderLayer() = default;
  EncoderLayer(const ModelConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& x, std::span<const std::uint8_t> valid, Tensor* attention_weights = nullptr) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

class ConvBertModel {
 public:
  ConvBertModel() = default;
  ConvBertModel(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return config_; }
  Embeddings& embeddings() { return embeddings_; }
  const Embeddings& embeddings() const { return embeddings_; }
  std::vector<EncoderLayer>& layers() { return layers_; }
  const std::vector<EncoderLayer>& layers() const { return layers_; }

  // Hidden states [n x d] for one sequence. An empty `valid` means every
  // position is real. When `attention_maps` is non-null it receives one
  // [heads x n x n] tensor per layer.
  Tensor forward(std::span<const std::int64_t> ids, std::span<const std::uint8_t> valid = {},
                 std::span<const std::int64_t> segments = {}, std::vector<Tensor>* attention_maps = nullptr) const;

  // Names are "embeddings.*" and "layer.<i>.*" behind `prefix` (which, when
  // non-empty, is joined with a dot).
  ParameterList parameters(const std::string& prefix = "") const;

 private:
  ModelConfig config_;
  Embeddings embeddings_;
  std::vector<EncoderLayer> layers_;
};

// Mean over layers and self-attention heads of the softmax weights, row-major
// [n x n].
std::vector<double> average_attention_map(const ConvBertModel& model, std::span<const std::int64_t> ids);

}  // namespace convbert

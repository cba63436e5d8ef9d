#pragma once

// Model hyperparameters, named presets and the flat key-value config format.
//
// Config files hold one `key = value` per line; `#` starts a comment. Keys
// are the ModelConfig field names: layers, d, d_emb, ffn_inner, groups, H,
// gamma, d_head, k, vocab_size, max_positions, variant. An optional leading
// `preset = <name>` seeds every field from a preset before overrides.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "convbert/attention.hpp"

namespace convbert {

enum class Variant {
  BertBaseline,    // plain self-attention, full width
  Bottleneck,      // bnk
  BottleneckConv,  // bnk+sdconv
  BottleneckGl,    // bnk+gl
  BottleneckGlConv // bnk+gl+sdconv
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
bool variant_has_conv(Variant v);
bool variant_has_groups(Variant v);
bool variant_has_bottleneck(Variant v);

struct ModelConfig {
  std::size_t layers = 12;
  std::size_t d = 256;
  std::size_t d_emb = 128;
  std::size_t ffn_inner = 1024;
  std::size_t groups = 1;
  std::size_t heads = 4;      // H, before the bottleneck
  std::size_t reduction = 2;  // γ
  std::size_t head_dim = 64;
  std::size_t kernel = 9;
  std::size_t vocab_size = 30522;
  std::size_t max_positions = 512;
  std::size_t type_vocab = 2;
  Variant variant = Variant::BottleneckConv;

  MixedAttentionConfig attention() const;
  void validate() const;

  std::string to_text() const;
  static ModelConfig parse(std::string_view text);
  static ModelConfig load(const std::string& path);

  // Named sizes: "small", "medium-small", "base", plus "tiny" for tests.
  // The variant fixes γ (1 for the baseline, 2 otherwise) and the FFN group
  // count (2 for the grouped variants, 1 otherwise).
  static ModelConfig preset(std::string_view name, Variant variant);
  static std::vector<std::string> preset_names();

  bool operator==(const ModelConfig&) const = default;
};

// Generator used for replaced-token detection: hidden size, FFN width and
// head count scaled by `multiplier` (1/4 for small sizes, 1/3 for base).
ModelConfig generator_config(const ModelConfig& main, double multiplier);
double default_generator_multiplier(std::string_view preset);

// Learning rate from the pretraining table for a preset.
double default_learning_rate(std::string_view preset);

}  // namespace convbert

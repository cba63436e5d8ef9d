#pragma once

// Binary checkpoint:
//   "CVBT1"
//   u32 config length, config text (ModelConfig::to_text)
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u32 extents[rank],
//               f32 values (little-endian, row-major)
// Tensors appear in parameter declaration order; a tensor shared under
// several names is stored once, under its first name.

#include <string>
#include <vector>

#include "convbert/config.hpp"
#include "convbert/model.hpp"
#include "convbert/nn.hpp"

namespace convbert {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParameterList& params);
Checkpoint load_checkpoint(const std::string& path);

// Overwrites every tensor in `params` with the stored values of the same
// name. Throws InputError on a missing name or a shape mismatch.
void restore_parameters(const Checkpoint& ckpt, const ParameterList& params);

// Encoder rebuilt from the checkpoint's config and "embeddings.*"/"layer.*"
// tensors; head tensors are ignored.
ConvBertModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace convbert

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pral/tensor.hpp"

namespace pral {

struct NamedTensor {
  std::string name;  // dot-separated path, e.g. "system_lm.block0.attn.w_q"
  Tensor<float> tensor;
};

// Parameters plus a free-form metadata string (the model manifest as JSON).
struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

// Binary layout (little-endian):
//   "PRALCKP1" | u32 metadata_len | metadata | u64 count |
//   count x { u32 name_len | name | u32 rank | rank x u64 dim | f32 values }
// Writes to a temporary sibling and renames, so an existing file is only
// replaced by a complete one.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pral

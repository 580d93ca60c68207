#pragma once

#include <string>
#include <vector>

#include "malsf/model.hpp"

namespace malsf {

// Binary checkpoint: magic, version, config echo (dims, seed, ablation
// flags), named little-endian float64 parameter blobs, trailing CRC32.
// Exact layout pinned in FORMATS.md.
struct CheckpointData {
  ModelConfig config;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(MalsfModel& model, const std::string& path);
CheckpointData read_checkpoint(const std::string& path);

// Strict application: the checkpoint's parameter names must match the
// model's exactly; mismatches raise an error listing the offending names.
void apply_checkpoint(const CheckpointData& data, MalsfModel& model);

// Rebuilds the model from the stored config echo and applies the blobs.
MalsfModel load_model(const std::string& path);

}  // namespace malsf

#pragma once

#include "pdnet/model.hpp"

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace pdnet {

/// Everything besides weights that a stage checkpoint records.
struct CheckpointMeta {
   ModelConfig model;
   int stage = 2;
   double sigma = 7.0;
   double lambda = 0.01;
   nlohmann::json extra = nlohmann::json::object(); ///< training config, round, etc.
};

/// A stage checkpoint directory:
///   config.json   - CheckpointMeta + format version
///   manifest.json - tensor names, dtypes and shapes in archive order
///   weights.bin   - "PDNW" magic, u32 version, u32 count, then per tensor:
///                   u32 name length, name, u8 dtype (0 f32, 1 i64), u32 rank,
///                   i64 dims, little-endian raw data
void save_checkpoint(const std::filesystem::path& dir, PdNet& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
   CheckpointMeta meta;
   PdNet model{nullptr};
   std::string model_version; ///< content hash of weights.bin
};

/// Builds the network from config.json and loads every named tensor; the model is
/// returned in eval mode. Throws on missing or mismatched tensors.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Named parameters and buffers in registration order.
std::vector<std::pair<std::string, torch::Tensor>> named_state(PdNet& model);

nlohmann::json to_json(const CheckpointMeta& meta);
CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j);

} // namespace pdnet

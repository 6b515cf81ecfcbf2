#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>

#include <json.hpp>

#include "mdg/optimizer.hpp"

namespace mdg {

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  OptimizerState<float> optimizer;
  /// Free-form run metadata (schedule, dataset manifest hash, ...).
  nlohmann::json metadata = nlohmann::json::object();
};

/// Layout: magic `mgckpt1`; u32 length + JSON config block; u32 tensor count; per tensor
/// (u32 name length, name, u32 rank, u32 dims..., little-endian f32 data); u64 FNV-1a checksum
/// of the tensor section.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws CheckpointError on bad magic, shape or checksum mismatch, or when
/// `expected_vocab_size` is given and differs from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_vocab_size = std::nullopt);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace mdg

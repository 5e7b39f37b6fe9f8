#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "ual/adam.hpp"
#include "ual/model.hpp"

namespace ual {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model parameters (32-bit) plus training position and optional optimizer moments.
struct Checkpoint {
  Parameters<float> params;
  std::int64_t step = 0;
  std::optional<AdamState<float>> optimizer;

  const ModelConfig& config() const noexcept { return params.config; }
};

/// Binary container: 8-byte magic, u32 version, u64 header length, JSON
/// header (config + tensor directory), little-endian f32 payloads.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ual

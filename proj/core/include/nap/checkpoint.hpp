#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "nap/model.hpp"

namespace nap {

inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

/// Parameter checkpoint layout (little-endian):
///
///   "NAPW"                 magic
///   u16 version            kCheckpointFormatVersion
///   u32 config_length      followed by the ModelConfig as JSON
///   u32 block_count
///   per block:             u16 name_length, name bytes, u8 rank,
///                          u32 extent per axis, f32 values (row-major)
///
/// Blocks appear in canonical parameter order.
struct Checkpoint {
  ModelConfig config;
  NapParameters params;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config, const NapParameters& params);

/// Decodes and checks every block against the structure implied by the
/// stored config. If `expected` is given and differs from the stored config,
/// throws ConfigMismatchError.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                             const std::optional<ModelConfig>& expected = std::nullopt);

/// Atomic write (temporary file + rename), so an interrupted save never
/// leaves a truncated checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const NapParameters& params);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

/// Rounds every parameter to float precision, i.e. exactly what a
/// save/load cycle yields.
NapParameters round_to_checkpoint_precision(const NapParameters& params);

}  // namespace nap

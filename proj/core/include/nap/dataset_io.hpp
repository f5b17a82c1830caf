#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nap/synth.hpp"

namespace nap {

inline constexpr std::uint16_t kDatasetFormatVersion = 1;

/// Dataset container layout (all integers little-endian):
///
///   "NAPD"                      4-byte magic
///   u16 version                 kDatasetFormatVersion
///   u32 header_length           bytes of the UTF-8 JSON header that follows
///   header                      {"recordings": [{"id", "epochs",
///                                 "modalities": [{"id", "channels": [{"id",
///                                 "predictors": [ids...]}]}]}]}
///   per recording, in header order:
///     f32 probabilities         epochs x 5 per stream, streams in header order
///     u8 stages                 epochs ground-truth stage indices
///
/// Probabilities are stored as 32-bit floats; values that are exactly
/// representable as floats round-trip bit-exactly.
std::vector<std::uint8_t> encode_dataset(std::span<const PredictionSet> sets);
std::vector<PredictionSet> decode_dataset(std::span<const std::uint8_t> bytes);

/// Writes atomically (temporary file + rename).
void write_dataset(const std::filesystem::path& path, std::span<const PredictionSet> sets);
std::vector<PredictionSet> read_dataset(const std::filesystem::path& path);

/// Reads a whole file; throws Error if it cannot be opened.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace nap

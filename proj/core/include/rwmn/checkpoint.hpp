#pragma once

// Parameter checkpoints (binary, little-endian):
//   "RWMP" | u16 version=1 | u64 config digest | u32 tensor count
//   then per tensor: u32 name length, name bytes, u32 rank,
//                    rank x u64 extents, float64 values.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rwmn/memnet.hpp"

namespace rwmn {

std::vector<std::uint8_t> encode_checkpoint(const RwmnModel& model);
// Overwrites the model's trainable tensors in place. The digest, tensor
// names and shapes must all match the model; errors are ParseError (byte
// offset) or ConfigError (digest mismatch).
void decode_checkpoint(std::span<const std::uint8_t> bytes, RwmnModel& model);

void save_checkpoint(const RwmnModel& model, const std::filesystem::path& path);
void load_checkpoint(const std::filesystem::path& path, RwmnModel& model);

}  // namespace rwmn

#pragma once

#include <filesystem>

#include "treekv/params.hpp"

namespace treekv {

/// Checkpoint container: <dir>/manifest.json (tensor name -> shape, dtype,
/// byte offset) plus <dir>/weights.bin, one contiguous little-endian IEEE-754
/// 32-bit payload. Round-trips losslessly at f32.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params);

/// Loads values into an already-structured ModelParams; names and shapes
/// must match the manifest exactly.
void load_checkpoint(const std::filesystem::path& dir, ModelParams& params);

}  // namespace treekv

#pragma once

#include <filesystem>

#include "cfun/layers.hpp"

namespace cfun::nn {

/// Writes `manifest.json` (name, shape, dtype, byte offset, length per tensor)
/// and `weights.bin` (little-endian f32, concatenated in manifest order).
void save_checkpoint(const ParamStore& params, const std::filesystem::path& dir);

/// Loads values into an already-constructed store. Every stored tensor must
/// exist with an identical shape and every store entry must be present.
void load_checkpoint(ParamStore& params, const std::filesystem::path& dir);

}  // namespace cfun::nn

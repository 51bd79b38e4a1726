// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>

#include "omni/tensor.hpp"

namespace omni {

/// Values in [0,1] map to lround(v*255) after clamping.
std::uint8_t to_byte(double v);

/// image: [3,H,W] or [1,H,W]; written as 8-bit RGB or gray PNG.
void write_png(const std::filesystem::path& file, const Tensor& image);
/// Returns [3,H,W] in [0,1] (gray inputs are expanded to RGB).
Tensor read_png(const std::filesystem::path& file);

/// Binary 8-bit PGM (P5) of a [1,H,W] map.
void write_pgm(const std::filesystem::path& file, const Tensor& map);
Tensor read_pgm(const std::filesystem::path& file);

}  // namespace omni

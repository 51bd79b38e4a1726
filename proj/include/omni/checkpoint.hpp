// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "omni/nn.hpp"

namespace omni {

/// Writes dir/manifest.txt and dir/weights.bin.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& dir);

/// Reads every entry of a checkpoint as a standalone tensor, in manifest order.
std::vector<Parameter> read_checkpoint(const std::filesystem::path& dir);

/// Overwrites values of params named in the checkpoint. Missing names or
/// shape mismatches throw unless allow_missing is set (then absent names are skipped).
void load_checkpoint(ParamStore& params, const std::filesystem::path& dir, bool allow_missing = false);

std::string sha256_hex(const void* data, std::size_t size);
/// Digest over (name, raw value bytes) of every parameter selected by the filter.
std::string params_digest(const ParamStore& params, bool frozen_only);
std::string params_digest(const ParamStore& params, const std::function<bool(const Parameter&)>& keep);

}  // namespace omni

// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container: an 8-byte little-endian header length N, N bytes of
// JSON header (name -> {dtype, shape, data_offsets}, optional
// "__metadata__" string map), then the raw little-endian payloads.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "obim/tensor.h"

namespace obim {

TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_checkpoint(const TensorMap& map);

TensorMap read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const TensorMap& map, const std::filesystem::path& path);

// Succeeds iff every map has the same tensor names and per-name shapes as the
// first one. Requires at least two maps.
void validate_compat(std::span<const TensorMap> maps);
void validate_compat(const TensorMap& a, const TensorMap& b);

// IEEE-754 binary16 -> binary32, exact for every input including subnormals.
float half_to_float(std::uint16_t h);

}  // namespace obim

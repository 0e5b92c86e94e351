// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

// Counter-based randomness: every draw is a pure function of
// (stream seed, index), so results never depend on visiting order or threads.

#pragma once

#include <cstdint>
#include <string>

#include "obim/tensor.h"

namespace obim::rng {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Per-tensor stream: global seed XOR the FNV-1a hash of the tensor name.
inline std::uint64_t tensor_stream(std::uint64_t seed, const std::string& name) {
  return seed ^ fnv1a64(name);
}

inline std::uint64_t draw(std::uint64_t stream, std::uint64_t index) {
  return mix64(mix64(stream) ^ mix64(index * 0xd1b54a32d192ed03ULL + 1));
}

// Uniform in [0, 1) with 53 random bits.
inline double uniform(std::uint64_t stream, std::uint64_t index) {
  return static_cast<double>(draw(stream, index) >> 11) * 0x1.0p-53;
}

// Uniform in [0, 1) with 24 random bits; exactly representable as float.
inline float uniform_f32(std::uint64_t stream, std::uint64_t index) {
  return static_cast<float>(draw(stream, index) >> 40) * 0x1.0p-24f;
}

}  // namespace obim::rng

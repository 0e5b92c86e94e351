// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/tensor.h"

#include <cstring>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "obim/error.h"

namespace obim {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

void check_shape(const Shape& shape, std::size_t count) {
  for (auto e : shape) {
    if (e < 0) throw Error(ErrorCode::kPrecondition, "negative extent in shape " + shape_to_string(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(count)) {
    throw Error(ErrorCode::kShapeMismatch,
                fmt::format("shape {} does not match {} elements", shape_to_string(shape), count));
  }
}

const Tensor& TensorMap::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw Error(ErrorCode::kMissingTensor, "missing tensor '" + name + "'");
  return it->second;
}

Tensor& TensorMap::at(const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end()) throw Error(ErrorCode::kMissingTensor, "missing tensor '" + name + "'");
  return it->second;
}

std::int64_t TensorMap::total_numel() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries) n += t.numel();
  return n;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

namespace {

std::uint64_t feed_u64(std::uint64_t h, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  return fnv1a64(buf, 8, h);
}

}  // namespace

// Canonical stream: for each name in order, u64 name length, name bytes,
// u64 rank, u64 extents, raw little-endian float bytes.
std::uint64_t fingerprint(const TensorMap& map) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : map.entries) {
    h = feed_u64(h, name.size());
    h = fnv1a64(name.data(), name.size(), h);
    h = feed_u64(h, t.shape.size());
    for (auto e : t.shape) h = feed_u64(h, static_cast<std::uint64_t>(e));
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) { return fmt::format("{:016x}", fp); }

std::uint64_t parse_fingerprint_hex(const std::string& hex) {
  if (hex.size() != 16) throw Error(ErrorCode::kMalformedHeader, "bad fingerprint '" + hex + "'");
  std::uint64_t v = 0;
  for (char c : hex) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw Error(ErrorCode::kMalformedHeader, "bad fingerprint '" + hex + "'");
  }
  return v;
}

bool bit_equal(const TensorMap& a, const TensorMap& b) {
  if (a.entries.size() != b.entries.size()) return false;
  auto ib = b.entries.begin();
  for (const auto& [name, ta] : a.entries) {
    const auto& [nb, tb] = *ib++;
    if (name != nb || ta.shape != tb.shape || ta.data.size() != tb.data.size()) return false;
    if (std::memcmp(ta.data.data(), tb.data.data(), ta.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace obim

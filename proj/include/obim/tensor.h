// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace obim {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);
// Throws unless every extent is non-negative and the product equals count.
void check_shape(const Shape& shape, std::size_t count);

// Dense row-major tensor. Checkpoint weights are float32 (16-bit inputs are
// widened on read); deltas and scores are held in double so that
// base + (model - base) reproduces the float32 model exactly.
template <class T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;

  BasicTensor() = default;
  BasicTensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) { check_shape(shape, data.size()); }
  static BasicTensor zeros(Shape s) {
    auto n = static_cast<std::size_t>(shape_numel(s));
    return BasicTensor(std::move(s), std::vector<T>(n, T{}));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool operator==(const BasicTensor& other) const = default;
};

using Tensor = BasicTensor<float>;
using DeltaTensor = BasicTensor<double>;

// Named tensors plus free-form string metadata. std::map keeps names in
// lexicographic order, which every serialization and merge schedule relies on.
struct TensorMap {
  std::map<std::string, Tensor> entries;
  std::map<std::string, std::string> metadata;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
  bool contains(const std::string& name) const { return entries.count(name) != 0; }

  // Throws kMissingTensor when absent.
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::int64_t total_numel() const;
};

// 64-bit FNV-1a over sorted names, shapes and raw float bytes. Metadata is
// not part of the fingerprint.
std::uint64_t fingerprint(const TensorMap& map);

std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);

std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t parse_fingerprint_hex(const std::string& hex);

// Bitwise equality of names, shapes and data (NaN-safe, distinguishes -0).
bool bit_equal(const TensorMap& a, const TensorMap& b);

}  // namespace obim

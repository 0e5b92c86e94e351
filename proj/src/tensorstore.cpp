// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/tensorstore.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <json.hpp>

#include "obim/error.h"

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

namespace obim {
namespace {

using json = nlohmann::json;

constexpr const char* kMetadataKey = "__metadata__";

struct Entry {
  std::string name;
  bool is_f16 = false;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::kMalformedHeader, "malformed header: " + what);
}

Entry parse_entry(const std::string& name, const json& v) {
  if (!v.is_object()) malformed("entry '" + name + "' is not an object");
  if (!v.contains("dtype") || !v.contains("shape") || !v.contains("data_offsets")) {
    malformed("entry '" + name + "' lacks dtype/shape/data_offsets");
  }
  Entry e;
  e.name = name;
  const auto& dtype = v["dtype"];
  if (!dtype.is_string()) malformed("dtype of '" + name + "' is not a string");
  const auto d = dtype.get<std::string>();
  if (d == "F32") {
    e.is_f16 = false;
  } else if (d == "F16") {
    e.is_f16 = true;
  } else {
    throw Error(ErrorCode::kUnsupportedDtype, fmt::format("unsupported dtype '{}' for tensor '{}'", d, name));
  }
  const auto& shape = v["shape"];
  if (!shape.is_array()) malformed("shape of '" + name + "' is not an array");
  for (const auto& x : shape) {
    if (!x.is_number_unsigned()) malformed("shape of '" + name + "' has a non-integer or negative extent");
    e.shape.push_back(x.get<std::int64_t>());
  }
  const auto& off = v["data_offsets"];
  if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned()) {
    malformed("data_offsets of '" + name + "' must be two non-negative integers");
  }
  e.begin = off[0].get<std::uint64_t>();
  e.end = off[1].get<std::uint64_t>();
  if (e.begin > e.end) malformed("data_offsets of '" + name + "' are reversed");
  return e;
}

}  // namespace

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) malformed("file shorter than the 8-byte length prefix");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) {
    malformed(fmt::format("declared header length {} exceeds file size {}", header_len, bytes.size()));
  }
  const auto* hbeg = reinterpret_cast<const char*>(bytes.data() + 8);
  json header = json::parse(hbeg, hbeg + header_len, nullptr, /*allow_exceptions=*/false);
  if (header.is_discarded()) malformed("header is not valid JSON");
  if (!header.is_object()) malformed("header is not a JSON object");

  TensorMap map;
  std::vector<Entry> entries;
  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) malformed("__metadata__ is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) malformed("__metadata__ value for '" + mk + "' is not a string");
        map.metadata[mk] = mv.get<std::string>();
      }
      continue;
    }
    entries.push_back(parse_entry(key, value));
  }

  const std::uint64_t payload_size = bytes.size() - 8 - header_len;
  const std::uint8_t* payload = bytes.data() + 8 + header_len;

  for (const auto& e : entries) {
    const auto numel = shape_numel(e.shape);
    if (numel == 0) throw Error(ErrorCode::kEmptyTensor, "tensor '" + e.name + "' has zero elements");
    const std::uint64_t expect = static_cast<std::uint64_t>(numel) * (e.is_f16 ? 2u : 4u);
    if (e.end - e.begin != expect) {
      malformed(fmt::format("tensor '{}' spans {} bytes but shape {} needs {}", e.name, e.end - e.begin,
                            shape_to_string(e.shape), expect));
    }
    if (e.end > payload_size) {
      throw Error(ErrorCode::kOutOfBounds, fmt::format("tensor '{}' ends at byte {} beyond payload size {}",
                                                       e.name, e.end, payload_size));
    }
  }

  // Offsets must tile [0, payload_size) exactly.
  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
    return a->begin != b->begin ? a->begin < b->begin : a->name < b->name;
  });
  std::uint64_t cursor = 0;
  for (const Entry* e : by_offset) {
    if (e->begin < cursor) {
      throw Error(ErrorCode::kOverlappingOffsets, fmt::format("tensor '{}' overlaps a preceding tensor", e->name));
    }
    if (e->begin > cursor) malformed(fmt::format("gap before tensor '{}' at byte {}", e->name, cursor));
    cursor = e->end;
  }
  if (cursor != payload_size) {
    malformed(fmt::format("payload has {} trailing bytes", payload_size - cursor));
  }

  for (const auto& e : entries) {
    const auto n = static_cast<std::size_t>(shape_numel(e.shape));
    std::vector<float> data(n);
    const std::uint8_t* src = payload + e.begin;
    if (e.is_f16) {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        data[i] = half_to_float(h);
      }
    } else {
      std::memcpy(data.data(), src, n * sizeof(float));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(data[i])) {
        throw Error(ErrorCode::kNonFinite, fmt::format("tensor '{}' has a non-finite element at {}", e.name, i));
      }
    }
    map.entries.emplace(e.name, Tensor(e.shape, std::move(data)));
  }
  return map;
}

std::vector<std::uint8_t> encode_checkpoint(const TensorMap& map) {
  if (map.empty()) throw Error(ErrorCode::kPrecondition, "cannot write an empty checkpoint");
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.entries) {
    if (name == kMetadataKey) throw Error(ErrorCode::kPrecondition, "tensor name '__metadata__' is reserved");
    if (t.numel() == 0) throw Error(ErrorCode::kEmptyTensor, "tensor '" + name + "' has zero elements");
    for (float v : t.data) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "tensor '" + name + "' has a non-finite element");
    }
    const std::uint64_t len = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  if (!map.metadata.empty()) header[kMetadataKey] = map.metadata;

  std::string text = header.dump();
  // Space padding keeps the payload 8-byte aligned; JSON ignores it.
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::uint8_t> out(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* dst = out.data() + 8 + text.size();
  for (const auto& [_, t] : map.entries) {
    std::memcpy(dst, t.data.data(), t.data.size() * sizeof(float));
    dst += t.data.size() * sizeof(float);
  }
  return out;
}

TensorMap read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void write_checkpoint(const TensorMap& map, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

namespace {

void check_compat(std::span<const TensorMap* const> maps) {
  if (maps.size() < 2) throw Error(ErrorCode::kPrecondition, "compatibility check needs at least two checkpoints");
  const TensorMap& ref = *maps[0];
  for (std::size_t k = 1; k < maps.size(); ++k) {
    const TensorMap& m = *maps[k];
    for (const auto& [name, t] : ref.entries) {
      auto it = m.entries.find(name);
      if (it == m.entries.end()) {
        throw Error(ErrorCode::kMissingTensor, fmt::format("checkpoint {} lacks tensor '{}'", k, name));
      }
      if (it->second.shape != t.shape) {
        throw Error(ErrorCode::kShapeMismatch,
                    fmt::format("tensor '{}' has shape {} in checkpoint 0 but {} in checkpoint {}", name,
                                shape_to_string(t.shape), shape_to_string(it->second.shape), k));
      }
    }
    for (const auto& [name, _] : m.entries) {
      if (!ref.contains(name)) {
        throw Error(ErrorCode::kMissingTensor, fmt::format("checkpoint 0 lacks tensor '{}'", name));
      }
    }
  }
}

}  // namespace

void validate_compat(std::span<const TensorMap> maps) {
  std::vector<const TensorMap*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  check_compat(ptrs);
}

void validate_compat(const TensorMap& a, const TensorMap& b) {
  const TensorMap* pair[] = {&a, &b};
  check_compat(pair);
}

}  // namespace obim

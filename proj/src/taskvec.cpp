// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/taskvec.h"

#include <cmath>

#include <fmt/format.h>

#include "obim/error.h"
#include "obim/parallel.h"
#include "obim/tensorstore.h"

namespace obim {

namespace {

constexpr const char* kBaseFingerprintKey = "base_fingerprint";

std::vector<const std::string*> names_of(const TaskVector& tv) {
  std::vector<const std::string*> names;
  names.reserve(tv.deltas.size());
  for (const auto& [name, _] : tv.deltas) names.push_back(&name);
  return names;
}

}  // namespace

const DeltaTensor& TaskVector::at(const std::string& name) const {
  auto it = deltas.find(name);
  if (it == deltas.end()) throw Error(ErrorCode::kMissingTensor, "task vector lacks tensor '" + name + "'");
  return it->second;
}

std::int64_t TaskVector::total_numel() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : deltas) n += t.numel();
  return n;
}

std::int64_t MaskTensor::count() const {
  std::int64_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

std::int64_t MergeMask::count() const {
  std::int64_t n = 0;
  for (const auto& [_, m] : masks) n += m.count();
  return n;
}

TaskVector compute_task_vector(const TensorMap& model, const TensorMap& base) {
  validate_compat(model, base);
  TaskVector tv;
  tv.base_fingerprint = fingerprint(base);
  for (const auto& [name, b] : base.entries) {
    const Tensor& m = model.at(name);
    std::vector<double> d(b.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = static_cast<double>(m.data[i]) - static_cast<double>(b.data[i]);
    }
    tv.deltas.emplace(name, DeltaTensor(b.shape, std::move(d)));
  }
  return tv;
}

TensorMap apply(const TensorMap& base, const TaskVector& delta) {
  const auto fp = fingerprint(base);
  if (delta.base_fingerprint != fp) {
    throw Error(ErrorCode::kFingerprintMismatch,
                fmt::format("task vector was built against base {} but applied to base {}",
                            fingerprint_hex(delta.base_fingerprint), fingerprint_hex(fp)));
  }
  if (delta.deltas.size() != base.entries.size()) {
    throw Error(ErrorCode::kMissingTensor, "task vector and base have different tensor sets");
  }
  TensorMap out;
  out.metadata = base.metadata;
  for (const auto& [name, b] : base.entries) {
    const DeltaTensor& d = delta.at(name);
    if (d.shape != b.shape) throw Error(ErrorCode::kShapeMismatch, "shape mismatch for '" + name + "'");
    std::vector<float> v(b.data.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<float>(static_cast<double>(b.data[i]) + d.data[i]);
    }
    out.entries.emplace(name, Tensor(b.shape, std::move(v)));
  }
  return out;
}

TaskVector scale(const TaskVector& delta, double lambda) {
  if (!std::isfinite(lambda)) throw Error(ErrorCode::kPrecondition, "scale factor must be finite");
  TaskVector out = delta;
  for (auto& [_, t] : out.deltas) {
    for (auto& v : t.data) v *= lambda;
  }
  return out;
}

void require_shared_base(std::span<const TaskVector> deltas) {
  if (deltas.empty()) throw Error(ErrorCode::kPrecondition, "at least one task vector is required");
  const TaskVector& ref = deltas[0];
  for (std::size_t k = 1; k < deltas.size(); ++k) {
    const TaskVector& tv = deltas[k];
    if (tv.base_fingerprint != ref.base_fingerprint) {
      throw Error(ErrorCode::kFingerprintMismatch, fmt::format("task vector {} was built against a different base", k));
    }
    if (tv.deltas.size() != ref.deltas.size()) {
      throw Error(ErrorCode::kMissingTensor, fmt::format("task vector {} has a different tensor set", k));
    }
    for (const auto& [name, t] : ref.deltas) {
      if (tv.at(name).shape != t.shape) {
        throw Error(ErrorCode::kShapeMismatch, fmt::format("task vector {} has a different shape for '{}'", k, name));
      }
    }
  }
}

void require_aligned(const TaskVector& delta, const MergeMask& mask) {
  if (mask.masks.size() != delta.deltas.size()) {
    throw Error(ErrorCode::kMissingTensor, "mask and task vector cover different tensor sets");
  }
  for (const auto& [name, t] : delta.deltas) {
    auto it = mask.masks.find(name);
    if (it == mask.masks.end()) throw Error(ErrorCode::kMissingTensor, "mask lacks tensor '" + name + "'");
    if (it->second.shape != t.shape || it->second.bits.size() != t.data.size()) {
      throw Error(ErrorCode::kShapeMismatch, "mask shape differs for '" + name + "'");
    }
  }
}

MergeMask empty_mask(const TaskVector& like) {
  MergeMask m;
  for (const auto& [name, t] : like.deltas) {
    m.masks.emplace(name, MaskTensor{t.shape, std::vector<std::uint8_t>(t.data.size(), 0)});
  }
  return m;
}

int check_disjoint(std::span<const MergeMask> masks) {
  if (masks.empty()) return 0;
  int worst = 0;
  for (const auto& [name, ref] : masks[0].masks) {
    for (std::size_t i = 0; i < ref.bits.size(); ++i) {
      int sum = 0;
      for (const auto& m : masks) {
        const auto& bits = m.masks.at(name).bits;
        if (bits.size() != ref.bits.size()) throw Error(ErrorCode::kShapeMismatch, "mask shape differs for '" + name + "'");
        sum += bits[i];
      }
      if (sum > 1) {
        throw Error(ErrorCode::kDisjointness,
                    fmt::format("coordinate {} of '{}' is selected by {} masks", i, name, sum));
      }
      worst = std::max(worst, sum);
    }
  }
  return worst;
}

TaskVector apply_mask(const TaskVector& delta, const MergeMask& mask) {
  require_aligned(delta, mask);
  TaskVector out = delta;
  for (auto& [name, t] : out.deltas) {
    const auto& bits = mask.masks.at(name).bits;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (!bits[i]) t.data[i] = 0.0;
    }
  }
  return out;
}

TaskVector sum_masked(std::span<const TaskVector> deltas, std::span<const MergeMask> masks) {
  if (deltas.size() != masks.size()) {
    throw Error(ErrorCode::kPrecondition,
                fmt::format("{} task vectors but {} masks", deltas.size(), masks.size()));
  }
  require_shared_base(deltas);
  for (std::size_t k = 0; k < deltas.size(); ++k) require_aligned(deltas[k], masks[k]);
  check_disjoint(masks);

  TaskVector out;
  out.base_fingerprint = deltas[0].base_fingerprint;
  const auto names = names_of(deltas[0]);
  std::vector<DeltaTensor> results(names.size());
  parallel_for(names.size(), [&](std::size_t t) {
    const std::string& name = *names[t];
    DeltaTensor acc = DeltaTensor::zeros(deltas[0].at(name).shape);
    for (std::size_t k = 0; k < deltas.size(); ++k) {
      const auto& d = deltas[k].at(name).data;
      const auto& bits = masks[k].masks.at(name).bits;
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (bits[i]) acc.data[i] = d[i];
      }
    }
    results[t] = std::move(acc);
  });
  for (std::size_t t = 0; t < names.size(); ++t) out.deltas.emplace(*names[t], std::move(results[t]));
  return out;
}

void write_task_vector(const TaskVector& tv, const std::filesystem::path& path) {
  TensorMap m;
  for (const auto& [name, t] : tv.deltas) {
    std::vector<float> v(t.data.begin(), t.data.end());
    m.entries.emplace(name, Tensor(t.shape, std::move(v)));
  }
  m.metadata[kBaseFingerprintKey] = fingerprint_hex(tv.base_fingerprint);
  write_checkpoint(m, path);
}

TaskVector read_task_vector(const std::filesystem::path& path) {
  TensorMap m = read_checkpoint(path);
  auto it = m.metadata.find(kBaseFingerprintKey);
  if (it == m.metadata.end()) {
    throw Error(ErrorCode::kMalformedHeader, path.string() + ": task vector lacks base_fingerprint metadata");
  }
  TaskVector tv;
  tv.base_fingerprint = parse_fingerprint_hex(it->second);
  for (auto& [name, t] : m.entries) {
    tv.deltas.emplace(name, DeltaTensor(t.shape, std::vector<double>(t.data.begin(), t.data.end())));
  }
  return tv;
}

TensorMap mask_to_tensors(const MergeMask& mask) {
  TensorMap m;
  for (const auto& [name, mt] : mask.masks) {
    m.entries.emplace(name, Tensor(mt.shape, std::vector<float>(mt.bits.begin(), mt.bits.end())));
  }
  return m;
}

MergeMask mask_from_tensors(const TensorMap& map) {
  MergeMask mask;
  for (const auto& [name, t] : map.entries) {
    MaskTensor mt{t.shape, std::vector<std::uint8_t>(t.data.size())};
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (t.data[i] != 0.0f && t.data[i] != 1.0f) {
        throw Error(ErrorCode::kPrecondition, fmt::format("mask '{}' has non-binary value at {}", name, i));
      }
      mt.bits[i] = t.data[i] == 1.0f ? 1 : 0;
    }
    mask.masks.emplace(name, std::move(mt));
  }
  return mask;
}

}  // namespace obim

// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "obim/tensor.h"

namespace obim {

// delta = finetuned - base, bound to the fingerprint of the base it was
// computed against.
struct TaskVector {
  std::uint64_t base_fingerprint = 0;
  std::map<std::string, DeltaTensor> deltas;

  const DeltaTensor& at(const std::string& name) const;
  std::int64_t total_numel() const;
};

// Binary selection per tensor, shape-aligned with a TaskVector.
struct MaskTensor {
  Shape shape;
  std::vector<std::uint8_t> bits;

  std::int64_t count() const;
  bool operator==(const MaskTensor&) const = default;
};

struct MergeMask {
  std::map<std::string, MaskTensor> masks;

  std::int64_t count() const;
  bool operator==(const MergeMask&) const = default;
};

// Deltas are held in double. For float inputs whose exponents differ by at
// most 29 (or where either is zero) the difference is exact, so
// apply(base, compute_task_vector(m, base)) reproduces m bit for bit.
TaskVector compute_task_vector(const TensorMap& model, const TensorMap& base);
TensorMap apply(const TensorMap& base, const TaskVector& delta);
TaskVector scale(const TaskVector& delta, double lambda);

// Masked sum of deltas. Per coordinate at most one mask may be set; the
// result holds that model's delta, or zero where no mask is set.
TaskVector sum_masked(std::span<const TaskVector> deltas, std::span<const MergeMask> masks);

// All-zero mask covering every tensor of `like`.
MergeMask empty_mask(const TaskVector& like);

// Throws kDisjointness if any coordinate is selected by more than one mask;
// returns the per-coordinate maximum of the mask sum (0 or 1).
int check_disjoint(std::span<const MergeMask> masks);

// Elementwise delta * mask (mask bits 0/1).
TaskVector apply_mask(const TaskVector& delta, const MergeMask& mask);

// Throws kFingerprintMismatch unless all deltas share one base fingerprint,
// kMissingTensor / kShapeMismatch unless they share one name/shape universe.
void require_shared_base(std::span<const TaskVector> deltas);

// Throws unless every mask covers exactly the tensors and shapes of delta.
void require_aligned(const TaskVector& delta, const MergeMask& mask);

// Persistence in the checkpoint container. Task vectors carry
// "base_fingerprint" metadata and are narrowed to float32 on write; masks are
// stored as 0/1 float32 tensors.
void write_task_vector(const TaskVector& tv, const std::filesystem::path& path);
TaskVector read_task_vector(const std::filesystem::path& path);
TensorMap mask_to_tensors(const MergeMask& mask);
MergeMask mask_from_tensors(const TensorMap& map);

}  // namespace obim

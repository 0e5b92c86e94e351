// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "obim/calib.h"
#include "obim/taskvec.h"

namespace obim {

enum class ScorerTag { kObm, kMagnitude, kRandom };

std::string_view scorer_name(ScorerTag tag);

// Non-negative per-coordinate scores, shape-aligned with a TaskVector.
struct SaliencyMap {
  std::map<std::string, DeltaTensor> scores;
  ScorerTag tag = ScorerTag::kMagnitude;

  const DeltaTensor& at(const std::string& name) const;
};

// Layer-wise OBM saliency. For the weight of a linear layer,
// s_ij = 0.5 * h_j * delta_ij^2 with h the diagonal Hessian of that layer.
// Every other tensor (biases, ...) gets i.i.d. uniform [0, 1) scores from a
// stream keyed by (seed, tensor name), which makes trimming it random.
SaliencyMap obm_scores(const TaskVector& delta, const ModelSpec& spec, const HessianDiag& h, std::uint64_t seed);

// |delta| for every tensor.
SaliencyMap magnitude_scores(const TaskVector& delta);

// |delta| replaced by its rank across all tensors of the model, scaled to
// [0, 1]. Within one tensor the order equals the order of |delta|.
SaliencyMap global_rank_magnitude_scores(const TaskVector& delta);

// Uniform [0, 1) scores for every tensor.
SaliencyMap random_scores(const TaskVector& delta, std::uint64_t seed);

// Base against which a retention ratio is converted into a count.
enum class RatioBasis {
  kTotal,      // floor(ratio * d), d = tensor size
  kRemaining,  // floor(ratio * (d - |exclude|))
};

// Number of coordinates a ratio keeps out of n. A 1e-9 slack absorbs binary
// representation error (0.29 * 100 = 28.999999999999996).
std::int64_t retained_count(double ratio, std::int64_t n);

// Top-scoring selection on one flat tensor. Excluded coordinates are never
// picked; ties go to the lower flat index.
std::vector<std::uint8_t> select_top(std::span<const double> scores, double ratio,
                                     std::span<const std::uint8_t> exclude = {},
                                     RatioBasis basis = RatioBasis::kTotal);

MergeMask trim_topk(const SaliencyMap& scores, double ratio, const MergeMask* exclude = nullptr,
                    RatioBasis basis = RatioBasis::kTotal);

// Scores persist as float32 tensors with "scorer_tag" metadata.
void write_saliency(const SaliencyMap& s, const std::filesystem::path& path);
SaliencyMap read_saliency(const std::filesystem::path& path);

}  // namespace obim

// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "obim/calib.h"
#include "obim/saliency.h"
#include "obim/taskvec.h"

namespace obim {

enum class OrderPolicy { kRotation, kFixed };

// Visiting order of model indices (0-based) for iterative merging.
struct MergeOrder {
  std::vector<int> order;
  OrderPolicy policy = OrderPolicy::kRotation;

  bool operator==(const MergeOrder&) const = default;
};

MergeOrder identity_order(int k, OrderPolicy policy = OrderPolicy::kRotation);
// Fixed orders that put model `model` first / last, the rest ascending.
MergeOrder order_first(int k, int model);
MergeOrder order_last(int k, int model);

// [o1, o2, ..., oK] -> [o2, ..., oK, o1]. Requires the rotation policy.
MergeOrder rotate_order(const MergeOrder& order);

// Order used for each of n tensors (lexicographic tensor order): rotation
// advances once per tensor, fixed repeats the initial order.
std::vector<std::vector<int>> order_schedule(const MergeOrder& order, std::size_t n_tensors);

enum class Method { kTaskArithmetic, kTies, kDare, kTiesObm, kTiesIm, kObim };

std::string_view method_name(Method m);
// Accepts TA, TIES, DARE, TIES+OBM, TIES+IM, OBIM (case-insensitive). DELLA,
// TALL-Mask and PCB raise kUnavailableMethod; anything else kInvalidConfig.
Method parse_method(std::string_view name);
bool uses_iterative_merging(Method m);
bool uses_obm(Method m);

struct MergePlan {
  Method method = Method::kObim;
  std::vector<double> ratios;  // n_k per model
  double lambda = 1.0;         // task arithmetic scale
  double drop_p = 0.0;         // DARE drop probability
  MergeOrder order;
  std::uint64_t seed = 0;
  RatioBasis ratio_basis = RatioBasis::kTotal;
  HessianPolicy hessian_policy = HessianPolicy::kMeanOfSquares;
  // TIES+IM: rank-normalize |delta| across all tensors instead of per tensor.
  bool global_rank_magnitude = false;
};

// Checks the plan against k models; throws kInvalidConfig / kRatioSum naming
// the offending field.
void validate_plan(const MergePlan& plan, std::size_t k);

struct IterativeMergeResult {
  TensorMap merged;
  std::vector<MergeMask> masks;  // one per model, pairwise disjoint
};

// Per tensor: start from an empty merged mask, visit models in the scheduled
// order, let each take its top n_k of scores among coordinates not yet taken,
// then merge base + sum_k delta_k * mask_k.
IterativeMergeResult iterative_merge(const TensorMap& base, std::span<const TaskVector> deltas,
                                     std::span<const SaliencyMap> saliencies, const MergePlan& plan);

// TIES sign election: per coordinate elect sign(sum_k delta_k) (+ on an exact
// zero sum) and average the nonzero deltas carrying the elected sign.
TaskVector disjoint_mean(std::span<const TaskVector> deltas);

// Zeroes each coordinate with probability drop_p and rescales survivors by
// 1 / (1 - drop_p). Draws depend only on (seed, tensor name, flat index).
TaskVector dare_drop_rescale(const TaskVector& delta, double drop_p, std::uint64_t seed);
MergeMask dare_keep_mask(const TaskVector& delta, double drop_p, std::uint64_t seed);

// base + lambda * sum_k delta_k
TensorMap task_arithmetic(const TensorMap& base, std::span<const TaskVector> deltas, double lambda);

struct MergeReport {
  Method method = Method::kObim;
  std::vector<std::int64_t> kept;  // coordinates contributed per model
  std::int64_t coordinates = 0;
  int max_mask_sum = 0;                  // max over coordinates of sum_k mask_k
  std::int64_t overlap_coordinates = 0;  // coordinates kept by two or more models
};

struct MergeOutcome {
  TensorMap merged;
  std::vector<TaskVector> deltas;
  TaskVector merged_delta;
  std::vector<MergeMask> masks;  // empty for TA
  MergeReport report;
};

// Dispatches a plan. `stats` holds either one ActivationStats per model or a
// single one shared by all; it is only consulted by OBM methods, which also
// need `spec` to tell linear weights apart.
MergeOutcome run_merge(const MergePlan& plan, const TensorMap& base, std::span<const TensorMap> models,
                       std::span<const ActivationStats> stats = {}, const ModelSpec* spec = nullptr);

// Per-model seed for random streams (OBM non-linear scores, DARE drops).
std::uint64_t model_seed(std::uint64_t seed, std::size_t k);

}  // namespace obim

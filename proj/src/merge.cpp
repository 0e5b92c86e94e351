// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/merge.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "obim/error.h"
#include "obim/parallel.h"
#include "obim/rng.h"
#include "obim/tensorstore.h"

namespace obim {

namespace {

constexpr double kRatioSumSlack = 1e-9;

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

bool is_permutation_of_range(const std::vector<int>& order) {
  std::vector<int> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) return false;
  }
  return true;
}

std::vector<const std::string*> tensor_names(const TaskVector& tv) {
  std::vector<const std::string*> names;
  for (const auto& [name, _] : tv.deltas) names.push_back(&name);
  return names;
}

// Coordinates where at least two masks are set.
std::int64_t overlap_count(std::span<const MergeMask> masks) {
  if (masks.empty()) return 0;
  std::int64_t n = 0;
  for (const auto& [name, ref] : masks[0].masks) {
    for (std::size_t i = 0; i < ref.bits.size(); ++i) {
      int sum = 0;
      for (const auto& m : masks) sum += m.masks.at(name).bits[i];
      if (sum > 1) ++n;
    }
  }
  return n;
}

int max_mask_sum(std::span<const MergeMask> masks) {
  if (masks.empty()) return 0;
  int worst = 0;
  for (const auto& [name, ref] : masks[0].masks) {
    for (std::size_t i = 0; i < ref.bits.size(); ++i) {
      int sum = 0;
      for (const auto& m : masks) sum += m.masks.at(name).bits[i];
      worst = std::max(worst, sum);
    }
  }
  return worst;
}

}  // namespace

MergeOrder identity_order(int k, OrderPolicy policy) {
  MergeOrder o;
  o.order.resize(static_cast<std::size_t>(k));
  std::iota(o.order.begin(), o.order.end(), 0);
  o.policy = policy;
  return o;
}

MergeOrder order_first(int k, int model) {
  if (model < 0 || model >= k) throw Error(ErrorCode::kInvalidConfig, fmt::format("model index {} out of range", model));
  MergeOrder o{{model}, OrderPolicy::kFixed};
  for (int i = 0; i < k; ++i) {
    if (i != model) o.order.push_back(i);
  }
  return o;
}

MergeOrder order_last(int k, int model) {
  if (model < 0 || model >= k) throw Error(ErrorCode::kInvalidConfig, fmt::format("model index {} out of range", model));
  MergeOrder o{{}, OrderPolicy::kFixed};
  for (int i = 0; i < k; ++i) {
    if (i != model) o.order.push_back(i);
  }
  o.order.push_back(model);
  return o;
}

MergeOrder rotate_order(const MergeOrder& order) {
  if (order.policy != OrderPolicy::kRotation) {
    throw Error(ErrorCode::kPrecondition, "rotate_order requires the rotation policy");
  }
  MergeOrder out = order;
  if (!out.order.empty()) std::rotate(out.order.begin(), out.order.begin() + 1, out.order.end());
  return out;
}

std::vector<std::vector<int>> order_schedule(const MergeOrder& order, std::size_t n_tensors) {
  std::vector<std::vector<int>> schedule;
  schedule.reserve(n_tensors);
  MergeOrder current = order;
  for (std::size_t t = 0; t < n_tensors; ++t) {
    schedule.push_back(current.order);
    if (order.policy == OrderPolicy::kRotation) current = rotate_order(current);
  }
  return schedule;
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kTaskArithmetic: return "TA";
    case Method::kTies: return "TIES";
    case Method::kDare: return "DARE";
    case Method::kTiesObm: return "TIES+OBM";
    case Method::kTiesIm: return "TIES+IM";
    case Method::kObim: return "OBIM";
  }
  return "OBIM";
}

Method parse_method(std::string_view name) {
  const std::string u = upper(name);
  if (u == "TA") return Method::kTaskArithmetic;
  if (u == "TIES") return Method::kTies;
  if (u == "DARE") return Method::kDare;
  if (u == "TIES+OBM") return Method::kTiesObm;
  if (u == "TIES+IM") return Method::kTiesIm;
  if (u == "OBIM") return Method::kObim;
  if (u == "DELLA") {
    throw Error(ErrorCode::kUnavailableMethod,
                "DELLA is unavailable: its magnitude-based dropout probabilities are not specified here");
  }
  if (u == "TALL-MASK" || u == "TALLMASK" || u == "TALL_MASK") {
    throw Error(ErrorCode::kUnavailableMethod,
                "TALL-Mask is unavailable: its mask threshold rule is not specified here");
  }
  if (u == "PCB") {
    throw Error(ErrorCode::kUnavailableMethod, "PCB is unavailable: its balancing rule is not specified here");
  }
  throw Error(ErrorCode::kInvalidConfig, fmt::format("unknown method '{}'", name));
}

bool uses_iterative_merging(Method m) { return m == Method::kTiesIm || m == Method::kObim; }
bool uses_obm(Method m) { return m == Method::kTiesObm || m == Method::kObim; }

std::uint64_t model_seed(std::uint64_t seed, std::size_t k) { return seed + static_cast<std::uint64_t>(k); }

void validate_plan(const MergePlan& plan, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidConfig, "models: at least one model is required");
  const bool needs_ratios = plan.method != Method::kTaskArithmetic && plan.method != Method::kDare;
  if (needs_ratios && plan.ratios.size() != k) {
    throw Error(ErrorCode::kInvalidConfig,
                fmt::format("ratios: {} ratios given for {} models", plan.ratios.size(), k));
  }
  for (std::size_t i = 0; i < plan.ratios.size(); ++i) {
    const double r = plan.ratios[i];
    if (!(r >= 0.0 && r <= 1.0)) {
      throw Error(ErrorCode::kInvalidConfig, fmt::format("models[{}].ratio: {} is outside [0, 1]", i, r));
    }
  }
  if (uses_iterative_merging(plan.method)) {
    const double sum = std::accumulate(plan.ratios.begin(), plan.ratios.end(), 0.0);
    if (sum > 1.0 + kRatioSumSlack) {
      throw Error(ErrorCode::kRatioSum,
                  fmt::format("ratios: sum {} exceeds 1 for {}", sum, method_name(plan.method)));
    }
    if (plan.order.order.size() != k || !is_permutation_of_range(plan.order.order)) {
      throw Error(ErrorCode::kInvalidConfig,
                  fmt::format("order.sequence: must be a permutation of 0..{}", static_cast<int>(k) - 1));
    }
  }
  if (!(plan.drop_p >= 0.0 && plan.drop_p < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, fmt::format("drop_p: {} is outside [0, 1)", plan.drop_p));
  }
  if (!std::isfinite(plan.lambda)) throw Error(ErrorCode::kInvalidConfig, "lambda: must be finite");
}

IterativeMergeResult iterative_merge(const TensorMap& base, std::span<const TaskVector> deltas,
                                     std::span<const SaliencyMap> saliencies, const MergePlan& plan) {
  const std::size_t k = deltas.size();
  if (saliencies.size() != k) {
    throw Error(ErrorCode::kPrecondition, fmt::format("{} task vectors but {} saliency maps", k, saliencies.size()));
  }
  if (plan.ratios.size() != k) {
    throw Error(ErrorCode::kInvalidConfig, fmt::format("ratios: {} ratios given for {} models", plan.ratios.size(), k));
  }
  const double sum = std::accumulate(plan.ratios.begin(), plan.ratios.end(), 0.0);
  if (sum > 1.0 + kRatioSumSlack) {
    throw Error(ErrorCode::kRatioSum, fmt::format("ratios: sum {} exceeds 1", sum));
  }
  if (plan.order.order.size() != k || !is_permutation_of_range(plan.order.order)) {
    throw Error(ErrorCode::kInvalidConfig, "order.sequence: must be a permutation of the model indices");
  }
  require_shared_base(deltas);
  const auto names = tensor_names(deltas[0]);
  for (std::size_t m = 0; m < k; ++m) {
    for (const auto* name : names) {
      if (saliencies[m].at(*name).shape != deltas[m].at(*name).shape) {
        throw Error(ErrorCode::kShapeMismatch, fmt::format("saliency {} is misaligned for '{}'", m, *name));
      }
    }
    if (saliencies[m].scores.size() != names.size()) {
      throw Error(ErrorCode::kMissingTensor, fmt::format("saliency {} covers a different tensor set", m));
    }
  }

  // The schedule is computed serially up front; tensors then merge independently.
  const auto schedule = order_schedule(plan.order, names.size());
  std::vector<std::vector<std::vector<std::uint8_t>>> picks(names.size(), std::vector<std::vector<std::uint8_t>>(k));
  parallel_for(names.size(), [&](std::size_t t) {
    const std::string& name = *names[t];
    std::vector<std::uint8_t> taken(static_cast<std::size_t>(deltas[0].at(name).numel()), 0);
    for (int m : schedule[t]) {
      auto sel = select_top(saliencies[m].at(name).data, plan.ratios[m], taken, plan.ratio_basis);
      for (std::size_t i = 0; i < sel.size(); ++i) taken[i] |= sel[i];
      picks[t][m] = std::move(sel);
    }
  });

  IterativeMergeResult result;
  result.masks.resize(k);
  for (std::size_t t = 0; t < names.size(); ++t) {
    const Shape& shape = deltas[0].at(*names[t]).shape;
    for (std::size_t m = 0; m < k; ++m) {
      result.masks[m].masks.emplace(*names[t], MaskTensor{shape, std::move(picks[t][m])});
    }
  }
  result.merged = apply(base, sum_masked(deltas, result.masks));
  return result;
}

TaskVector disjoint_mean(std::span<const TaskVector> deltas) {
  require_shared_base(deltas);
  const auto names = tensor_names(deltas[0]);
  std::vector<DeltaTensor> out(names.size());
  parallel_for(names.size(), [&](std::size_t t) {
    const std::string& name = *names[t];
    DeltaTensor r = DeltaTensor::zeros(deltas[0].at(name).shape);
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      double total = 0.0;
      for (const auto& d : deltas) total += d.at(name).data[i];
      const bool positive = total >= 0.0;
      double acc = 0.0;
      int count = 0;
      for (const auto& d : deltas) {
        const double v = d.at(name).data[i];
        if (v != 0.0 && (v > 0.0) == positive) {
          acc += v;
          ++count;
        }
      }
      r.data[i] = count > 0 ? acc / count : 0.0;
    }
    out[t] = std::move(r);
  });
  TaskVector tv;
  tv.base_fingerprint = deltas[0].base_fingerprint;
  for (std::size_t t = 0; t < names.size(); ++t) tv.deltas.emplace(*names[t], std::move(out[t]));
  return tv;
}

MergeMask dare_keep_mask(const TaskVector& delta, double drop_p, std::uint64_t seed) {
  if (!(drop_p >= 0.0 && drop_p < 1.0)) {
    throw Error(ErrorCode::kPrecondition, fmt::format("drop_p {} is outside [0, 1)", drop_p));
  }
  MergeMask mask;
  for (const auto& [name, d] : delta.deltas) {
    const auto stream = rng::tensor_stream(seed, name);
    MaskTensor mt{d.shape, std::vector<std::uint8_t>(d.data.size())};
    for (std::size_t i = 0; i < d.data.size(); ++i) mt.bits[i] = rng::uniform(stream, i) >= drop_p ? 1 : 0;
    mask.masks.emplace(name, std::move(mt));
  }
  return mask;
}

TaskVector dare_drop_rescale(const TaskVector& delta, double drop_p, std::uint64_t seed) {
  const MergeMask keep = dare_keep_mask(delta, drop_p, seed);
  const double rescale = 1.0 / (1.0 - drop_p);
  TaskVector out = delta;
  for (auto& [name, d] : out.deltas) {
    const auto& bits = keep.masks.at(name).bits;
    for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = bits[i] ? d.data[i] * rescale : 0.0;
  }
  return out;
}

TensorMap task_arithmetic(const TensorMap& base, std::span<const TaskVector> deltas, double lambda) {
  require_shared_base(deltas);
  TaskVector total;
  total.base_fingerprint = deltas[0].base_fingerprint;
  for (const auto& [name, d0] : deltas[0].deltas) {
    DeltaTensor acc = DeltaTensor::zeros(d0.shape);
    for (const auto& d : deltas) {
      const auto& v = d.at(name).data;
      for (std::size_t i = 0; i < v.size(); ++i) acc.data[i] += v[i];
    }
    total.deltas.emplace(name, std::move(acc));
  }
  return apply(base, scale(total, lambda));
}

MergeOutcome run_merge(const MergePlan& plan, const TensorMap& base, std::span<const TensorMap> models,
                       std::span<const ActivationStats> stats, const ModelSpec* spec) {
  const std::size_t k = models.size();
  validate_plan(plan, k);
  for (std::size_t m = 0; m < k; ++m) {
    try {
      validate_compat(base, models[m]);
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("models[{}]: {}", m, e.what()));
    }
  }

  MergeOutcome out;
  out.report.method = plan.method;
  out.deltas.reserve(k);
  for (const auto& model : models) out.deltas.push_back(compute_task_vector(model, base));
  out.report.coordinates = base.total_numel();

  auto saliency_for = [&](std::size_t m) -> SaliencyMap {
    if (uses_obm(plan.method)) {
      if (!spec) throw Error(ErrorCode::kMissingStats, "OBM methods need the model spec");
      if (stats.empty()) {
        throw Error(ErrorCode::kMissingStats, fmt::format("{} needs calibration stats", method_name(plan.method)));
      }
      if (stats.size() != 1 && stats.size() != k) {
        throw Error(ErrorCode::kMissingStats, fmt::format("{} stats given for {} models", stats.size(), k));
      }
      const ActivationStats& s = stats.size() == 1 ? stats[0] : stats[m];
      return obm_scores(out.deltas[m], *spec, hessian_diag(s, plan.hessian_policy), model_seed(plan.seed, m));
    }
    if (plan.method == Method::kTiesIm && plan.global_rank_magnitude) {
      return global_rank_magnitude_scores(out.deltas[m]);
    }
    return magnitude_scores(out.deltas[m]);
  };

  switch (plan.method) {
    case Method::kTaskArithmetic: {
      out.merged = task_arithmetic(base, out.deltas, plan.lambda);
      out.report.kept.assign(k, out.report.coordinates);
      out.report.max_mask_sum = static_cast<int>(k);
      out.report.overlap_coordinates = k > 1 ? out.report.coordinates : 0;
      break;
    }
    case Method::kTies:
    case Method::kTiesObm: {
      std::vector<TaskVector> trimmed;
      for (std::size_t m = 0; m < k; ++m) {
        out.masks.push_back(trim_topk(saliency_for(m), plan.ratios[m]));
        trimmed.push_back(apply_mask(out.deltas[m], out.masks.back()));
      }
      out.merged = apply(base, disjoint_mean(trimmed));
      break;
    }
    case Method::kDare: {
      std::vector<TaskVector> dropped;
      for (std::size_t m = 0; m < k; ++m) {
        out.masks.push_back(dare_keep_mask(out.deltas[m], plan.drop_p, model_seed(plan.seed, m)));
        dropped.push_back(dare_drop_rescale(out.deltas[m], plan.drop_p, model_seed(plan.seed, m)));
      }
      out.merged = apply(base, disjoint_mean(dropped));
      break;
    }
    case Method::kTiesIm:
    case Method::kObim: {
      std::vector<SaliencyMap> sal;
      for (std::size_t m = 0; m < k; ++m) sal.push_back(saliency_for(m));
      auto im = iterative_merge(base, out.deltas, sal, plan);
      out.merged = std::move(im.merged);
      out.masks = std::move(im.masks);
      break;
    }
  }
  if (!out.masks.empty()) {
    for (const auto& m : out.masks) out.report.kept.push_back(m.count());
    out.report.max_mask_sum = max_mask_sum(out.masks);
    out.report.overlap_coordinates = overlap_count(out.masks);
  }
  out.merged_delta = compute_task_vector(out.merged, base);
  return out;
}

}  // namespace obim

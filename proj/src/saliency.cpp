// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/saliency.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "obim/error.h"
#include "obim/parallel.h"
#include "obim/rng.h"
#include "obim/tensorstore.h"

namespace obim {

namespace {

constexpr const char* kScorerTagKey = "scorer_tag";

DeltaTensor uniform_tensor(const Shape& shape, std::uint64_t seed, const std::string& name) {
  DeltaTensor t = DeltaTensor::zeros(shape);
  const auto stream = rng::tensor_stream(seed, name);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = rng::uniform(stream, i);
  return t;
}

}  // namespace

std::string_view scorer_name(ScorerTag tag) {
  switch (tag) {
    case ScorerTag::kObm: return "obm";
    case ScorerTag::kMagnitude: return "magnitude";
    case ScorerTag::kRandom: return "random";
  }
  return "magnitude";
}

const DeltaTensor& SaliencyMap::at(const std::string& name) const {
  auto it = scores.find(name);
  if (it == scores.end()) throw Error(ErrorCode::kMissingTensor, "saliency map lacks tensor '" + name + "'");
  return it->second;
}

SaliencyMap obm_scores(const TaskVector& delta, const ModelSpec& spec, const HessianDiag& h, std::uint64_t seed) {
  for (const auto& layer : spec.layers) {
    if (!delta.deltas.count(layer.weight_name)) {
      throw Error(ErrorCode::kMissingTensor, "task vector lacks linear weight '" + layer.weight_name + "'");
    }
    if (!h.count(layer.weight_name)) {
      throw Error(ErrorCode::kMissingHessian, "no Hessian diagonal for linear weight '" + layer.weight_name + "'");
    }
  }
  std::vector<std::pair<const std::string*, const DeltaTensor*>> items;
  for (const auto& [name, t] : delta.deltas) items.emplace_back(&name, &t);
  std::vector<DeltaTensor> out(items.size());

  parallel_for(items.size(), [&](std::size_t k) {
    const std::string& name = *items[k].first;
    const DeltaTensor& d = *items[k].second;
    if (!is_linear_weight(spec, name)) {
      out[k] = uniform_tensor(d.shape, seed, name);
      return;
    }
    const auto& hd = h.at(name);
    if (d.shape.size() != 2 || static_cast<std::size_t>(d.shape[1]) != hd.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  fmt::format("Hessian diagonal for '{}' has {} entries but the weight has shape {}", name,
                              hd.size(), shape_to_string(d.shape)));
    }
    const auto cols = static_cast<std::size_t>(d.shape[1]);
    DeltaTensor s = DeltaTensor::zeros(d.shape);
    for (std::size_t i = 0; i < d.data.size(); ++i) {
      const double v = d.data[i];
      s.data[i] = 0.5 * hd[i % cols] * v * v;
    }
    out[k] = std::move(s);
  });

  SaliencyMap map;
  map.tag = ScorerTag::kObm;
  for (std::size_t k = 0; k < items.size(); ++k) map.scores.emplace(*items[k].first, std::move(out[k]));
  return map;
}

SaliencyMap magnitude_scores(const TaskVector& delta) {
  SaliencyMap map;
  map.tag = ScorerTag::kMagnitude;
  for (const auto& [name, d] : delta.deltas) {
    DeltaTensor s = d;
    for (auto& v : s.data) v = std::fabs(v);
    map.scores.emplace(name, std::move(s));
  }
  return map;
}

SaliencyMap global_rank_magnitude_scores(const TaskVector& delta) {
  struct Slot {
    double mag;
    std::size_t tensor;
    std::size_t index;
  };
  std::vector<Slot> all;
  std::vector<const std::string*> names;
  for (const auto& [name, d] : delta.deltas) {
    for (std::size_t i = 0; i < d.data.size(); ++i) all.push_back({std::fabs(d.data[i]), names.size(), i});
    names.push_back(&name);
  }
  std::sort(all.begin(), all.end(), [](const Slot& a, const Slot& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  });
  SaliencyMap map;
  map.tag = ScorerTag::kMagnitude;
  for (const auto& [name, d] : delta.deltas) map.scores.emplace(name, DeltaTensor::zeros(d.shape));
  const double denom = all.size() > 1 ? static_cast<double>(all.size() - 1) : 1.0;
  // Equal magnitudes share the rank of their first occurrence.
  std::size_t rank = 0;
  for (std::size_t r = 0; r < all.size(); ++r) {
    if (r == 0 || all[r].mag != all[r - 1].mag) rank = r;
    map.scores.at(*names[all[r].tensor]).data[all[r].index] = static_cast<double>(rank) / denom;
  }
  return map;
}

SaliencyMap random_scores(const TaskVector& delta, std::uint64_t seed) {
  SaliencyMap map;
  map.tag = ScorerTag::kRandom;
  for (const auto& [name, d] : delta.deltas) map.scores.emplace(name, uniform_tensor(d.shape, seed, name));
  return map;
}

std::int64_t retained_count(double ratio, std::int64_t n) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw Error(ErrorCode::kPrecondition, fmt::format("retention ratio {} is outside [0, 1]", ratio));
  }
  auto r = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  return std::clamp<std::int64_t>(r, 0, n);
}

std::vector<std::uint8_t> select_top(std::span<const double> scores, double ratio,
                                     std::span<const std::uint8_t> exclude, RatioBasis basis) {
  const auto d = static_cast<std::int64_t>(scores.size());
  if (!exclude.empty() && exclude.size() != scores.size()) {
    throw Error(ErrorCode::kShapeMismatch, "exclusion mask size differs from score size");
  }
  std::vector<std::uint32_t> pool;
  pool.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (exclude.empty() || !exclude[i]) pool.push_back(static_cast<std::uint32_t>(i));
  }
  const auto available = static_cast<std::int64_t>(pool.size());
  std::int64_t r = retained_count(ratio, basis == RatioBasis::kTotal ? d : available);
  r = std::min(r, available);

  std::vector<std::uint8_t> mask(scores.size(), 0);
  if (r == 0) return mask;
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (r < available) {
    std::nth_element(pool.begin(), pool.begin() + (r - 1), pool.end(), better);
  }
  for (std::int64_t k = 0; k < r; ++k) mask[pool[static_cast<std::size_t>(k)]] = 1;
  return mask;
}

MergeMask trim_topk(const SaliencyMap& scores, double ratio, const MergeMask* exclude, RatioBasis basis) {
  MergeMask out;
  for (const auto& [name, s] : scores.scores) {
    std::span<const std::uint8_t> ex;
    if (exclude) {
      auto it = exclude->masks.find(name);
      if (it == exclude->masks.end()) throw Error(ErrorCode::kMissingTensor, "exclusion mask lacks '" + name + "'");
      ex = it->second.bits;
    }
    out.masks.emplace(name, MaskTensor{s.shape, select_top(s.data, ratio, ex, basis)});
  }
  return out;
}

void write_saliency(const SaliencyMap& s, const std::filesystem::path& path) {
  TensorMap m;
  for (const auto& [name, t] : s.scores) {
    m.entries.emplace(name, Tensor(t.shape, std::vector<float>(t.data.begin(), t.data.end())));
  }
  m.metadata[kScorerTagKey] = std::string(scorer_name(s.tag));
  write_checkpoint(m, path);
}

SaliencyMap read_saliency(const std::filesystem::path& path) {
  TensorMap m = read_checkpoint(path);
  auto it = m.metadata.find(kScorerTagKey);
  if (it == m.metadata.end()) throw Error(ErrorCode::kMalformedHeader, path.string() + ": missing scorer_tag");
  SaliencyMap s;
  if (it->second == "obm") s.tag = ScorerTag::kObm;
  else if (it->second == "magnitude") s.tag = ScorerTag::kMagnitude;
  else if (it->second == "random") s.tag = ScorerTag::kRandom;
  else throw Error(ErrorCode::kMalformedHeader, "unknown scorer_tag '" + it->second + "'");
  for (auto& [name, t] : m.entries) {
    for (float v : t.data) {
      if (v < 0.0f) throw Error(ErrorCode::kPrecondition, "negative saliency in '" + name + "'");
    }
    s.scores.emplace(name, DeltaTensor(t.shape, std::vector<double>(t.data.begin(), t.data.end())));
  }
  return s;
}

}  // namespace obim

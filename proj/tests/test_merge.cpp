// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>
#include <obim/error.h>
#include <obim/merge.h>
#include <obim/parallel.h>
#include <obim/tensorstore.h>

#include "support.h"

using namespace obim;
using namespace obim::testing;

namespace {

SaliencyMap scores_of(const std::string& name, std::vector<double> v) {
  SaliencyMap s;
  const auto n = static_cast<std::int64_t>(v.size());
  s.scores.emplace(name, DeltaTensor({n}, std::move(v)));
  return s;
}

TaskVector tv_of(std::uint64_t fp, const std::string& name, std::vector<double> v) {
  TaskVector tv;
  tv.base_fingerprint = fp;
  const auto n = static_cast<std::int64_t>(v.size());
  tv.deltas.emplace(name, DeltaTensor({n}, std::move(v)));
  return tv;
}

std::vector<std::uint8_t> bits_of(const MergeMask& m, const std::string& name) { return m.masks.at(name).bits; }

MergePlan plan_of(Method method, std::vector<double> ratios, MergeOrder order) {
  MergePlan p;
  p.method = method;
  p.ratios = std::move(ratios);
  p.order = std::move(order);
  return p;
}

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error");
  return ErrorCode::kIo;
}

// Base w = 0 and two models whose per-coordinate deltas are the given values.
struct Pair {
  TensorMap base;
  std::vector<TensorMap> models;
  std::vector<TaskVector> deltas;
};

Pair pair_of(const std::vector<float>& d1, const std::vector<float>& d2) {
  Pair p;
  const auto n = static_cast<std::int64_t>(d1.size());
  p.base = single("w", {n}, std::vector<float>(d1.size(), 0.0f));
  p.models = {single("w", {n}, d1), single("w", {n}, d2)};
  for (const auto& m : p.models) p.deltas.push_back(compute_task_vector(m, p.base));
  return p;
}

}  // namespace

TEST_CASE("rotate_order") {
  const MergeOrder o{{0, 1, 2}, OrderPolicy::kRotation};
  CHECK(rotate_order(o).order == std::vector<int>{1, 2, 0});
  CHECK(rotate_order(MergeOrder{{0}, OrderPolicy::kRotation}).order == std::vector<int>{0});
  MergeOrder r = o;
  for (int i = 0; i < 3; ++i) r = rotate_order(r);
  CHECK(r == o);
  CHECK(code_of([&] { rotate_order(MergeOrder{{0, 1}, OrderPolicy::kFixed}); }) == ErrorCode::kPrecondition);
}

TEST_CASE("order presets") {
  CHECK(order_first(3, 2).order == std::vector<int>{2, 0, 1});
  CHECK(order_last(3, 0).order == std::vector<int>{1, 2, 0});
  CHECK(order_first(3, 2).policy == OrderPolicy::kFixed);
  CHECK(identity_order(4).order == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("order schedule") {
  const auto rot = order_schedule(MergeOrder{{0, 1}, OrderPolicy::kRotation}, 2);
  CHECK(rot == std::vector<std::vector<int>>{{0, 1}, {1, 0}});
  const auto fixed = order_schedule(MergeOrder{{1, 0}, OrderPolicy::kFixed}, 3);
  CHECK(fixed == std::vector<std::vector<int>>{{1, 0}, {1, 0}, {1, 0}});

  // Each model leads exactly once in any K consecutive tensors.
  for (int k = 1; k <= 5; ++k) {
    const auto s = order_schedule(identity_order(k), 3 * static_cast<std::size_t>(k) + 2);
    for (std::size_t start = 0; start + k <= s.size(); ++start) {
      std::vector<int> lead(k, 0);
      for (int t = 0; t < k; ++t) ++lead[s[start + t][0]];
      CHECK(lead == std::vector<int>(k, 1));
    }
  }
}

TEST_CASE("iterative merge on a four-coordinate tensor") {
  const Pair p = pair_of({0.5f, -1.0f, 0.25f, 2.0f}, {-0.75f, 1.5f, 3.0f, -0.125f});
  const std::vector<SaliencyMap> s{scores_of("w", {9, 1, 8, 2}), scores_of("w", {7, 6, 5, 4})};
  const auto r = iterative_merge(p.base, p.deltas, s, plan_of(Method::kObim, {0.5, 0.5}, {{0, 1}, OrderPolicy::kFixed}));
  CHECK(bits_of(r.masks[0], "w") == std::vector<std::uint8_t>{1, 0, 1, 0});
  CHECK(bits_of(r.masks[1], "w") == std::vector<std::uint8_t>{0, 1, 0, 1});
  CHECK(r.merged.at("w").data == std::vector<float>{0.5f, 1.5f, 0.25f, -0.125f});

  // Model 1 first: it takes {0, 1}, model 0 is left with {2, 3}.
  const auto q = iterative_merge(p.base, p.deltas, s, plan_of(Method::kObim, {0.5, 0.5}, {{1, 0}, OrderPolicy::kFixed}));
  CHECK(bits_of(q.masks[1], "w") == std::vector<std::uint8_t>{1, 1, 0, 0});
  CHECK(bits_of(q.masks[0], "w") == std::vector<std::uint8_t>{0, 0, 1, 1});
}

TEST_CASE("iterative merge with one model and ratio 1 is apply") {
  std::mt19937_64 gen(41);
  TensorMap base;
  base.entries.emplace("a", random_tensor(gen, {5, 3}));
  base.entries.emplace("b", random_tensor(gen, {4}));
  const TensorMap model = perturbed(gen, base, 0.3);
  const std::vector<TaskVector> d{compute_task_vector(model, base)};
  const std::vector<SaliencyMap> s{magnitude_scores(d[0])};
  const auto r = iterative_merge(base, d, s, plan_of(Method::kTiesIm, {1.0}, identity_order(1)));
  CHECK(bit_equal(r.merged, apply(base, d[0])));
  CHECK(bit_equal(r.merged, model));
}

TEST_CASE("rotation uses [0,1] on the first tensor and [1,0] on the second") {
  // Both models want coordinate 0 of every tensor; the leader gets it.
  TensorMap base;
  base.entries.emplace("a", Tensor({2}, {0, 0}));
  base.entries.emplace("b", Tensor({2}, {0, 0}));
  TaskVector d1, d2;
  d1.base_fingerprint = d2.base_fingerprint = fingerprint(base);
  SaliencyMap s1, s2;
  for (const char* n : {"a", "b"}) {
    d1.deltas.emplace(n, DeltaTensor({2}, {1, 1}));
    d2.deltas.emplace(n, DeltaTensor({2}, {2, 2}));
    s1.scores.emplace(n, DeltaTensor({2}, {5, 1}));
    s2.scores.emplace(n, DeltaTensor({2}, {5, 1}));
  }
  const std::vector<TaskVector> d{d1, d2};
  const std::vector<SaliencyMap> s{s1, s2};
  const auto r = iterative_merge(base, d, s, plan_of(Method::kTiesIm, {0.5, 0.5}, identity_order(2)));
  CHECK(r.merged.at("a").data == std::vector<float>{1, 2});
  CHECK(r.merged.at("b").data == std::vector<float>{2, 1});
  const auto f = iterative_merge(base, d, s, plan_of(Method::kTiesIm, {0.5, 0.5}, {{0, 1}, OrderPolicy::kFixed}));
  CHECK(f.merged.at("b").data == std::vector<float>{1, 2});
}

TEST_CASE("the first merged model keeps its whole top set") {
  std::mt19937_64 gen(42);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> kdist(2, 4);
  for (int inst = 0; inst < 50; ++inst) {
    const int k = kdist(gen);
    TensorMap base = single("w", {50}, std::vector<float>(50, 0.0f));
    std::vector<TaskVector> d;
    std::vector<SaliencyMap> s;
    for (int m = 0; m < k; ++m) {
      std::vector<double> v(50), sc(50);
      for (int i = 0; i < 50; ++i) v[i] = u(gen) + 0.1, sc[i] = u(gen);
      d.push_back(tv_of(fingerprint(base), "w", v));
      s.push_back(scores_of("w", sc));
    }
    std::vector<int> perm(k);
    for (int i = 0; i < k; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), gen);
    const double ratio = 1.0 / k;
    const auto r = iterative_merge(base, d, s, plan_of(Method::kTiesIm, std::vector<double>(k, ratio), {perm, OrderPolicy::kFixed}));
    CHECK(r.masks[perm[0]] == trim_topk(s[perm[0]], ratio));
    // Disjoint, and each model gets its full quota since the pool never runs dry.
    CHECK(check_disjoint(r.masks) <= 1);
    for (int m = 0; m < k; ++m) CHECK(r.masks[m].count() == retained_count(ratio, 50));
  }
}

TEST_CASE("iterative merge preconditions") {
  const Pair p = pair_of({1, 2}, {3, 4});
  const std::vector<SaliencyMap> s{scores_of("w", {1, 2}), scores_of("w", {1, 2})};
  CHECK(code_of([&] { iterative_merge(p.base, p.deltas, s, plan_of(Method::kObim, {0.6, 0.6}, identity_order(2))); }) ==
        ErrorCode::kRatioSum);
  const std::vector<SaliencyMap> bad{scores_of("w", {1, 2, 3}), scores_of("w", {1, 2})};
  CHECK(code_of([&] { iterative_merge(p.base, p.deltas, bad, plan_of(Method::kObim, {0.5, 0.5}, identity_order(2))); }) ==
        ErrorCode::kShapeMismatch);
}

TEST_CASE("disjoint mean") {
  auto dm = [](std::vector<std::vector<double>> per_model) {
    std::vector<TaskVector> d;
    for (auto& v : per_model) d.push_back(tv_of(0, "w", v));
    return disjoint_mean(d).at("w").data;
  };
  CHECK(dm({{0.2}, {-0.4}}) == std::vector<double>{-0.4});
  CHECK(dm({{0.3}, {0.1}}) == std::vector<double>{(0.3 + 0.1) / 2});
  CHECK(dm({{0.3, -2, 0}}) == std::vector<double>{0.3, -2, 0});
  CHECK(dm({{0}, {0}, {0}}) == std::vector<double>{0});
  CHECK(dm({{1}, {-1}}) == std::vector<double>{1});           // exact tie elects +
  CHECK(dm({{0.5}, {0}, {0.1}}) == std::vector<double>{0.3});  // zeros do not vote or count
  CHECK(dm({{3}, {-1}, {-1}}) == std::vector<double>{3});
  CHECK(dm({{-3}, {1}, {1}, {0.5}}) == std::vector<double>{-3});
}

TEST_CASE("disjoint mean equals the mean without sign conflicts") {
  std::mt19937_64 gen(43);
  std::uniform_real_distribution<double> u(0.01, 1);
  std::bernoulli_distribution coin(0.5);
  for (int k = 1; k <= 4; ++k) {
    std::vector<std::vector<double>> v(k, std::vector<double>(40));
    for (int i = 0; i < 40; ++i) {
      const double sign = coin(gen) ? 1 : -1;
      for (int m = 0; m < k; ++m) v[m][i] = sign * u(gen);
    }
    std::vector<TaskVector> d;
    for (auto& x : v) d.push_back(tv_of(0, "w", x));
    const auto out = disjoint_mean(d).at("w").data;
    for (int i = 0; i < 40; ++i) {
      double sum = 0;
      for (int m = 0; m < k; ++m) sum += v[m][i];
      CHECK(out[i] == sum / k);
    }
  }
}

TEST_CASE("DARE") {
  const TaskVector d = tv_of(5, "w", {0.5, -1.0, 2.0, 0.25, 4.0, -3.0, 1.0, 0.125});
  CHECK(dare_drop_rescale(d, 0.0, 1).at("w").data == d.at("w").data);

  const TaskVector half = dare_drop_rescale(d, 0.5, 7);
  const MergeMask keep = dare_keep_mask(d, 0.5, 7);
  CHECK(half.base_fingerprint == 5);
  for (std::size_t i = 0; i < d.at("w").data.size(); ++i) {
    const double expected = keep.masks.at("w").bits[i] ? 2 * d.at("w").data[i] : 0.0;
    CHECK(half.at("w").data[i] == expected);
  }
  CHECK(dare_drop_rescale(d, 0.5, 7).at("w").data == half.at("w").data);
  CHECK(code_of([&] { dare_drop_rescale(d, 1.0, 0); }) == ErrorCode::kPrecondition);
  CHECK(code_of([&] { dare_drop_rescale(d, -0.1, 0); }) == ErrorCode::kPrecondition);

  // Draws depend on (seed, name, index) only: adding a tensor leaves "w" unchanged.
  TaskVector more = d;
  more.deltas.emplace("a", DeltaTensor({3}, {1, 1, 1}));
  CHECK(dare_keep_mask(more, 0.5, 7).masks.at("w") == keep.masks.at("w"));
}

TEST_CASE("DARE keeps about 1 - p of the coordinates") {
  TaskVector d;
  d.deltas.emplace("w", DeltaTensor({20000}, std::vector<double>(20000, 1.0)));
  for (double p : {0.1, 0.5, 0.9}) {
    const double kept = static_cast<double>(dare_keep_mask(d, p, 3).count()) / 20000.0;
    const double se = std::sqrt(p * (1 - p) / 20000.0);
    CHECK(std::abs(kept - (1 - p)) < 4 * se);
  }
}

TEST_CASE("task arithmetic") {
  const TensorMap base = single("w", {1}, {1.0f});
  const std::vector<TaskVector> d{tv_of(fingerprint(base), "w", {0.2}), tv_of(fingerprint(base), "w", {0.4})};
  CHECK(task_arithmetic(base, d, 1.0).at("w").data[0] == static_cast<float>(1.0 + (0.2 + 0.4)));
  CHECK(task_arithmetic(base, d, 1.0).at("w").data[0] == doctest::Approx(1.6f));
  CHECK(bit_equal(task_arithmetic(base, d, 0.0), base));
  const std::vector<TaskVector> one{d[0]};
  CHECK(bit_equal(task_arithmetic(base, one, 1.0), apply(base, d[0])));
}

TEST_CASE("methods") {
  CHECK(parse_method("obim") == Method::kObim);
  CHECK(parse_method("Ties+Im") == Method::kTiesIm);
  CHECK(parse_method("TIES+OBM") == Method::kTiesObm);
  CHECK(parse_method("ta") == Method::kTaskArithmetic);
  CHECK(parse_method("DARE") == Method::kDare);
  CHECK(method_name(Method::kTiesObm) == "TIES+OBM");
  for (const char* m : {"DELLA", "TALL-Mask", "pcb"}) {
    CHECK(code_of([&] { parse_method(m); }) == ErrorCode::kUnavailableMethod);
  }
  CHECK(code_of([] { parse_method("average"); }) == ErrorCode::kInvalidConfig);
  CHECK(uses_iterative_merging(Method::kObim));
  CHECK(uses_iterative_merging(Method::kTiesIm));
  CHECK_FALSE(uses_iterative_merging(Method::kTiesObm));
  CHECK(uses_obm(Method::kTiesObm));
  CHECK_FALSE(uses_obm(Method::kTiesIm));
}

TEST_CASE("plan validation") {
  CHECK_NOTHROW(validate_plan(plan_of(Method::kObim, {0.4, 0.45, 0.1}, identity_order(3)), 3));
  for (int k = 1; k <= 12; ++k) {
    CHECK_NOTHROW(validate_plan(plan_of(Method::kObim, std::vector<double>(k, 1.0 / k), identity_order(k)), k));
  }
  CHECK(code_of([] { validate_plan(plan_of(Method::kObim, {0.6, 0.6}, identity_order(2)), 2); }) ==
        ErrorCode::kRatioSum);
  CHECK(code_of([] { validate_plan(plan_of(Method::kTiesIm, {0.6, 0.6}, identity_order(2)), 2); }) ==
        ErrorCode::kRatioSum);
  CHECK_NOTHROW(validate_plan(plan_of(Method::kTies, {0.6, 0.6}, identity_order(2)), 2));
  CHECK(code_of([] { validate_plan(plan_of(Method::kTies, {1.2, 0.6}, identity_order(2)), 2); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { validate_plan(plan_of(Method::kObim, {0.5}, identity_order(2)), 2); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { validate_plan(plan_of(Method::kObim, {0.5, 0.5}, {{0, 0}, OrderPolicy::kFixed}), 2); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { validate_plan(plan_of(Method::kObim, {0.5, 0.5}, {{0, 2}, OrderPolicy::kFixed}), 2); }) ==
        ErrorCode::kInvalidConfig);
  MergePlan dare = plan_of(Method::kDare, {}, identity_order(2));
  CHECK_NOTHROW(validate_plan(dare, 2));
  dare.drop_p = 1.0;
  CHECK(code_of([&] { validate_plan(dare, 2); }) == ErrorCode::kInvalidConfig);
  MergePlan ta = plan_of(Method::kTaskArithmetic, {}, identity_order(2));
  ta.lambda = INFINITY;
  CHECK(code_of([&] { validate_plan(ta, 2); }) == ErrorCode::kInvalidConfig);
  try {
    validate_plan(plan_of(Method::kObim, {0.6, 0.6}, identity_order(2)), 2);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("ratios") != std::string::npos);
  }
}

TEST_CASE("run_merge: OBIM reproduces the hand-traced masks") {
  // Unit second moments make s = delta^2: s1 = (9, 1, 7.84, 1.96), s2 = (6.76, 5.76, 4.84, 4).
  const Pair p = pair_of({3.0f, 1.0f, 2.8f, 1.4f}, {2.6f, 2.4f, 2.2f, 2.0f});
  ModelSpec spec;
  spec.input_dim = 4;
  spec.layers.push_back({"w", std::nullopt, Activation::kIdentity});
  TensorMap wide = single("w", {1, 4}, {0, 0, 0, 0});
  TensorMap base = wide;
  std::vector<TensorMap> models;
  for (const auto& m : p.models) models.push_back(single("w", {1, 4}, m.at("w").data));
  Matrix x(2, 4);
  x << 1, 1, 1, 1, -1, -1, -1, -1;
  const std::vector<ActivationStats> stats{forward_collect(spec, base, x).stats};
  const MergeOutcome out =
      run_merge(plan_of(Method::kObim, {0.5, 0.5}, {{0, 1}, OrderPolicy::kFixed}), base, models, stats, &spec);
  CHECK(bits_of(out.masks[0], "w") == std::vector<std::uint8_t>{1, 0, 1, 0});
  CHECK(bits_of(out.masks[1], "w") == std::vector<std::uint8_t>{0, 1, 0, 1});
  CHECK(out.merged.at("w").data == std::vector<float>{3.0f, 2.4f, 2.8f, 2.0f});
  CHECK(out.report.kept == std::vector<std::int64_t>{2, 2});
  CHECK(out.report.max_mask_sum == 1);
  CHECK(out.report.overlap_coordinates == 0);
  CHECK(out.report.coordinates == 4);
}

TEST_CASE("run_merge: TIES at ratio 1 on conflict-free deltas is TA with lambda 1/K") {
  std::mt19937_64 gen(44);
  std::uniform_real_distribution<double> u(0.01, 1);
  std::bernoulli_distribution coin(0.5);
  TensorMap base = single("w", {10}, random_tensor(gen, {10}).data);
  std::vector<TensorMap> models(2, base);
  for (int i = 0; i < 10; ++i) {
    const double sign = coin(gen) ? 1 : -1;
    for (auto& m : models) m.at("w").data[i] = static_cast<float>(base.at("w").data[i] + sign * u(gen));
  }
  const MergeOutcome ties = run_merge(plan_of(Method::kTies, {1.0, 1.0}, identity_order(2)), base, models);
  MergePlan ta = plan_of(Method::kTaskArithmetic, {}, identity_order(2));
  ta.lambda = 0.5;
  const MergeOutcome avg = run_merge(ta, base, models);
  CHECK(bit_equal(ties.merged, avg.merged));
  CHECK(avg.report.kept == std::vector<std::int64_t>{10, 10});
  CHECK(avg.report.max_mask_sum == 2);

  MergePlan dare = plan_of(Method::kDare, {}, identity_order(2));
  dare.drop_p = 0.0;
  CHECK(bit_equal(run_merge(dare, base, models).merged, ties.merged));
}

TEST_CASE("run_merge: method matrix") {
  std::mt19937_64 gen(45);
  ModelSpec spec;
  spec.input_dim = 5;
  spec.layers.push_back({"w", std::string("b"), Activation::kIdentity});
  TensorMap base;
  base.entries.emplace("w", random_tensor(gen, {3, 5}));
  base.entries.emplace("b", random_tensor(gen, {3}));
  const std::vector<TensorMap> models{perturbed(gen, base, 0.2), perturbed(gen, base, 0.2), perturbed(gen, base, 0.2)};
  std::vector<TaskVector> d;
  for (const auto& m : models) d.push_back(compute_task_vector(m, base));
  const std::vector<ActivationStats> stats{forward_collect(spec, base, random_matrix(gen, 20, 5)).stats};
  const std::vector<double> ratios{0.3, 0.3, 0.3};

  SUBCASE("TIES composes magnitude trimming and disjoint mean") {
    const MergeOutcome out = run_merge(plan_of(Method::kTies, ratios, identity_order(3)), base, models);
    std::vector<TaskVector> trimmed;
    for (const auto& x : d) trimmed.push_back(apply_mask(x, trim_topk(magnitude_scores(x), 0.3)));
    CHECK(bit_equal(out.merged, apply(base, disjoint_mean(trimmed))));
  }
  SUBCASE("TIES+OBM composes OBM trimming and disjoint mean") {
    MergePlan plan = plan_of(Method::kTiesObm, ratios, identity_order(3));
    plan.seed = 8;
    const MergeOutcome out = run_merge(plan, base, models, stats, &spec);
    std::vector<TaskVector> trimmed;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const SaliencyMap s = obm_scores(d[k], spec, hessian_diag(stats[0]), model_seed(8, k));
      trimmed.push_back(apply_mask(d[k], trim_topk(s, 0.3)));
    }
    CHECK(bit_equal(out.merged, apply(base, disjoint_mean(trimmed))));
  }
  SUBCASE("TIES+IM feeds magnitudes to iterative merging") {
    const MergePlan plan = plan_of(Method::kTiesIm, ratios, identity_order(3));
    const MergeOutcome out = run_merge(plan, base, models);
    std::vector<SaliencyMap> s;
    for (const auto& x : d) s.push_back(magnitude_scores(x));
    CHECK(bit_equal(out.merged, iterative_merge(base, d, s, plan).merged));
  }
  SUBCASE("OBIM feeds OBM scores to iterative merging") {
    MergePlan plan = plan_of(Method::kObim, ratios, identity_order(3));
    plan.seed = 3;
    const MergeOutcome out = run_merge(plan, base, models, stats, &spec);
    std::vector<SaliencyMap> s;
    for (std::size_t k = 0; k < d.size(); ++k) {
      s.push_back(obm_scores(d[k], spec, hessian_diag(stats[0]), model_seed(3, k)));
    }
    const auto im = iterative_merge(base, d, s, plan);
    CHECK(bit_equal(out.merged, im.merged));
    CHECK(out.masks == im.masks);
    CHECK(out.report.max_mask_sum <= 1);
    CHECK(bit_equal(apply(base, out.merged_delta), out.merged));
  }
  SUBCASE("DARE drops, rescales and takes the disjoint mean") {
    MergePlan plan = plan_of(Method::kDare, {}, identity_order(3));
    plan.drop_p = 0.4;
    plan.seed = 12;
    const MergeOutcome out = run_merge(plan, base, models);
    std::vector<TaskVector> dropped;
    for (std::size_t k = 0; k < d.size(); ++k) dropped.push_back(dare_drop_rescale(d[k], 0.4, model_seed(12, k)));
    CHECK(bit_equal(out.merged, apply(base, disjoint_mean(dropped))));
  }
  SUBCASE("OBM methods need stats") {
    CHECK(code_of([&] { run_merge(plan_of(Method::kObim, ratios, identity_order(3)), base, models, {}, &spec); }) ==
          ErrorCode::kMissingStats);
    CHECK(code_of([&] { run_merge(plan_of(Method::kTiesObm, ratios, identity_order(3)), base, models, stats); }) ==
          ErrorCode::kMissingStats);
  }
  SUBCASE("per-model stats") {
    const std::vector<ActivationStats> per{stats[0], stats[0], stats[0]};
    MergePlan plan = plan_of(Method::kObim, ratios, identity_order(3));
    CHECK(bit_equal(run_merge(plan, base, models, per, &spec).merged, run_merge(plan, base, models, stats, &spec).merged));
    const std::vector<ActivationStats> two{stats[0], stats[0]};
    CHECK(code_of([&] { run_merge(plan, base, models, two, &spec); }) == ErrorCode::kMissingStats);
  }
  SUBCASE("incompatible model") {
    std::vector<TensorMap> bad = models;
    bad[1].entries.erase("b");
    CHECK(code_of([&] { run_merge(plan_of(Method::kTies, ratios, identity_order(3)), base, bad); }) ==
          ErrorCode::kMissingTensor);
  }
}

TEST_CASE("run_merge does not depend on the thread count") {
  std::mt19937_64 gen(46);
  ModelSpec spec;
  spec.input_dim = 7;
  spec.layers.push_back({"l0", std::string("b0"), Activation::kRelu});
  spec.layers.push_back({"l1", std::nullopt, Activation::kIdentity});
  TensorMap base;
  base.entries.emplace("l0", random_tensor(gen, {9, 7}));
  base.entries.emplace("b0", random_tensor(gen, {9}));
  base.entries.emplace("l1", random_tensor(gen, {4, 9}));
  const std::vector<TensorMap> models{perturbed(gen, base, 0.1), perturbed(gen, base, 0.1)};
  const std::vector<ActivationStats> stats{forward_collect(spec, base, random_matrix(gen, 30, 7)).stats};
  for (Method m : {Method::kObim, Method::kTiesObm, Method::kDare, Method::kTiesIm}) {
    MergePlan plan = plan_of(m, {0.4, 0.4}, identity_order(2));
    plan.drop_p = 0.3;
    plan.seed = 99;
    set_num_threads(1);
    const MergeOutcome one = run_merge(plan, base, models, stats, &spec);
    set_num_threads(4);
    const MergeOutcome four = run_merge(plan, base, models, stats, &spec);
    set_num_threads(0);
    CHECK(bit_equal(one.merged, four.merged));
    CHECK(one.masks == four.masks);
  }
}

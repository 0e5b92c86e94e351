// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale multi-task benchmark: planted task suites, fine-tuning oracles,
// evaluation and interference statistics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "obim/calib.h"
#include "obim/merge.h"
#include "obim/taskvec.h"

namespace obim {

struct TaskDataset {
  Matrix inputs;   // [N, d_in]
  Matrix targets;  // [N, d_out]
  int task_id = 0;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  int tasks = 2;
  int d_in = 8;
  int d_out = 4;
  int samples = 64;      // training samples per task
  int eval_samples = 256;
  double overlap = 0.0;  // share of each task's feature support shared by all tasks
  double perturb_scale = 1.0;
  double noise = 0.0;       // target noise std
  double background = 0.0;  // input std on features outside the task support
  int hidden = 0;           // 0: one linear layer; >0: two layers with this hidden width
  Activation hidden_activation = Activation::kTanh;
  bool bias = false;
};

struct TaskSuite {
  ModelSpec spec;
  TensorMap base;
  std::vector<TensorMap> ground_truth;   // planted per-task optimum
  std::vector<std::vector<int>> supports;  // input features each task perturbs
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> eval;
};

// Base model plus K planted tasks. Task k perturbs the first-layer weight
// columns of its support only; its inputs have unit variance on the support
// and `background` std elsewhere. Supports are floor(d_in / K) features; the
// first round(overlap * size) of them are shared by every task.
TaskSuite make_task_suite(const SuiteOptions& opt);

// argmin_W ||X W^T - Y||^2 + ridge ||W - W_base||^2 for a single identity
// layer. A bias, if present, is fitted as an extra all-ones input and shares
// the ridge penalty.
TensorMap closed_form_finetune(const ModelSpec& spec, const TensorMap& base, const TaskDataset& data, double ridge);

// Mean over samples and outputs of the squared error.
double evaluate(const ModelSpec& spec, const TensorMap& weights, const TaskDataset& data);
double evaluate(const ModelSpec& spec, const ParamSet& params, const TaskDataset& data);

struct LossGradient {
  double loss = 0.0;
  ParamSet gradient;
};

// Reverse pass of evaluate() with respect to every weight and bias in spec.
LossGradient loss_and_gradient(const ModelSpec& spec, const ParamSet& params, const TaskDataset& data);

struct SgdOptions {
  int epochs = 1000;
  double lr = 0.05;
  int divergence_patience = 5;  // consecutive loss increases tolerated before failing
};

// Full-batch gradient descent from `base`. Throws kDivergence after
// `divergence_patience` consecutive loss increases.
TensorMap sgd_finetune(const ModelSpec& spec, const TensorMap& base, const TaskDataset& data,
                       const SgdOptions& opt);

struct InterferenceStats {
  double sign_conflict_fraction = 0.0;
  double deviation_fraction = 0.0;
  std::int64_t coordinates = 0;
};

// sign_conflict_fraction: share of coordinates where two nonzero deltas
// disagree in sign. deviation_fraction: share of coordinates where the merged
// delta is nonzero and differs by more than 1e-7 from every input delta.
InterferenceStats interference_report(std::span<const TaskVector> deltas, const TaskVector& merged);

// Persistence: "inputs", "targets" tensors and "task_id" metadata.
void write_dataset(const TaskDataset& data, const std::filesystem::path& path);
TaskDataset read_dataset(const std::filesystem::path& path);

enum class FinetuneMode { kClosedForm, kSgd };

struct BenchConfig {
  SuiteOptions suite;
  std::vector<Method> methods{Method::kTaskArithmetic, Method::kTies, Method::kObim};
  std::vector<double> ratios;  // empty: 1/K per model
  double lambda = 1.0;
  double drop_p = 0.0;
  MergeOrder order;  // empty sequence: identity order with the given policy
  std::uint64_t seed = 0;
  FinetuneMode finetune = FinetuneMode::kClosedForm;
  double ridge = 1e-6;
  SgdOptions sgd;
  int calib_samples = 100;
  HessianPolicy hessian_policy = HessianPolicy::kMeanOfSquares;
};

struct BenchRow {
  std::string method;
  std::string task_id;  // task index, or "avg"
  double loss_base = 0.0;
  double loss_finetuned = 0.0;
  double loss_merged = 0.0;
  double sign_conflict_fraction = 0.0;
  double deviation_fraction = 0.0;
  std::vector<std::int64_t> kept;
};

struct BenchResult {
  TaskSuite suite;
  std::vector<TensorMap> finetuned;
  std::vector<BenchRow> rows;
};

BenchResult run_bench(const BenchConfig& config);

// Header: method,task_id,loss_base,loss_finetuned,loss_merged,
// sign_conflict_fraction,deviation_fraction,kept_0..kept_{K-1}
void write_bench_csv(std::span<const BenchRow> rows, int k, std::ostream& out);

// Calibration statistics for one model: forward pass of `weights` over the
// first `max_samples` rows of `inputs`.
ActivationStats calibration_stats(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs,
                                  int max_samples);

}  // namespace obim

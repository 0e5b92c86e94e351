// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/bench.h"

#include <cmath>
#include <ostream>
#include <random>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "obim/error.h"
#include "obim/parallel.h"
#include "obim/tensorstore.h"

namespace obim {

namespace {

constexpr double kDeviationTolerance = 1e-7;

Tensor random_tensor(Shape shape, double stddev, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(stddev * normal(gen));
  return t;
}

TaskDataset make_dataset(const ModelSpec& spec, const TensorMap& truth, const std::vector<int>& support,
                         const SuiteOptions& opt, int n, int task_id, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> feature_std(static_cast<std::size_t>(opt.d_in), opt.background);
  for (int j : support) feature_std[static_cast<std::size_t>(j)] = 1.0;
  TaskDataset data;
  data.task_id = task_id;
  data.inputs.resize(n, opt.d_in);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < opt.d_in; ++j) data.inputs(i, j) = feature_std[static_cast<std::size_t>(j)] * normal(gen);
  }
  data.targets = forward_trace(spec, truth, data.inputs).output;
  for (Eigen::Index i = 0; i < data.targets.size(); ++i) data.targets.data()[i] += opt.noise * normal(gen);
  return data;
}

void check_dataset(const ModelSpec& spec, const TaskDataset& data) {
  if (data.inputs.rows() != data.targets.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "inputs and targets have different sample counts");
  }
  if (data.inputs.cols() != spec.input_dim) {
    throw Error(ErrorCode::kShapeMismatch,
                fmt::format("dataset has {} features but the model expects {}", data.inputs.cols(), spec.input_dim));
  }
}

std::string fmt_num(double v) { return fmt::format("{:.10g}", v); }

}  // namespace

TaskSuite make_task_suite(const SuiteOptions& opt) {
  if (opt.tasks < 1) throw Error(ErrorCode::kInvalidConfig, "suite.tasks: must be at least 1");
  if (opt.d_in < opt.tasks) throw Error(ErrorCode::kInvalidConfig, "suite.d_in: must be at least the task count");
  if (opt.d_out < 1) throw Error(ErrorCode::kInvalidConfig, "suite.d_out: must be positive");
  if (opt.samples < opt.d_in) throw Error(ErrorCode::kInvalidConfig, "suite.samples: must be at least d_in");
  if (opt.eval_samples < 1) throw Error(ErrorCode::kInvalidConfig, "suite.eval_samples: must be positive");
  if (!(opt.overlap >= 0.0 && opt.overlap <= 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "suite.overlap: must lie in [0, 1]");
  }
  if (opt.hidden < 0) throw Error(ErrorCode::kInvalidConfig, "suite.hidden: must be non-negative");
  if (opt.noise < 0.0 || opt.background < 0.0 || opt.perturb_scale < 0.0) {
    throw Error(ErrorCode::kInvalidConfig, "suite: noise, background and perturb_scale must be non-negative");
  }

  TaskSuite suite;
  std::mt19937_64 gen(opt.seed);

  const int k = opt.tasks;
  const int size = opt.d_in / k;
  const int shared = static_cast<int>(std::lround(opt.overlap * size));
  for (int t = 0; t < k; ++t) {
    std::vector<int> s;
    for (int j = 0; j < shared; ++j) s.push_back(j);
    for (int j = 0; j < size - shared; ++j) s.push_back(shared + t * (size - shared) + j);
    suite.supports.push_back(std::move(s));
  }

  suite.spec.input_dim = opt.d_in;
  std::string first_weight;
  if (opt.hidden == 0) {
    first_weight = "fc.weight";
    suite.spec.layers.push_back(
        {first_weight, opt.bias ? std::optional<std::string>("fc.bias") : std::nullopt, Activation::kIdentity});
    suite.base.entries.emplace(first_weight, random_tensor({opt.d_out, opt.d_in}, 1.0 / std::sqrt(opt.d_in), gen));
    if (opt.bias) suite.base.entries.emplace("fc.bias", random_tensor({opt.d_out}, 0.1, gen));
  } else {
    first_weight = "l0.weight";
    suite.spec.layers.push_back(
        {first_weight, opt.bias ? std::optional<std::string>("l0.bias") : std::nullopt, opt.hidden_activation});
    suite.spec.layers.push_back(
        {"l1.weight", opt.bias ? std::optional<std::string>("l1.bias") : std::nullopt, Activation::kIdentity});
    suite.base.entries.emplace(first_weight, random_tensor({opt.hidden, opt.d_in}, 1.0 / std::sqrt(opt.d_in), gen));
    if (opt.bias) suite.base.entries.emplace("l0.bias", random_tensor({opt.hidden}, 0.1, gen));
    suite.base.entries.emplace("l1.weight", random_tensor({opt.d_out, opt.hidden}, 1.0 / std::sqrt(opt.hidden), gen));
    if (opt.bias) suite.base.entries.emplace("l1.bias", random_tensor({opt.d_out}, 0.1, gen));
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < k; ++t) {
    TensorMap truth = suite.base;
    Tensor& w = truth.at(first_weight);
    const auto cols = w.shape[1];
    for (std::int64_t r = 0; r < w.shape[0]; ++r) {
      for (int j : suite.supports[static_cast<std::size_t>(t)]) {
        auto& v = w.data[static_cast<std::size_t>(r * cols + j)];
        v = static_cast<float>(v + opt.perturb_scale * normal(gen));
      }
    }
    suite.ground_truth.push_back(std::move(truth));
  }
  for (int t = 0; t < k; ++t) {
    const auto& truth = suite.ground_truth[static_cast<std::size_t>(t)];
    const auto& support = suite.supports[static_cast<std::size_t>(t)];
    suite.train.push_back(make_dataset(suite.spec, truth, support, opt, opt.samples, t, gen));
    suite.eval.push_back(make_dataset(suite.spec, truth, support, opt, opt.eval_samples, t, gen));
  }
  return suite;
}

TensorMap closed_form_finetune(const ModelSpec& spec, const TensorMap& base, const TaskDataset& data, double ridge) {
  if (spec.layers.size() != 1 || spec.layers[0].activation != Activation::kIdentity) {
    throw Error(ErrorCode::kPrecondition, "closed-form fine-tuning needs a single identity layer");
  }
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw Error(ErrorCode::kPrecondition, "ridge must be >= 0");
  validate_spec(spec, base);
  check_dataset(spec, data);
  const LayerSpec& layer = spec.layers[0];
  const Matrix w_base = to_matrix(base.at(layer.weight_name));
  const bool has_bias = layer.bias_name.has_value();
  const Eigen::Index d = w_base.cols() + (has_bias ? 1 : 0);
  const Eigen::Index n = data.inputs.rows();
  if (n < w_base.cols()) throw Error(ErrorCode::kPrecondition, "closed-form fine-tuning needs N >= d_in");

  Eigen::MatrixXd x(n, d);
  x.leftCols(w_base.cols()) = data.inputs;
  Eigen::MatrixXd b(w_base.rows(), d);
  b.leftCols(w_base.cols()) = w_base;
  if (has_bias) {
    x.col(d - 1).setOnes();
    const auto& bias = base.at(*layer.bias_name).data;
    for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, d - 1) = bias[static_cast<std::size_t>(r)];
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd rhs = x.transpose() * data.targets + ridge * b.transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  // rcond() skips zero pivots, so check the pivot spread as well.
  const Eigen::VectorXd pivots = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-12) || !(pivots.minCoeff() > 1e-12 * pivots.maxCoeff())) {
    throw Error(ErrorCode::kRankDeficient, "normal matrix is rank-deficient; use a positive ridge");
  }
  const Eigen::MatrixXd wt = ldlt.solve(rhs);  // [d, d_out]

  TensorMap out = base;
  Matrix w = wt.topRows(w_base.cols()).transpose();
  out.at(layer.weight_name) = from_matrix(w);
  if (has_bias) {
    auto& bias = out.at(*layer.bias_name).data;
    for (std::size_t r = 0; r < bias.size(); ++r) bias[r] = static_cast<float>(wt(d - 1, static_cast<Eigen::Index>(r)));
  }
  return out;
}

double evaluate(const ModelSpec& spec, const ParamSet& params, const TaskDataset& data) {
  check_dataset(spec, data);
  const ForwardTrace trace = forward_trace(spec, params, data.inputs);
  if (trace.output.cols() != data.targets.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "model outputs and targets differ in width");
  }
  return (trace.output - data.targets).squaredNorm() / static_cast<double>(data.targets.size());
}

double evaluate(const ModelSpec& spec, const TensorMap& weights, const TaskDataset& data) {
  return evaluate(spec, to_params(weights), data);
}

LossGradient loss_and_gradient(const ModelSpec& spec, const ParamSet& params, const TaskDataset& data) {
  check_dataset(spec, data);
  const ForwardTrace trace = forward_trace(spec, params, data.inputs);
  if (trace.output.cols() != data.targets.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "model outputs and targets differ in width");
  }
  LossGradient lg;
  const Matrix diff = trace.output - data.targets;
  const double count = static_cast<double>(data.targets.size());
  lg.loss = diff.squaredNorm() / count;

  Matrix grad_out = (2.0 / count) * diff;
  for (std::size_t l = spec.layers.size(); l-- > 0;) {
    const LayerSpec& layer = spec.layers[l];
    const Matrix dz = grad_out.cwiseProduct(activation_derivative(layer.activation, trace.preact[l]));
    const Matrix dw = dz.transpose() * trace.inputs[l];
    const DeltaTensor& wt = params.at(layer.weight_name);
    lg.gradient.emplace(layer.weight_name,
                        DeltaTensor(wt.shape, std::vector<double>(dw.data(), dw.data() + dw.size())));
    if (layer.bias_name) {
      const Eigen::RowVectorXd db = dz.colwise().sum();
      lg.gradient.emplace(*layer.bias_name,
                          DeltaTensor({db.size()}, std::vector<double>(db.data(), db.data() + db.size())));
    }
    if (l > 0) {
      const Eigen::Map<const Matrix> w(wt.data.data(), wt.shape[0], wt.shape[1]);
      grad_out = dz * w;
    }
  }
  return lg;
}

// Increases smaller than this are round-off at the loss floor.
constexpr double kIncreaseSlack = 1e-10;

TensorMap sgd_finetune(const ModelSpec& spec, const TensorMap& base, const TaskDataset& data,
                       const SgdOptions& opt) {
  if (!(opt.lr >= 0.0) || !std::isfinite(opt.lr)) throw Error(ErrorCode::kPrecondition, "lr must be >= 0");
  if (opt.epochs < 0) throw Error(ErrorCode::kPrecondition, "epochs must be >= 0");
  validate_spec(spec, base);
  ParamSet params = to_params(base);
  double previous = std::numeric_limits<double>::infinity();
  int increases = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    LossGradient lg = loss_and_gradient(spec, params, data);
    if (!std::isfinite(lg.loss)) throw Error(ErrorCode::kDivergence, fmt::format("loss is non-finite at epoch {}", epoch));
    increases = lg.loss > previous * (1.0 + kIncreaseSlack) ? increases + 1 : 0;
    if (increases >= opt.divergence_patience) {
      throw Error(ErrorCode::kDivergence,
                  fmt::format("loss increased {} epochs in a row (epoch {}, loss {})", increases, epoch, lg.loss));
    }
    previous = lg.loss;
    for (auto& [name, g] : lg.gradient) {
      auto& p = params.at(name).data;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= opt.lr * g.data[i];
    }
  }
  TensorMap out = from_params(params);
  out.metadata = base.metadata;
  return out;
}

InterferenceStats interference_report(std::span<const TaskVector> deltas, const TaskVector& merged) {
  require_shared_base(deltas);
  InterferenceStats st;
  std::int64_t conflicts = 0;
  std::int64_t deviations = 0;
  for (const auto& [name, m] : merged.deltas) {
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      bool pos = false, neg = false, matches = false;
      for (const auto& d : deltas) {
        const double v = d.at(name).data.at(i);
        pos |= v > 0.0;
        neg |= v < 0.0;
        matches |= std::fabs(m.data[i] - v) <= kDeviationTolerance;
      }
      conflicts += pos && neg;
      deviations += m.data[i] != 0.0 && !matches;
    }
    st.coordinates += m.numel();
  }
  if (st.coordinates > 0) {
    st.sign_conflict_fraction = static_cast<double>(conflicts) / static_cast<double>(st.coordinates);
    st.deviation_fraction = static_cast<double>(deviations) / static_cast<double>(st.coordinates);
  }
  return st;
}

void write_dataset(const TaskDataset& data, const std::filesystem::path& path) {
  TensorMap m;
  m.entries.emplace("inputs", from_matrix(data.inputs));
  m.entries.emplace("targets", from_matrix(data.targets));
  m.metadata["task_id"] = std::to_string(data.task_id);
  write_checkpoint(m, path);
}

TaskDataset read_dataset(const std::filesystem::path& path) {
  TensorMap m = read_checkpoint(path);
  TaskDataset d;
  d.inputs = to_matrix(m.at("inputs"));
  d.targets = to_matrix(m.at("targets"));
  auto it = m.metadata.find("task_id");
  if (it != m.metadata.end()) d.task_id = std::stoi(it->second);
  return d;
}

ActivationStats calibration_stats(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs,
                                  int max_samples) {
  const Eigen::Index n = std::min<Eigen::Index>(inputs.rows(), max_samples);
  return forward_collect(spec, weights, inputs.topRows(n)).stats;
}

BenchResult run_bench(const BenchConfig& config) {
  BenchResult result;
  result.suite = make_task_suite(config.suite);
  const TaskSuite& suite = result.suite;
  const int k = config.suite.tasks;
  const auto ku = static_cast<std::size_t>(k);

  result.finetuned.resize(ku);
  parallel_for(ku, [&](std::size_t t) {
    result.finetuned[t] = config.finetune == FinetuneMode::kClosedForm
                              ? closed_form_finetune(suite.spec, suite.base, suite.train[t], config.ridge)
                              : sgd_finetune(suite.spec, suite.base, suite.train[t], config.sgd);
  });

  std::vector<ActivationStats> stats(ku);
  std::vector<double> loss_base(ku), loss_ft(ku);
  parallel_for(ku, [&](std::size_t t) {
    stats[t] = calibration_stats(suite.spec, result.finetuned[t], suite.train[t].inputs, config.calib_samples);
    loss_base[t] = evaluate(suite.spec, suite.base, suite.eval[t]);
    loss_ft[t] = evaluate(suite.spec, result.finetuned[t], suite.eval[t]);
  });

  for (Method method : config.methods) {
    MergePlan plan;
    plan.method = method;
    plan.ratios = config.ratios.empty() ? std::vector<double>(ku, 1.0 / k) : config.ratios;
    plan.lambda = config.lambda;
    plan.drop_p = config.drop_p;
    plan.order = config.order.order.empty() ? identity_order(k, config.order.policy) : config.order;
    plan.seed = config.seed;
    plan.hessian_policy = config.hessian_policy;
    MergeOutcome outcome = run_merge(plan, suite.base, result.finetuned, stats, &suite.spec);
    const InterferenceStats inter = interference_report(outcome.deltas, outcome.merged_delta);

    BenchRow avg;
    avg.method = std::string(method_name(method));
    avg.task_id = "avg";
    avg.sign_conflict_fraction = inter.sign_conflict_fraction;
    avg.deviation_fraction = inter.deviation_fraction;
    avg.kept = outcome.report.kept;
    for (std::size_t t = 0; t < ku; ++t) {
      BenchRow row = avg;
      row.task_id = std::to_string(t);
      row.loss_base = loss_base[t];
      row.loss_finetuned = loss_ft[t];
      row.loss_merged = evaluate(suite.spec, outcome.merged, suite.eval[t]);
      avg.loss_base += row.loss_base / k;
      avg.loss_finetuned += row.loss_finetuned / k;
      avg.loss_merged += row.loss_merged / k;
      result.rows.push_back(std::move(row));
    }
    result.rows.push_back(std::move(avg));
  }
  return result;
}

void write_bench_csv(std::span<const BenchRow> rows, int k, std::ostream& out) {
  out << "method,task_id,loss_base,loss_finetuned,loss_merged,sign_conflict_fraction,deviation_fraction";
  for (int i = 0; i < k; ++i) out << ",kept_" << i;
  out << "\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.task_id << ',' << fmt_num(r.loss_base) << ',' << fmt_num(r.loss_finetuned) << ','
        << fmt_num(r.loss_merged) << ',' << fmt_num(r.sign_conflict_fraction) << ','
        << fmt_num(r.deviation_fraction);
    for (int i = 0; i < k; ++i) {
      out << ',' << (static_cast<std::size_t>(i) < r.kept.size() ? std::to_string(r.kept[i]) : std::string());
    }
    out << "\n";
  }
}

}  // namespace obim

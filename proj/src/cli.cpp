// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/cli.h"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "obim/error.h"
#include "obim/parallel.h"
#include "obim/tensorstore.h"

namespace obim {

namespace fs = std::filesystem;

namespace {

std::string fmt_num(double v) { return fmt::format("{:.10g}", v); }

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  return out;
}

void configure_threads(const std::optional<unsigned>& flag) {
  if (flag) {
    set_num_threads(*flag);
    return;
  }
  if (const char* env = std::getenv("OBIM_THREADS")) {
    try {
      set_num_threads(static_cast<unsigned>(std::stoul(env)));
      return;
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidConfig, fmt::format("OBIM_THREADS: '{}' is not a thread count", env));
    }
  }
  set_num_threads(0);
}

constexpr const char* kBenchColumnsHelp =
    "CSV columns: method,task_id,loss_base,loss_finetuned,loss_merged,"
    "sign_conflict_fraction,deviation_fraction,kept_0..kept_{K-1}; task_id \"avg\" rows hold task means.";

constexpr const char* kMergeColumnsHelp =
    "Report CSV columns: method,model,ratio,kept,coordinates,max_mask_sum,overlap_coordinates,"
    "sign_conflict_fraction,deviation_fraction (one row per model).";

}  // namespace

ActivationStats cmd_stats(const StatsConfig& config, std::ostream& log) {
  const TensorMap weights = read_checkpoint(config.weights_path);
  Matrix inputs = read_calibration_inputs(config.inputs_path);
  if (config.max_samples && inputs.rows() > *config.max_samples) {
    inputs = Matrix(inputs.topRows(*config.max_samples));
  }
  ActivationStats stats = forward_collect(config.spec, weights, inputs).stats;
  write_stats(stats, config.output_path);
  for (const auto& layer : config.spec.layers) {
    log << fmt::format("layer {}: {} features\n", layer.weight_name, stats.layers.at(layer.weight_name).sqmean.size());
  }
  log << fmt::format("samples: {}\n", stats.sample_count);
  return stats;
}

MergeRunResult cmd_merge(const RunConfig& config, std::ostream& log) {
  validate_run_config(config);
  const TensorMap base = read_checkpoint(config.base_path);
  std::vector<TensorMap> models;
  for (const auto& m : config.models) models.push_back(read_checkpoint(m.path));

  std::vector<ActivationStats> stats;
  if (uses_obm(config.method)) {
    for (const auto& m : config.models) stats.push_back(read_stats(m.stats_path ? *m.stats_path : *config.stats_path));
    validate_spec(*config.spec, base);
  }

  MergeRunResult result;
  result.outcome = run_merge(plan_from_config(config), base, models, stats, config.spec ? &*config.spec : nullptr);
  result.interference = interference_report(result.outcome.deltas, result.outcome.merged_delta);

  TensorMap merged = result.outcome.merged;
  merged.metadata["merge_method"] = std::string(method_name(config.method));
  write_checkpoint(merged, config.output_path);

  const fs::path report = config.report_path ? *config.report_path : fs::path(config.output_path.string() + ".csv");
  {
    auto out = open_output(report);
    write_merge_csv(config, result, out);
  }
  if (config.masks_dir) {
    fs::create_directories(*config.masks_dir);
    for (std::size_t k = 0; k < result.outcome.masks.size(); ++k) {
      write_checkpoint(mask_to_tensors(result.outcome.masks[k]), *config.masks_dir / fmt::format("mask_{}.safetensors", k));
    }
  }
  log << fmt::format("merged {} models with {} into {}\n", models.size(), method_name(config.method),
                     config.output_path.string());
  log << fmt::format("max mask sum {}, deviation fraction {}, report {}\n", result.outcome.report.max_mask_sum,
                     fmt_num(result.interference.deviation_fraction), report.string());
  return result;
}

void write_merge_csv(const RunConfig& config, const MergeRunResult& result, std::ostream& out) {
  const auto& rep = result.outcome.report;
  out << "method,model,ratio,kept,coordinates,max_mask_sum,overlap_coordinates,sign_conflict_fraction,"
         "deviation_fraction\n";
  for (std::size_t k = 0; k < config.models.size(); ++k) {
    out << method_name(rep.method) << ',' << k << ',' << fmt_num(config.models[k].ratio) << ','
        << (k < rep.kept.size() ? rep.kept[k] : 0) << ',' << rep.coordinates << ',' << rep.max_mask_sum << ','
        << rep.overlap_coordinates << ',' << fmt_num(result.interference.sign_conflict_fraction) << ','
        << fmt_num(result.interference.deviation_fraction) << "\n";
  }
}

BenchResult cmd_bench(const BenchRunConfig& config, std::ostream& out) {
  BenchResult result = run_bench(config.bench);
  if (config.output_path) {
    auto file = open_output(*config.output_path);
    write_bench_csv(result.rows, config.bench.suite.tasks, file);
  } else {
    write_bench_csv(result.rows, config.bench.suite.tasks, out);
  }
  return result;
}

InterferenceStats cmd_report(const fs::path& base_path, const std::vector<fs::path>& model_paths,
                             const fs::path& merged_path, std::ostream& out) {
  const TensorMap base = read_checkpoint(base_path);
  std::vector<TaskVector> deltas;
  for (const auto& p : model_paths) deltas.push_back(compute_task_vector(read_checkpoint(p), base));
  const TaskVector merged = compute_task_vector(read_checkpoint(merged_path), base);
  const InterferenceStats st = interference_report(deltas, merged);
  out << "sign_conflict_fraction,deviation_fraction,coordinates\n";
  out << fmt_num(st.sign_conflict_fraction) << ',' << fmt_num(st.deviation_fraction) << ',' << st.coordinates << "\n";
  return st;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Checkpoint merging toolkit: saliency trimming and iterative merging of task vectors", "obim"};
  app.require_subcommand(1);

  std::optional<unsigned> threads;
  std::string config_path;

  auto* stats = app.add_subcommand("stats", "Collect per-layer calibration statistics");
  std::string spec_path, weights_path, inputs_path, stats_out;
  std::optional<int> max_samples;
  stats->add_option("--config", config_path, "JSON config {spec, weights, inputs, output, max_samples}");
  stats->add_option("--spec", spec_path, "Model spec JSON file");
  stats->add_option("--weights", weights_path, "Model checkpoint");
  stats->add_option("--inputs", inputs_path, "Calibration file with an \"inputs\" tensor [N, input_dim]");
  stats->add_option("--output", stats_out, "Stats file to write");
  stats->add_option("--max-samples", max_samples, "Use at most this many calibration samples");
  stats->add_option("--threads", threads, "Worker threads (default: OBIM_THREADS or all cores)");

  auto* merge = app.add_subcommand("merge", "Merge fine-tuned checkpoints into their base");
  merge->footer(kMergeColumnsHelp);
  std::optional<std::uint64_t> seed;
  std::string method, output, report_path;
  bool print_config = false;
  merge->add_option("--config", config_path, "Merge plan JSON")->required();
  merge->add_option("--seed", seed, "Override seed");
  merge->add_option("--method", method, "Override method (TA, TIES, DARE, TIES+OBM, TIES+IM, OBIM)");
  merge->add_option("--output", output, "Override merged checkpoint path");
  merge->add_option("--report", report_path, "Override report CSV path");
  merge->add_flag("--print-config", print_config, "Print the effective config as JSON and exit");
  merge->add_option("--threads", threads, "Worker threads (default: OBIM_THREADS or all cores)");

  auto* bench = app.add_subcommand("bench", "Run the synthetic multi-task benchmark");
  bench->footer(kBenchColumnsHelp);
  std::string bench_out;
  bench->add_option("--config", config_path, "Bench JSON config");
  bench->add_option("--seed", seed, "Override merge seed and suite seed");
  bench->add_option("--output", bench_out, "CSV path (default: stdout)");
  bench->add_option("--threads", threads, "Worker threads (default: OBIM_THREADS or all cores)");

  auto* report = app.add_subcommand("report", "Interference statistics of a merged checkpoint");
  std::string base_path, merged_path, report_out;
  std::vector<std::string> model_paths;
  report->add_option("--base", base_path, "Base checkpoint")->required();
  report->add_option("--model", model_paths, "Fine-tuned checkpoint (repeatable)")->required();
  report->add_option("--merged", merged_path, "Merged checkpoint")->required();
  report->add_option("--output", report_out, "CSV path (default: stdout)");
  report->add_option("--threads", threads, "Worker threads (default: OBIM_THREADS or all cores)");

  std::vector<std::string> argv_store{"obim"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    configure_threads(threads);
    if (stats->parsed()) {
      StatsConfig sc;
      if (!config_path.empty()) {
        sc = parse_stats_config(read_json_file(config_path), config_path);
      } else {
        if (spec_path.empty() || weights_path.empty() || inputs_path.empty() || stats_out.empty()) {
          throw Error(ErrorCode::kInvalidConfig, "stats: give --config or all of --spec --weights --inputs --output");
        }
        sc.spec = model_spec_from_json(read_json_file(spec_path));
        sc.weights_path = weights_path;
        sc.inputs_path = inputs_path;
        sc.output_path = stats_out;
      }
      if (!weights_path.empty() && !config_path.empty()) sc.weights_path = weights_path;
      if (!stats_out.empty()) sc.output_path = stats_out;
      if (max_samples) sc.max_samples = *max_samples;
      cmd_stats(sc, out);
    } else if (merge->parsed()) {
      json j = read_json_file(config_path);
      if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, "config must be a JSON object");
      if (seed) j["seed"] = *seed;
      if (!method.empty()) j["method"] = method;
      RunConfig rc = parse_run_config(j, config_path);
      if (!output.empty()) rc.output_path = output;
      if (!report_path.empty()) rc.report_path = fs::path(report_path);
      if (print_config) {
        out << run_config_to_json(rc).dump(2) << "\n";
        return 0;
      }
      cmd_merge(rc, out);
    } else if (bench->parsed()) {
      BenchRunConfig bc = config_path.empty() ? parse_bench_config(json::object())
                                              : parse_bench_config(read_json_file(config_path), config_path);
      if (seed) {
        bc.bench.seed = *seed;
        bc.bench.suite.seed = *seed;
      }
      if (!bench_out.empty()) bc.output_path = fs::path(bench_out);
      cmd_bench(bc, out);
    } else if (report->parsed()) {
      std::vector<fs::path> mp(model_paths.begin(), model_paths.end());
      if (report_out.empty()) {
        cmd_report(base_path, mp, merged_path, out);
      } else {
        auto file = open_output(report_out);
        cmd_report(base_path, mp, merged_path, file);
      }
    }
  } catch (const Error& e) {
    err << fmt::format("obim: error[{}] (config: {}): {}\n", error_code_name(e.code()),
                       config_path.empty() ? "-" : config_path, e.what());
    return 1;
  } catch (const std::exception& e) {
    err << fmt::format("obim: error[internal] (config: {}): {}\n", config_path.empty() ? "-" : config_path,
                       e.what());
    return 1;
  }
  return 0;
}

}  // namespace obim

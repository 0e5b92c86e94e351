// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

// JSON configuration for the command-line tool. Relative paths inside a
// config file are resolved against the directory holding that file.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "obim/bench.h"
#include "obim/calib.h"
#include "obim/merge.h"

namespace obim {

using json = nlohmann::json;

json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const json& j);

struct ModelEntry {
  std::filesystem::path path;
  double ratio = 0.0;
  std::optional<std::filesystem::path> stats_path;

  bool operator==(const ModelEntry&) const = default;
};

struct RunConfig {
  std::filesystem::path base_path;
  std::vector<ModelEntry> models;
  Method method = Method::kObim;
  double lambda = 1.0;
  double drop_p = 0.0;
  MergeOrder order;
  std::uint64_t seed = 0;
  std::filesystem::path output_path;
  std::optional<std::filesystem::path> report_path;  // default: <output>.csv
  std::optional<std::filesystem::path> masks_dir;
  std::optional<ModelSpec> spec;
  std::optional<std::filesystem::path> stats_path;  // shared by models without their own
  RatioBasis ratio_basis = RatioBasis::kTotal;
  HessianPolicy hessian_policy = HessianPolicy::kMeanOfSquares;
  bool global_rank_magnitude = false;

  bool operator==(const RunConfig&) const = default;
};

// Parses and validates a merge config. `source` names the file in errors and
// anchors relative paths. Unavailable methods and ratio constraints fail here.
RunConfig parse_run_config(const json& j, const std::filesystem::path& source = {});
RunConfig load_run_config(const std::filesystem::path& path);
// Effective configuration; parse_run_config(run_config_to_json(c)) == c.
json run_config_to_json(const RunConfig& config);
MergePlan plan_from_config(const RunConfig& config);
void validate_run_config(const RunConfig& config);

struct StatsConfig {
  ModelSpec spec;
  std::filesystem::path weights_path;
  std::filesystem::path inputs_path;
  std::filesystem::path output_path;
  std::optional<int> max_samples;
};

StatsConfig parse_stats_config(const json& j, const std::filesystem::path& source = {});

struct BenchRunConfig {
  BenchConfig bench;
  std::optional<std::filesystem::path> output_path;  // CSV; stdout when absent
};

BenchRunConfig parse_bench_config(const json& j, const std::filesystem::path& source = {});

json read_json_file(const std::filesystem::path& path);

}  // namespace obim

// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "obim/bench.h"
#include "obim/config.h"
#include "obim/merge.h"

namespace obim {

// Writes the stats file and prints one line per layer plus the sample count.
ActivationStats cmd_stats(const StatsConfig& config, std::ostream& log);

struct MergeRunResult {
  MergeOutcome outcome;
  InterferenceStats interference;
};

// Writes the merged checkpoint, the CSV report and (optionally) the masks.
MergeRunResult cmd_merge(const RunConfig& config, std::ostream& log);

// Merge report columns:
// method,model,ratio,kept,coordinates,max_mask_sum,overlap_coordinates,
// sign_conflict_fraction,deviation_fraction
void write_merge_csv(const RunConfig& config, const MergeRunResult& result, std::ostream& out);

BenchResult cmd_bench(const BenchRunConfig& config, std::ostream& out);

// Interference statistics of a merged checkpoint against its inputs.
// Columns: sign_conflict_fraction,deviation_fraction,coordinates
InterferenceStats cmd_report(const std::filesystem::path& base, const std::vector<std::filesystem::path>& models,
                             const std::filesystem::path& merged, std::ostream& out);

// Entry point of the `obim` tool. Returns the process exit code: 0 on
// success, 1 on a runtime error, 2 on a usage error. `args` excludes the
// program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace obim

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tamdp/config.hpp"

namespace tamdp {

/// Named scalar results plus named series, in insertion order.
struct Metrics {
  std::vector<std::pair<std::string, double>> values;
  std::map<std::string, std::vector<double>> series;

  void set(const std::string& name, double value);
  std::optional<double> get(const std::string& name) const;
  /// Throws LabError when absent.
  double at(const std::string& name) const;
};

struct SeedOutcome {
  double cell_value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Metrics metrics;
};

struct CellOutcome {
  double value = 0.0;
  int n_ok = 0;
  Metrics metrics;
};

struct ExperimentResult {
  ExperimentKind kind = ExperimentKind::ConvergenceK;
  std::filesystem::path root;
  std::vector<SeedOutcome> runs;  // cell-major, then seed order
  std::vector<CellOutcome> cells;
  Metrics overall;

  int n_failed() const;
  const CellOutcome* cell(double value) const;
};

struct RunOptions {
  /// Overrides config.out_dir.
  std::optional<std::string> out_dir;
  int jobs = 1;
  /// Added to every configured seed.
  std::int64_t seed_offset = 0;
  /// Called once per finished (cell, seed) job, from the worker thread.
  std::function<void(const SeedOutcome&, int done, int total)> on_progress;
};

/// Parses TAMDP_LAB_SEED_OFFSET; 0 when unset. Throws ConfigError when malformed.
std::int64_t seed_offset_from_env();

/// Runs every (grid value, seed) job of the experiment and writes
///   <out>/<experiment>/cell-<v>/seed-<s>/{runlog.csv, report.json}
///   <out>/<experiment>/{summary.csv, runs.csv, report.json, config.txt}
/// plus failures.json when any job failed. Failed jobs are excluded from
/// the aggregates; the run itself only throws for I/O or config errors.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Column header used for the swept field in CSV output.
std::string grid_column(const std::string& field);

}  // namespace tamdp

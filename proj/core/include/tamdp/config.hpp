#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tamdp/env.hpp"
#include "tamdp/optim.hpp"
#include "tamdp/rewards.hpp"

namespace tamdp {

enum class ExperimentKind {
  ConvergenceK,
  GroupSize,
  Decomposition,
  GeneralizationDepth,
  AlignmentDynamics,
  BetaSweep,
  BoundCheck,
};

std::string to_string(ExperimentKind kind);
std::optional<ExperimentKind> parse_experiment_kind(const std::string& text);

/// The swept field and its values. `field` is one of k, group_size,
/// alpha_target, d_max, kl_coef; an empty field means a single cell.
struct GridSpec {
  std::string field;
  std::vector<double> values;
};

/// Experiment-level knobs that are not part of the environment, reward or optimizer.
struct AnalysisSettings {
  int eval_rollouts = 10000;
  int variance_replicates = 200;
  GrpoMode variance_mode = GrpoMode::Decomposed;
  int rms_window = 201;
  double threshold = 0.1;
  int checkpoint_every = 500;
  int alignment_rollouts = 4000;
  double kl_target = 0.2;
  int fisher_per_prompt = 16;
  double fisher_ridge = 1e-6;
  /// Fraction of generation states used as training prompts in beta-sweep.
  double train_fraction = 0.5;
  bool lipschitz_probe = false;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::ConvergenceK;
  TaMdpSpec env;
  RewardSpec rewards;
  /// When set and rewards.weights is empty, weights are r_max / K for every cell.
  std::optional<double> r_max;
  /// When set and rewards.weights is empty, every component gets this weight (r_max = K w).
  std::optional<double> component_weight;
  GrpoConfig optim;
  GridSpec grid;
  std::vector<std::uint64_t> seeds;
  double n_train_prompts = 100.0;
  double delta = 0.05;
  std::string out_dir = "out";
  AnalysisSettings analysis;
};

struct Diagnostic {
  std::string field;
  std::string message;
};

std::string format_diagnostics(const std::vector<Diagnostic>& diags);

/// Parses `section.key = value` lines. Blank lines and text after '#' are
/// ignored; lists are comma separated. Unknown, duplicate and malformed keys
/// are appended to `diags` and parsing continues.
ExperimentConfig parse_config(const std::string& text, std::vector<Diagnostic>& diags);

/// Schema and feasibility checks; returns every violation found.
std::vector<Diagnostic> validate_config(const ExperimentConfig& config);

/// Reads, parses and validates; throws ConfigError listing every violation.
ExperimentConfig load_config(const std::string& path);

/// Reward spec for one cell, with weights filled in from r_max when needed.
RewardSpec cell_rewards(const ExperimentConfig& config, int k, double alpha_target);

/// Applies one grid value to a copy of the config.
ExperimentConfig cell_config(const ExperimentConfig& config, double value);

/// Text form accepted by parse_config.
std::string to_config_text(const ExperimentConfig& config);

}  // namespace tamdp

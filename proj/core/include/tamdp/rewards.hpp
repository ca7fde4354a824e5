#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tamdp/env.hpp"

namespace tamdp {

enum class ComponentKind { Format, Accuracy, ToolExec };

std::string to_string(ComponentKind kind);
/// Parses "format", "accuracy" or "tool_exec"; throws ConfigError otherwise.
ComponentKind parse_component_kind(const std::string& text);

/// K weighted verifiable components. Weights sum to r_max.
struct RewardSpec {
  int k = 2;
  std::vector<double> weights;
  std::vector<ComponentKind> kinds;
  double alpha_target = 0.0;
  std::uint64_t reward_seed = 0;

  double r_max() const;
  void validate() const;

  /// Uniform weights r_max / K and the default kind cycle
  /// format, accuracy, tool_exec, accuracy, format, ...
  static RewardSpec uniform(int k, double r_max, double alpha_target = 0.0, std::uint64_t reward_seed = 0);
  static std::vector<ComponentKind> default_kinds(int k);
};

struct AlignmentEstimate {
  /// Empty when the composite variance is at or below 1e-12.
  std::optional<double> alpha_hat;
  std::size_t n_samples = 0;
  double numerator = 0.0;
  double denominator = 0.0;
};

/// Reward evaluation bound to one environment. Holds a non-owning pointer
/// to `env`, which must outlive the model.
///
/// Raw component values:
///   format     1 if the action sequence contains the open marker followed
///              later by the close marker, else 0;
///   accuracy   max(0, 1 - dist(terminal, goal) / diameter) on the graph of
///              token transitions over generation and return states;
///   tool_exec  1 if no issued call hit a disabled tool, else 0.
/// Each raw value is mixed with a correlated latent keyed by the whole
/// trajectory (prompt, state-action path, terminal state): R_k = clamp(rho * latent_k + (1 - rho) * raw_k, 0, 1)
/// with rho = |alpha_target|.
class RewardModel {
 public:
  RewardModel(const TaMdp& env, RewardSpec spec);

  const RewardSpec& spec() const noexcept { return spec_; }
  const TaMdp& env() const noexcept { return *env_; }
  int k() const noexcept { return spec_.k; }

  std::vector<double> evaluate(const Trajectory& traj) const;
  /// Evaluates and stores the components in traj.rewards.
  void fill(Trajectory& traj) const;

  double raw_component(int k, const Trajectory& traj) const;
  int goal_for(int prompt_id, int variant) const;
  /// Shortest token-transition distance from `state` to the goal of `variant`; -1 if unreachable.
  int distance_to_goal(int state, int variant) const;
  int diameter() const noexcept { return diameter_; }
  std::pair<int, int> format_markers(int variant) const;
  /// The K correlated uniforms attached to this trajectory.
  std::vector<double> latent_for(const Trajectory& traj) const;

 private:
  const TaMdp* env_;
  RewardSpec spec_;
  std::vector<int> variant_;
  std::vector<int> goals_;
  std::vector<std::vector<int>> dist_;  // per goal variant, over all states
  int diameter_ = 0;
  Eigen::MatrixXd latent_chol_;
};

/// Convenience wrapper that binds a temporary RewardModel.
std::vector<double> eval_components(const Trajectory& traj, const TaMdp& env, const RewardSpec& spec);

/// sum_k w_k R_k.
double composite(std::span<const double> components, std::span<const double> weights);

/// n draws of K-vectors of uniforms whose Gaussian copula has equicorrelation
/// `alpha_target`. Returned as an n x K matrix.
Eigen::MatrixXd make_latents(double alpha_target, int k, std::uint64_t reward_seed, int n);

/// Alignment statistic from an n x K matrix of component samples using
/// unbiased (n - 1) covariances.
AlignmentEstimate estimate_alignment(const Eigen::MatrixXd& samples, std::span<const double> weights);

/// Delete-one jackknife standard error of alpha_hat; empty if any
/// leave-one-out estimate is undefined.
std::optional<double> alignment_stderr(const Eigen::MatrixXd& samples, std::span<const double> weights);

/// CSV with columns prompt_id, sample_id, R_1..R_K, composite.
std::string components_to_csv(std::span<const Trajectory> trajs, std::span<const double> weights);

}  // namespace tamdp

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tamdp/env.hpp"
#include "tamdp/errors.hpp"
#include "tamdp/policy.hpp"
#include "tamdp/rewards.hpp"

namespace tamdp {

enum class GrpoMode { Joint, Decomposed, Plain };

std::string to_string(GrpoMode mode);
GrpoMode parse_grpo_mode(const std::string& text);

struct GrpoConfig {
  int group_size = 16;
  double kl_coef = 0.01;
  double norm_eps = 1e-4;
  double clip_eps = 0.2;
  int iters = 5000;
  double lipschitz_estimate = 1.0;
  GrpoMode mode = GrpoMode::Joint;
  int inner_epochs = 1;
  int prompts_per_iter = 1;
  std::uint64_t opt_seed = 0;

  /// 1 / (L sqrt(T)); never stored separately.
  double step_size() const;
  void validate() const;
};

/// G responses to one prompt together with their rewards and sampling log-probabilities.
struct GroupBatch {
  int prompt_id = -1;
  std::vector<Trajectory> trajectories;
  Eigen::MatrixXd component_rewards;  // G x K
  Eigen::VectorXd composite_rewards;  // G
  Eigen::VectorXd old_log_probs;      // G

  int size() const noexcept { return static_cast<int>(trajectories.size()); }
};

GroupBatch sample_group(const TaMdp& env, const PolicyParams& policy, const RewardModel& rewards, int prompt_id,
                        int group_size, Rng& rng);

/// (R_i - mean) / (population std + eps); exactly zero when all rewards are equal.
Eigen::VectorXd group_advantages(std::span<const double> rewards, double norm_eps);

/// Mean over samples of min(r A, clip(r, 1 - eps, 1 + eps) A).
double clipped_surrogate(std::span<const double> ratios, std::span<const double> advantages, double clip_eps);

struct GradientDiagnostics {
  double pg_norm = 0.0;
  double kl_value = 0.0;
  double surrogate = 0.0;
  double clip_fraction = 0.0;
  /// Within-batch estimate of tr Cov of the policy-gradient part, treating
  /// the G per-sample terms as independent.
  double sample_variance = 0.0;
};

struct GradientResult {
  Eigen::VectorXd gradient;
  GradientDiagnostics diagnostics;
};

/// Ascent direction of the clipped surrogate minus beta * KL(pi || ref),
/// averaged over batches. Joint mode normalizes the composite reward,
/// decomposed mode normalizes each component and sums w_k times the
/// per-component gradients, plain mode uses raw composite rewards with a
/// mean baseline. A sample whose clipped branch is active contributes no
/// policy-gradient term.
GradientResult grpo_gradient(const PolicyParams& policy, const PolicyParams& old_policy, const PolicyParams& ref_policy,
                             const TaMdp& env, std::span<const GroupBatch> batches, const GrpoConfig& config,
                             std::span<const double> weights);

struct IterationRecord {
  int t = 0;
  double grad_norm = 0.0;
  double objective_estimate = 0.0;
  double kl_value = 0.0;
  std::optional<double> alpha_hat;
  std::vector<double> component_means;
  double grad_variance_estimate = 0.0;
};

struct RunLog {
  GrpoConfig config;
  TaMdpSpec env_spec;
  RewardSpec reward_spec;
  std::uint64_t seed = 0;
  std::vector<IterationRecord> records;

  std::vector<double> grad_norms() const;
  /// One row per iteration.
  std::string to_csv() const;
  /// Final metrics, config echo and seeds as a JSON document.
  std::string summary_json() const;
};

/// Thrown when the objective estimate becomes non-finite; carries the log up to the failing iteration.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, RunLog partial) : NumericError(what), partial_(std::move(partial)) {}
  const RunLog& partial() const noexcept { return partial_; }

 private:
  RunLog partial_;
};

struct TrainOptions {
  /// Prompt distribution over generation states; empty means env.initial_dist().
  std::vector<double> prompt_dist;
  /// Starting parameters; defaults to the reference policy.
  std::optional<PolicyParams> init;
  /// Called after every iteration with the updated policy (for checkpoint evaluation).
  std::function<void(int, const PolicyParams&)> on_iteration;
  /// Called with each iteration's sampled groups before the update.
  std::function<void(int, std::span<const GroupBatch>)> on_batches;
};

struct TrainResult {
  PolicyParams policy;
  RunLog log;
};

/// Runs config.iters GRPO iterations with step size 1 / (L sqrt(T)). Fully
/// determined by (env, rewards, config, ref_policy, seed, options).
TrainResult grpo_train(const TaMdp& env, const RewardModel& rewards, const GrpoConfig& config,
                       const PolicyParams& ref_policy, std::uint64_t seed, const TrainOptions& options = {});

/// Trace of the sample covariance of grpo_gradient over independent groups at fixed parameters.
double grad_variance(const PolicyParams& policy, const PolicyParams& old_policy, const PolicyParams& ref_policy,
                     const TaMdp& env, const RewardModel& rewards, const GrpoConfig& config, int n_replicates,
                     std::uint64_t seed, std::span<const double> prompt_dist = {});

/// Upper estimate of the smoothness constant: max ||g(theta + delta) - g(theta)|| / ||delta||
/// over random perturbations, using common random numbers for both gradient estimates.
double lipschitz_probe(const PolicyParams& policy, const PolicyParams& ref_policy, const TaMdp& env,
                       const RewardModel& rewards, const GrpoConfig& config, std::uint64_t seed, int n_directions = 20,
                       double radius = 0.1, int groups_per_estimate = 64);

struct RolloutStats {
  double mean_composite = 0.0;
  double stderr_composite = 0.0;
  Eigen::MatrixXd components;  // n x K
  Eigen::VectorXd composites;  // n
  std::vector<int> prompts;
  std::vector<double> visitation;
};

/// Monte-Carlo rollouts with prompts drawn from `prompt_dist`.
RolloutStats evaluate_policy(const TaMdp& env, const PolicyParams& policy, const RewardModel& rewards,
                             std::span<const double> prompt_dist, int n_rollouts, std::uint64_t seed);

}  // namespace tamdp

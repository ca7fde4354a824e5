#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tamdp/env.hpp"
#include "tamdp/optim.hpp"
#include "tamdp/policy.hpp"
#include "tamdp/rewards.hpp"

namespace tamdp {

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
  double slope_stderr = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

/// Ordinary least squares of y on x; needs at least 3 points and non-constant x.
LinearFit ols(std::span<const double> x, std::span<const double> y);

struct RateFit {
  double gamma_hat = 0.0;
  double stderr = 0.0;
  std::size_t n_points = 0;
};

/// Fits ||g_t|| ~ t^-gamma. Drops the first 20% of iterations, then
/// regresses log ||g_t|| on log t over up to 200 geometrically spaced t in
/// the remaining window. Needs at least 50 strictly positive values.
RateFit fit_rate_exponent(std::span<const double> grad_norms);

/// sqrt of the mean of g^2 over all series and a centered window around
/// each t (truncated at the ends). Series must share one length.
std::vector<double> pooled_rms(std::span<const std::vector<double>> series, int window);

/// Median-filtered (window 51) series; the window is truncated at the ends.
std::vector<double> median_filter(std::span<const double> series, int window = 51);

/// First 1-based t whose median-filtered value is <= eps.
std::optional<int> iters_to_threshold(std::span<const double> grad_norms, double eps, int window = 51);

/// 2 L j_gap / sqrt(T) + L (s_base + K s_comp) / (G sqrt(T)) + 2 beta r_max^2 / sqrt(T).
double convergence_bound(double j_gap, double lipschitz, double sigma_base2, double sigma_comp2, int k, int group_size,
                         double beta, double r_max, int iters);

/// L^2 (s_base + K s_comp)^2 / (G^2 eps^4), with the hidden constant set to 1.
double sample_complexity(double lipschitz, double sigma_base2, double sigma_comp2, int k, int group_size, double eps);

struct ConvergenceReport {
  double gamma_hat = 0.0;
  double gamma_stderr = 0.0;
  double grad_norm_at_T = 0.0;
  double bound_rhs = 0.0;
  double effective_sigma2 = 0.0;
  double threshold = 0.0;
  std::optional<int> iters_to_threshold;
};

/// Rate fit and bound evaluation for one training run.
ConvergenceReport convergence_report(const RunLog& log, double j_gap, double sigma_base2, double sigma_comp2,
                                     double threshold);

/// (K(K-1)/(2G)) sum_{k<k'} w_k w_k' |Cov_kk'| + ((K-1)/G) sigma_norm2.
double decomposition_bound(const Eigen::MatrixXd& covariances, std::span<const double> weights, int group_size,
                           double sigma_norm2);

/// Max over k of the (n-1) sample variance of A^(k)_i - A^comp_i within the
/// group, where A^comp normalizes the composite reward. Zero for a group
/// with every component constant.
double estimate_sigma_norm2(const GroupBatch& batch, std::span<const double> weights, double norm_eps);

/// Unbiased K x K sample covariance of the rows of `samples`.
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& samples);

struct DecompositionReport {
  double j_joint = 0.0;
  double j_decomposed = 0.0;
  double empirical_gap = 0.0;
  double gap_stderr = 0.0;
  double bound_rhs = 0.0;
  double sigma_norm2 = 0.0;
  Eigen::MatrixXd covariances;
  std::optional<double> alpha_hat;
  /// bound / gap, only when the gap is positive.
  std::optional<double> tightness;
  std::size_t n_seeds = 0;
  std::vector<RunLog> joint_logs;
  std::vector<RunLog> decomposed_logs;
};

struct DecompositionOptions {
  int n_eval = 10000;
  std::vector<double> prompt_dist;
};

/// Trains joint and decomposed runs from the uniform policy with shared
/// seeds, evaluates J_comp = E[R_comp] - beta KL of both final policies on
/// n_eval fresh rollouts and averages over `seeds`. Covariances come from
/// the joint policy's evaluation rollouts; sigma_norm2 is the mean of
/// per-batch estimates along the joint run.
DecompositionReport measure_decomposition_gap(const TaMdp& env, const RewardSpec& reward_spec, const GrpoConfig& config,
                                              std::span<const std::uint64_t> seeds,
                                              const DecompositionOptions& options = {});

/// Tr((H_S + ridge I)^-1 H_T). Rows and columns that are zero in both
/// matrices contribute nothing and are dropped before the solve.
double effective_dimension(const FisherPair& fishers);

struct GeneralizationTerms {
  double shift = 0.0;
  double complexity = 0.0;
  double group = 0.0;
  double total = 0.0;
};

/// r_max sqrt(2 kl / n), r_max d_max sqrt(d_eff ln(n / delta) / n), 2 r_max d_max / sqrt(G).
/// An infinite kl_shift gives an infinite shift term.
GeneralizationTerms generalization_bound(double r_max, double kl_shift, double n, double d_eff, double delta,
                                         int d_max, int group_size);

/// KL(p || q) for categorical distributions; +inf when p puts mass where q has none.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// source(s) exp(lambda s / (n - 1)) / Z with lambda >= 0 found by bisection
/// so that KL(target || source) = kl_target within 1e-6.
std::vector<double> make_tilted_distribution(std::span<const double> source, double kl_target);

struct FisherOptions {
  int per_prompt = 16;
  double ridge = 1e-6;
};

/// H_S and H_T from shared trajectories: every prompt in either support gets
/// `per_prompt` rollouts whose score outer products enter H_S with weight
/// source(s) and H_T with weight target(s).
FisherPair fisher_pair(const PolicyParams& policy, const TaMdp& env, std::span<const double> source,
                       std::span<const double> target, const FisherOptions& options, std::uint64_t seed);

struct GeneralizationReport {
  double v_source = 0.0;
  double v_target = 0.0;
  double v_source_stderr = 0.0;
  double v_target_stderr = 0.0;
  double gap = 0.0;
  double gap_stderr = 0.0;
  double kl_shift = 0.0;
  bool kl_infinite = false;
  GeneralizationTerms terms;
  double d_eff = 0.0;
  double d_eff_ref = 0.0;
  double dims_ratio = 0.0;
  double dims_ratio_ref = 0.0;
  int dim = 0;
  double n = 0.0;
  double delta = 0.0;
};

struct GeneralizationOptions {
  int n_rollouts = 10000;
  double n_train_prompts = 100.0;
  double delta = 0.05;
  int group_size = 16;
  FisherOptions fisher;
  /// Skip the Fisher solves (d_eff and dims_ratio stay 0).
  bool skip_fisher = false;
};

GeneralizationReport measure_generalization_gap(const PolicyParams& policy, const PolicyParams& ref_policy,
                                                const TaMdp& env, const RewardModel& rewards,
                                                std::span<const double> source, std::span<const double> target,
                                                const GeneralizationOptions& options, std::uint64_t seed);

}  // namespace tamdp

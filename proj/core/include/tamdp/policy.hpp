#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tamdp/env.hpp"
#include "tamdp/rng.hpp"

namespace tamdp {

/// Tabular softmax parameters. Row r holds one logit per structurally
/// available action of the r-th policy-controlled state; rows are stored
/// back to back in a single flat vector of length dim().
class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(std::vector<int> widths);

  /// All-zero logits (uniform policy) shaped for `env`.
  static PolicyParams uniform(const TaMdp& env);

  int rows() const noexcept { return static_cast<int>(widths_.size()); }
  int width(int row) const { return widths_.at(static_cast<std::size_t>(row)); }
  Eigen::Index offset(int row) const { return offsets_.at(static_cast<std::size_t>(row)); }
  Eigen::Index dim() const noexcept { return theta_.size(); }

  const Eigen::VectorXd& theta() const noexcept { return theta_; }
  Eigen::VectorXd& theta() noexcept { return theta_; }

  auto row(int r) { return theta_.segment(offset(r), width(r)); }
  auto row(int r) const { return theta_.segment(offset(r), width(r)); }

  /// Softmax over the first `n` logits of `row`, written to out[0..n).
  void softmax(int row, int n, std::span<double> out) const;
  /// Log-softmax probability of `action` among the first `n` logits of `row`.
  double log_softmax(int row, int n, int action) const;

  bool all_finite() const { return theta_.allFinite(); }
  bool same_shape(const PolicyParams& other) const { return widths_ == other.widths_; }
  const std::vector<int>& widths() const noexcept { return widths_; }

 private:
  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Eigen::VectorXd theta_;
};

/// Source/target Fisher information pair with the ridge used to invert H_S.
struct FisherPair {
  Eigen::MatrixXd h_source;
  Eigen::MatrixXd h_target;
  double ridge = 0.0;

  /// Symmetric within 1e-8 and smallest eigenvalue >= -1e-8; throws NumericError otherwise.
  void validate() const;
};

/// Throws DimensionError unless `policy` is shaped for `env`.
void check_compatible(const PolicyParams& policy, const TaMdp& env);

/// Sum of log softmax probabilities over policy decisions; tool hops contribute nothing.
double log_prob(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj);

/// Exact score vector d/dtheta log pi(traj).
Eigen::VectorXd grad_log_prob(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj);

/// out += coef * grad_log_prob(traj), without allocating.
void add_score(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj, double coef,
               Eigen::Ref<Eigen::VectorXd> out);

/// Score as sorted (index, value) pairs with duplicate indices merged.
std::vector<std::pair<Eigen::Index, double>> sparse_score(const PolicyParams& policy, const TaMdp& env,
                                                          const Trajectory& traj);

/// sum_r visitation[r] * KL(pi(.|r) || ref(.|r)) over structurally available actions.
/// `visitation` is indexed by policy row and must sum to 1.
double kl_to_ref(const PolicyParams& policy, const PolicyParams& ref, std::span<const double> visitation);

/// Gradient of kl_to_ref with respect to the policy logits, visitation held fixed.
Eigen::VectorXd kl_gradient(const PolicyParams& policy, const PolicyParams& ref, std::span<const double> visitation);

/// Empirical distribution of policy-row visits over a set of trajectories.
std::vector<double> row_visitation(const TaMdp& env, std::span<const Trajectory> trajs);

/// Monte-Carlo Fisher information E[score score^T] + ridge * I, with prompts
/// drawn from `prompt_dist` (indexed by generation state).
Eigen::MatrixXd fisher_matrix(const PolicyParams& policy, const TaMdp& env, std::span<const double> prompt_dist,
                              int n_samples, Rng& rng, double ridge = 1e-6);

/// Accumulates weighted score outer products; used where several Fisher
/// matrices must share the same sampled trajectories.
class FisherAccumulator {
 public:
  explicit FisherAccumulator(Eigen::Index dim) : h_(Eigen::MatrixXd::Zero(dim, dim)) {}
  void add(std::span<const std::pair<Eigen::Index, double>> score, double weight);
  /// Symmetrized accumulated matrix plus ridge * I.
  Eigen::MatrixXd finish(double ridge) const;

 private:
  Eigen::MatrixXd h_;  // upper triangle only
};

/// Returns policy + step_size * gradient; throws NumericError on non-finite input.
PolicyParams apply_update(const PolicyParams& policy, const Eigen::VectorXd& gradient, double step_size);

/// Flat CSV with header "state,action,logit", one row per parameter.
std::string policy_to_csv(const PolicyParams& policy, const TaMdp& env);
PolicyParams policy_from_csv(const std::string& csv, const TaMdp& env);

}  // namespace tamdp

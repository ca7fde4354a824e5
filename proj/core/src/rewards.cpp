#include "tamdp/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include "tamdp/errors.hpp"
#include "tamdp/rng.hpp"

namespace tamdp {

namespace {

enum Stream : std::uint64_t { kLatent = 11, kVariantGoal = 12 };

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

std::vector<int> bfs(const std::vector<std::vector<int>>& adj, int source) {
  std::vector<int> dist(adj.size(), -1);
  std::deque<int> queue{source};
  dist[static_cast<std::size_t>(source)] = 0;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    for (int v : adj[static_cast<std::size_t>(u)]) {
      if (dist[static_cast<std::size_t>(v)] < 0) {
        dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
        queue.push_back(v);
      }
    }
  }
  return dist;
}

}  // namespace

std::string to_string(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::Format:
      return "format";
    case ComponentKind::Accuracy:
      return "accuracy";
    case ComponentKind::ToolExec:
      return "tool_exec";
  }
  return "unknown";
}

ComponentKind parse_component_kind(const std::string& text) {
  if (text == "format") return ComponentKind::Format;
  if (text == "accuracy") return ComponentKind::Accuracy;
  if (text == "tool_exec") return ComponentKind::ToolExec;
  throw ConfigError("rewards.kinds", "unknown component kind '" + text + "'");
}

double RewardSpec::r_max() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

void RewardSpec::validate() const {
  if (k < 1) throw ConfigError("rewards.k", "must be >= 1");
  if (static_cast<int>(weights.size()) != k) throw ConfigError("rewards.weights", "expected K weights");
  for (double w : weights)
    if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("rewards.weights", "weights must be positive and finite");
  if (static_cast<int>(kinds.size()) != k) throw ConfigError("rewards.kinds", "expected K component kinds");
  if (!(std::abs(alpha_target) <= 0.95)) throw ConfigError("rewards.alpha_target", "must lie in [-0.95, 0.95]");
  if (k >= 2 && alpha_target <= -1.0 / (k - 1))
    throw ConfigError("rewards.alpha_target", "below the feasible equicorrelation bound -1/(K-1)");
}

std::vector<ComponentKind> RewardSpec::default_kinds(int k) {
  static constexpr ComponentKind cycle[] = {ComponentKind::Format, ComponentKind::Accuracy, ComponentKind::ToolExec,
                                            ComponentKind::Accuracy};
  std::vector<ComponentKind> kinds;
  for (int i = 0; i < k; ++i) kinds.push_back(cycle[i % 4]);
  return kinds;
}

RewardSpec RewardSpec::uniform(int k, double r_max, double alpha_target, std::uint64_t reward_seed) {
  if (k < 1) throw ConfigError("rewards.k", "must be >= 1");
  RewardSpec spec;
  spec.k = k;
  spec.weights.assign(static_cast<std::size_t>(k), r_max / k);
  spec.kinds = default_kinds(k);
  spec.alpha_target = alpha_target;
  spec.reward_seed = reward_seed;
  return spec;
}

RewardModel::RewardModel(const TaMdp& env, RewardSpec spec) : env_(&env), spec_(std::move(spec)) {
  spec_.validate();
  const int n = env.n_states();
  std::vector<std::vector<int>> fwd(static_cast<std::size_t>(n)), rev(static_cast<std::size_t>(n));
  for (int row = 0; row < env.n_policy_rows(); ++row) {
    const int s = env.row_state(row);
    for (int a = 0; a < env.n_vocab(); ++a) {
      if (a == env.stop_action()) continue;
      for (int t : env.successors(s, a)) {
        fwd[static_cast<std::size_t>(s)].push_back(t);
        rev[static_cast<std::size_t>(t)].push_back(s);
      }
    }
  }
  for (int s = 0; s < n; ++s) {
    for (int d : bfs(fwd, s)) diameter_ = std::max(diameter_, d);
  }

  std::vector<int> seen(3, 0);
  for (auto kind : spec_.kinds) variant_.push_back(seen[static_cast<std::size_t>(kind)]++);
  const int n_goal_variants = std::max(1, seen[static_cast<std::size_t>(ComponentKind::Accuracy)]);
  for (int v = 0; v < n_goal_variants; ++v) {
    int goal = env.goal();
    if (v > 0) {
      Rng rng = make_rng(spec_.reward_seed, {kVariantGoal, static_cast<std::uint64_t>(v)});
      goal = std::uniform_int_distribution<int>(0, env.spec().n_gen - 1)(rng);
    }
    goals_.push_back(goal);
    dist_.push_back(bfs(rev, goal));
  }

  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(spec_.k, spec_.k, spec_.alpha_target);
  cov.diagonal().setOnes();
  latent_chol_ = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
}

std::vector<double> RewardModel::latent_for(const Trajectory& traj) const {
  std::uint64_t h = derive_seed(spec_.reward_seed, {kLatent, static_cast<std::uint64_t>(traj.prompt_id)});
  for (const auto& st : traj.steps)
    h = mix64(h ^ (static_cast<std::uint64_t>(st.state) << 32 ^ static_cast<std::uint64_t>(st.action)));
  h = mix64(h ^ static_cast<std::uint64_t>(traj.terminal_state));

  // Box-Muller on a SplitMix stream keyed by the trajectory.
  const int k = spec_.k;
  Eigen::VectorXd z(k);
  constexpr double scale = 1.0 / 9007199254740992.0;
  for (int j = 0; j < k; j += 2) {
    h += 0x9e3779b97f4a7c15ULL;
    const double u1 = (static_cast<double>(mix64(h) >> 11) + 0.5) * scale;
    h += 0x9e3779b97f4a7c15ULL;
    const double u2 = (static_cast<double>(mix64(h) >> 11) + 0.5) * scale;
    const double r = std::sqrt(-2.0 * std::log(u1));
    z[j] = r * std::cos(2.0 * M_PI * u2);
    if (j + 1 < k) z[j + 1] = r * std::sin(2.0 * M_PI * u2);
  }
  const Eigen::VectorXd x = latent_chol_ * z;
  std::vector<double> out(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(j)] = 0.5 * std::erfc(-x[j] / std::sqrt(2.0));
  return out;
}

int RewardModel::goal_for(int /*prompt_id*/, int variant) const {
  // Every prompt shares the goal of its variant.
  return goals_.at(static_cast<std::size_t>(variant));
}

int RewardModel::distance_to_goal(int state, int variant) const {
  return dist_.at(static_cast<std::size_t>(variant)).at(static_cast<std::size_t>(state));
}

std::pair<int, int> RewardModel::format_markers(int variant) const {
  const int m = env_->n_vocab() - 1;
  if (m <= 0) return {-1, -1};
  return {(2 * variant) % m, (2 * variant + 1) % m};
}

double RewardModel::raw_component(int k, const Trajectory& traj) const {
  const int variant = variant_.at(static_cast<std::size_t>(k));
  switch (spec_.kinds[static_cast<std::size_t>(k)]) {
    case ComponentKind::Format: {
      const auto [open, close] = format_markers(variant);
      if (open < 0) return 0.0;
      bool opened = false;
      for (const auto& s : traj.steps) {
        if (opened && s.action == close) return 1.0;
        if (s.action == open) opened = true;
      }
      return 0.0;
    }
    case ComponentKind::Accuracy: {
      const int d = distance_to_goal(traj.terminal_state, variant);
      if (d < 0) return 0.0;
      if (diameter_ == 0) return d == 0 ? 1.0 : 0.0;
      return std::max(0.0, 1.0 - static_cast<double>(d) / diameter_);
    }
    case ComponentKind::ToolExec: {
      for (const auto& s : traj.steps) {
        if (!s.tool_call) continue;
        const int tool = s.action - env_->n_vocab();
        if (env_->tool_disabled(tool, env_->tool_state(s.state, tool))) return 0.0;
      }
      return 1.0;
    }
  }
  throw ConfigError("rewards.kinds", "unknown component kind");
}

std::vector<double> RewardModel::evaluate(const Trajectory& traj) const {
  if (traj.terminal_state < 0 || traj.terminal_state >= env_->n_states())
    throw DimensionError("trajectory is not complete");
  const double rho = std::abs(spec_.alpha_target);
  std::vector<double> out(static_cast<std::size_t>(spec_.k));
  const std::vector<double> lat_row = rho > 0.0 ? latent_for(traj) : std::vector<double>{};
  for (int k = 0; k < spec_.k; ++k) {
    double r = raw_component(k, traj);
    if (rho > 0.0) {
      const double lat = lat_row[static_cast<std::size_t>(k)];
      r = rho * lat + (1.0 - rho) * r;
    }
    out[static_cast<std::size_t>(k)] = clamp01(r);
  }
  return out;
}

void RewardModel::fill(Trajectory& traj) const { traj.rewards = evaluate(traj); }

std::vector<double> eval_components(const Trajectory& traj, const TaMdp& env, const RewardSpec& spec) {
  return RewardModel(env, spec).evaluate(traj);
}

double composite(std::span<const double> components, std::span<const double> weights) {
  if (components.size() != weights.size()) throw DimensionError("component and weight lengths differ");
  double total = 0.0;
  for (std::size_t k = 0; k < components.size(); ++k) total += weights[k] * components[k];
  return total;
}

Eigen::MatrixXd make_latents(double alpha_target, int k, std::uint64_t reward_seed, int n) {
  if (k < 1) throw ConfigError("rewards.k", "must be >= 1");
  if (!(std::abs(alpha_target) <= 0.95)) throw ConfigError("rewards.alpha_target", "must lie in [-0.95, 0.95]");
  if (k >= 2 && alpha_target <= -1.0 / (k - 1))
    throw ConfigError("rewards.alpha_target", "below the feasible equicorrelation bound -1/(K-1)");
  if (n < 0) throw DimensionError("latent draw count must be non-negative");

  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(k, k, alpha_target);
  cov.diagonal().setOnes();
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::MatrixXd chol = llt.matrixL();

  Rng rng(reward_seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd out(n, k);
  Eigen::VectorXd z(k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) z[j] = normal(rng);
    const Eigen::VectorXd x = chol * z;
    for (int j = 0; j < k; ++j) out(i, j) = 0.5 * std::erfc(-x[j] / std::sqrt(2.0));
  }
  return out;
}

AlignmentEstimate estimate_alignment(const Eigen::MatrixXd& samples, std::span<const double> weights) {
  if (samples.rows() < 2) throw DimensionError("alignment needs at least 2 samples");
  if (static_cast<Eigen::Index>(weights.size()) != samples.cols()) throw DimensionError("weight count mismatch");
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
  const Eigen::MatrixXd centered = samples.rowwise() - samples.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(samples.rows() - 1);

  AlignmentEstimate est;
  est.n_samples = static_cast<std::size_t>(samples.rows());
  for (Eigen::Index a = 0; a < cov.rows(); ++a)
    for (Eigen::Index b = a + 1; b < cov.cols(); ++b) est.numerator += w[a] * w[b] * cov(a, b);
  est.denominator = w.dot(cov * w);
  if (est.denominator > 1e-12) est.alpha_hat = est.numerator / est.denominator;
  return est;
}

std::optional<double> alignment_stderr(const Eigen::MatrixXd& samples, std::span<const double> weights) {
  const Eigen::Index n = samples.rows();
  if (n < 3) return std::nullopt;
  if (static_cast<Eigen::Index>(weights.size()) != samples.cols()) throw DimensionError("weight count mismatch");
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
  const Eigen::MatrixXd x = samples.rowwise() - samples.colwise().mean();
  const Eigen::VectorXd s1 = x.colwise().sum().transpose();
  const Eigen::MatrixXd s2 = x.transpose() * x;
  const auto m = static_cast<double>(n - 1);

  std::vector<double> loo(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd xi = x.row(i).transpose();
    const Eigen::VectorXd rest = s1 - xi;
    const Eigen::MatrixXd cov = (s2 - xi * xi.transpose() - rest * rest.transpose() / m) / (m - 1.0);
    const double den = w.dot(cov * w);
    if (!(den > 1e-12)) return std::nullopt;
    double num = 0.0;
    for (Eigen::Index a = 0; a < cov.rows(); ++a)
      for (Eigen::Index b = a + 1; b < cov.cols(); ++b) num += w[a] * w[b] * cov(a, b);
    loo[static_cast<std::size_t>(i)] = num / den;
  }
  const double mean = std::accumulate(loo.begin(), loo.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : loo) ss += (v - mean) * (v - mean);
  return std::sqrt(ss * m / static_cast<double>(n));
}

std::string components_to_csv(std::span<const Trajectory> trajs, std::span<const double> weights) {
  std::ostringstream os;
  os.precision(17);
  os << "prompt_id,sample_id";
  for (std::size_t k = 0; k < weights.size(); ++k) os << ",R_" << k + 1;
  os << ",composite\n";
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& t = trajs[i];
    if (t.rewards.size() != weights.size()) throw DimensionError("trajectory rewards not evaluated");
    os << t.prompt_id << ',' << i;
    for (double r : t.rewards) os << ',' << r;
    os << ',' << composite(t.rewards, weights) << '\n';
  }
  return os.str();
}

}  // namespace tamdp

#include "tamdp/policy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tamdp/errors.hpp"

namespace tamdp {

namespace {

constexpr int kMaxRowWidth = 256;

void check_visitation(std::span<const double> visitation, int rows) {
  if (static_cast<int>(visitation.size()) != rows) throw DimensionError("visitation length must equal policy rows");
  double total = 0.0;
  for (double v : visitation) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("visitation entries must be finite and non-negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw NumericError("visitation must sum to 1");
}

// Log-softmax of the full structural row, written to out[0..n).
void log_softmax_row(const PolicyParams& p, int row, std::span<double> out) {
  const auto logits = p.row(row);
  const double m = logits.maxCoeff();
  double z = 0.0;
  for (Eigen::Index a = 0; a < logits.size(); ++a) z += std::exp(logits[a] - m);
  const double lz = m + std::log(z);
  for (Eigen::Index a = 0; a < logits.size(); ++a) out[static_cast<std::size_t>(a)] = logits[a] - lz;
}

}  // namespace

PolicyParams::PolicyParams(std::vector<int> widths) : widths_(std::move(widths)) {
  offsets_.resize(widths_.size());
  Eigen::Index off = 0;
  for (std::size_t r = 0; r < widths_.size(); ++r) {
    if (widths_[r] < 1 || widths_[r] > kMaxRowWidth) throw DimensionError("row width must lie in [1, 256]");
    offsets_[r] = off;
    off += widths_[r];
  }
  theta_ = Eigen::VectorXd::Zero(off);
}

PolicyParams PolicyParams::uniform(const TaMdp& env) {
  std::vector<int> widths(static_cast<std::size_t>(env.n_policy_rows()));
  for (int r = 0; r < env.n_policy_rows(); ++r) widths[static_cast<std::size_t>(r)] = env.row_width(r);
  return PolicyParams(std::move(widths));
}

void PolicyParams::softmax(int r, int n, std::span<double> out) const {
  const double* z = theta_.data() + offset(r);
  double m = z[0];
  for (int a = 1; a < n; ++a) m = std::max(m, z[a]);
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    out[static_cast<std::size_t>(a)] = std::exp(z[a] - m);
    total += out[static_cast<std::size_t>(a)];
  }
  for (int a = 0; a < n; ++a) out[static_cast<std::size_t>(a)] /= total;
}

double PolicyParams::log_softmax(int r, int n, int action) const {
  const double* z = theta_.data() + offset(r);
  double m = z[0];
  for (int a = 1; a < n; ++a) m = std::max(m, z[a]);
  double total = 0.0;
  for (int a = 0; a < n; ++a) total += std::exp(z[a] - m);
  return z[action] - m - std::log(total);
}

void FisherPair::validate() const {
  for (const auto* h : {&h_source, &h_target}) {
    if (h->rows() != h->cols()) throw DimensionError("Fisher matrices must be square");
    if (((*h) - h->transpose()).cwiseAbs().maxCoeff() > 1e-8) throw NumericError("Fisher matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(*h, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-8) throw NumericError("Fisher matrix is not positive semi-definite");
  }
  if (h_source.rows() != h_target.rows()) throw DimensionError("Fisher matrices differ in size");
  if (!(ridge >= 0.0)) throw NumericError("ridge must be non-negative");
}

void check_compatible(const PolicyParams& policy, const TaMdp& env) {
  if (policy.rows() != env.n_policy_rows()) throw DimensionError("policy row count does not match environment");
  for (int r = 0; r < policy.rows(); ++r)
    if (policy.width(r) != env.row_width(r)) throw DimensionError("policy row width does not match environment");
}

double log_prob(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj) {
  check_compatible(policy, env);
  double total = 0.0;
  int depth = 0;
  for (const auto& step : traj.steps) {
    const int row = env.policy_row(step.state);
    if (row < 0) throw DimensionError("trajectory records a decision at a tool-invocation state");
    const int n = env.available_actions(step.state, depth);
    if (step.action >= n) throw DimensionError("trajectory action not available at its state");
    total += policy.log_softmax(row, n, step.action);
    if (step.tool_call) ++depth;
  }
  return total;
}

void add_score(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj, double coef,
               Eigen::Ref<Eigen::VectorXd> out) {
  if (out.size() != policy.dim()) throw DimensionError("score output has wrong length");
  std::array<double, kMaxRowWidth> probs{};
  int depth = 0;
  for (const auto& step : traj.steps) {
    const int row = env.policy_row(step.state);
    if (row < 0) throw DimensionError("trajectory records a decision at a tool-invocation state");
    const int n = env.available_actions(step.state, depth);
    if (step.action >= n) throw DimensionError("trajectory action not available at its state");
    policy.softmax(row, n, std::span<double>(probs.data(), static_cast<std::size_t>(n)));
    const Eigen::Index off = policy.offset(row);
    for (int a = 0; a < n; ++a) out[off + a] -= coef * probs[static_cast<std::size_t>(a)];
    out[off + step.action] += coef;
    if (step.tool_call) ++depth;
  }
}

Eigen::VectorXd grad_log_prob(const PolicyParams& policy, const TaMdp& env, const Trajectory& traj) {
  check_compatible(policy, env);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(policy.dim());
  add_score(policy, env, traj, 1.0, g);
  return g;
}

std::vector<std::pair<Eigen::Index, double>> sparse_score(const PolicyParams& policy, const TaMdp& env,
                                                          const Trajectory& traj) {
  std::vector<std::pair<Eigen::Index, double>> entries;
  std::array<double, kMaxRowWidth> probs{};
  int depth = 0;
  for (const auto& step : traj.steps) {
    const int row = env.policy_row(step.state);
    const int n = env.available_actions(step.state, depth);
    policy.softmax(row, n, std::span<double>(probs.data(), static_cast<std::size_t>(n)));
    const Eigen::Index off = policy.offset(row);
    for (int a = 0; a < n; ++a)
      entries.emplace_back(off + a, (a == step.action ? 1.0 : 0.0) - probs[static_cast<std::size_t>(a)]);
    if (step.tool_call) ++depth;
  }
  std::sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  std::vector<std::pair<Eigen::Index, double>> merged;
  for (const auto& e : entries) {
    if (!merged.empty() && merged.back().first == e.first)
      merged.back().second += e.second;
    else
      merged.push_back(e);
  }
  return merged;
}

double kl_to_ref(const PolicyParams& policy, const PolicyParams& ref, std::span<const double> visitation) {
  if (!policy.same_shape(ref)) throw DimensionError("policy and reference differ in shape");
  check_visitation(visitation, policy.rows());
  std::array<double, kMaxRowWidth> lp{}, lq{};
  double total = 0.0;
  for (int r = 0; r < policy.rows(); ++r) {
    const double v = visitation[static_cast<std::size_t>(r)];
    if (v == 0.0) continue;
    log_softmax_row(policy, r, lp);
    log_softmax_row(ref, r, lq);
    double kl = 0.0;
    for (int a = 0; a < policy.width(r); ++a) kl += std::exp(lp[a]) * (lp[a] - lq[a]);
    total += v * std::max(kl, 0.0);
  }
  return total;
}

Eigen::VectorXd kl_gradient(const PolicyParams& policy, const PolicyParams& ref, std::span<const double> visitation) {
  if (!policy.same_shape(ref)) throw DimensionError("policy and reference differ in shape");
  check_visitation(visitation, policy.rows());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(policy.dim());
  std::array<double, kMaxRowWidth> lp{}, lq{};
  for (int r = 0; r < policy.rows(); ++r) {
    const double v = visitation[static_cast<std::size_t>(r)];
    if (v == 0.0) continue;
    log_softmax_row(policy, r, lp);
    log_softmax_row(ref, r, lq);
    const int n = policy.width(r);
    double kl = 0.0;
    for (int a = 0; a < n; ++a) kl += std::exp(lp[a]) * (lp[a] - lq[a]);
    // d KL / d z_a = p_a * (log p_a - log q_a - KL)
    for (int a = 0; a < n; ++a) g[policy.offset(r) + a] = v * std::exp(lp[a]) * (lp[a] - lq[a] - kl);
  }
  return g;
}

std::vector<double> row_visitation(const TaMdp& env, std::span<const Trajectory> trajs) {
  std::vector<double> v(static_cast<std::size_t>(env.n_policy_rows()), 0.0);
  std::size_t total = 0;
  for (const auto& t : trajs) {
    for (const auto& s : t.steps) {
      v[static_cast<std::size_t>(env.policy_row(s.state))] += 1.0;
      ++total;
    }
  }
  if (total == 0) return v;
  for (double& x : v) x /= static_cast<double>(total);
  return v;
}

void FisherAccumulator::add(std::span<const std::pair<Eigen::Index, double>> score, double weight) {
  for (std::size_t i = 0; i < score.size(); ++i) {
    const double wi = weight * score[i].second;
    for (std::size_t j = i; j < score.size(); ++j) h_(score[i].first, score[j].first) += wi * score[j].second;
  }
}

Eigen::MatrixXd FisherAccumulator::finish(double ridge) const {
  Eigen::MatrixXd h = h_.selfadjointView<Eigen::Upper>();
  h.diagonal().array() += ridge;
  return h;
}

Eigen::MatrixXd fisher_matrix(const PolicyParams& policy, const TaMdp& env, std::span<const double> prompt_dist,
                              int n_samples, Rng& rng, double ridge) {
  check_compatible(policy, env);
  if (n_samples < 1) throw NumericError("n_samples must be >= 1");
  if (static_cast<int>(prompt_dist.size()) != env.spec().n_gen)
    throw DimensionError("prompt distribution must cover the generation states");
  FisherAccumulator acc(policy.dim());
  const double w = 1.0 / n_samples;
  for (int i = 0; i < n_samples; ++i) {
    const int prompt = sample_categorical(prompt_dist, rng);
    const auto traj = sample_trajectory(env, policy, prompt, rng);
    acc.add(sparse_score(policy, env, traj), w);
  }
  return acc.finish(ridge);
}

PolicyParams apply_update(const PolicyParams& policy, const Eigen::VectorXd& gradient, double step_size) {
  if (gradient.size() != policy.dim()) throw DimensionError("gradient length does not match policy dimension");
  if (!std::isfinite(step_size)) throw NumericError("step size is not finite");
  if (!gradient.allFinite()) throw NumericError("gradient has non-finite entries");
  PolicyParams next = policy;
  if (step_size != 0.0) next.theta() += step_size * gradient;
  return next;
}

std::string policy_to_csv(const PolicyParams& policy, const TaMdp& env) {
  check_compatible(policy, env);
  std::ostringstream os;
  os.precision(17);
  os << "state,action,logit\n";
  for (int r = 0; r < policy.rows(); ++r)
    for (int a = 0; a < policy.width(r); ++a) os << env.row_state(r) << ',' << a << ',' << policy.row(r)[a] << '\n';
  return os.str();
}

PolicyParams policy_from_csv(const std::string& csv, const TaMdp& env) {
  PolicyParams p = PolicyParams::uniform(env);
  std::vector<char> seen(static_cast<std::size_t>(p.dim()), 0);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  if (line != "state,action,logit") throw ConfigError("policy.csv", "missing header state,action,logit");
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f0, f1, f2;
    if (!std::getline(ls, f0, ',') || !std::getline(ls, f1, ',') || !std::getline(ls, f2))
      throw ConfigError("policy.csv:" + std::to_string(lineno), "expected three fields");
    const int s = std::stoi(f0), a = std::stoi(f1);
    const int row = env.policy_row(s);
    if (row < 0 || a < 0 || a >= p.width(row))
      throw DimensionError("policy CSV line " + std::to_string(lineno) + " addresses a non-existent parameter");
    const Eigen::Index idx = p.offset(row) + a;
    p.theta()[idx] = std::stod(f2);
    seen[static_cast<std::size_t>(idx)] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw DimensionError("policy CSV is missing parameters");
  if (!p.all_finite()) throw NumericError("policy CSV contains non-finite logits");
  return p;
}

}  // namespace tamdp

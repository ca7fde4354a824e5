#include "tamdp/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json_io.hpp"

namespace tamdp {

namespace {

void append_number(std::string& out, double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  out += buf;
}

struct AdvantageSet {
  Eigen::VectorXd adv;
  double weight = 1.0;
};

std::vector<AdvantageSet> advantage_sets(const GroupBatch& batch, const GrpoConfig& config,
                                         std::span<const double> weights) {
  const auto g = static_cast<std::size_t>(batch.size());
  std::vector<AdvantageSet> sets;
  switch (config.mode) {
    case GrpoMode::Joint: {
      std::span<const double> r(batch.composite_rewards.data(), g);
      sets.push_back({group_advantages(r, config.norm_eps), 1.0});
      break;
    }
    case GrpoMode::Decomposed: {
      std::vector<double> col(g);
      for (Eigen::Index k = 0; k < batch.component_rewards.cols(); ++k) {
        for (std::size_t i = 0; i < g; ++i) col[i] = batch.component_rewards(static_cast<Eigen::Index>(i), k);
        sets.push_back({group_advantages(col, config.norm_eps), weights[static_cast<std::size_t>(k)]});
      }
      break;
    }
    case GrpoMode::Plain: {
      Eigen::VectorXd a = batch.composite_rewards.array() - batch.composite_rewards.mean();
      sets.push_back({std::move(a), 1.0});
      break;
    }
  }
  return sets;
}

std::vector<double> resolve_prompt_dist(const TaMdp& env, std::span<const double> dist) {
  if (dist.empty()) return {env.initial_dist().begin(), env.initial_dist().end()};
  if (static_cast<int>(dist.size()) != env.spec().n_gen)
    throw DimensionError("prompt distribution must cover the generation states");
  return {dist.begin(), dist.end()};
}

std::vector<GroupBatch> sample_batches(const TaMdp& env, const PolicyParams& policy, const RewardModel& rewards,
                                       std::span<const double> prompt_dist, int n_batches, int group_size,
                                       std::uint64_t root, std::uint64_t stream) {
  std::vector<GroupBatch> batches;
  batches.reserve(static_cast<std::size_t>(n_batches));
  for (int b = 0; b < n_batches; ++b) {
    Rng rng = make_rng(root, {stream, static_cast<std::uint64_t>(b)});
    const int prompt = sample_categorical(prompt_dist, rng);
    batches.push_back(sample_group(env, policy, rewards, prompt, group_size, rng));
  }
  return batches;
}

}  // namespace

std::string to_string(GrpoMode mode) {
  switch (mode) {
    case GrpoMode::Joint:
      return "joint";
    case GrpoMode::Decomposed:
      return "decomposed";
    case GrpoMode::Plain:
      return "plain";
  }
  return "joint";
}

GrpoMode parse_grpo_mode(const std::string& text) {
  if (text == "joint") return GrpoMode::Joint;
  if (text == "decomposed") return GrpoMode::Decomposed;
  if (text == "plain") return GrpoMode::Plain;
  throw ConfigError("optim.mode", "expected joint, decomposed or plain, got '" + text + "'");
}

double GrpoConfig::step_size() const { return 1.0 / (lipschitz_estimate * std::sqrt(static_cast<double>(iters))); }

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("optim.group_size", "must be >= 2");
  if (!(kl_coef >= 0.0) || !std::isfinite(kl_coef)) throw ConfigError("optim.kl_coef", "must be finite and >= 0");
  if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) throw ConfigError("optim.norm_eps", "must be finite and > 0");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("optim.clip_eps", "must lie in (0, 1)");
  if (iters < 1) throw ConfigError("optim.iters", "must be >= 1");
  if (!(lipschitz_estimate > 0.0) || !std::isfinite(lipschitz_estimate))
    throw ConfigError("optim.lipschitz_estimate", "must be finite and > 0");
  if (inner_epochs < 1) throw ConfigError("optim.inner_epochs", "must be >= 1");
  if (prompts_per_iter < 1) throw ConfigError("optim.prompts_per_iter", "must be >= 1");
}

GroupBatch sample_group(const TaMdp& env, const PolicyParams& policy, const RewardModel& rewards, int prompt_id,
                        int group_size, Rng& rng) {
  check_compatible(policy, env);
  if (group_size < 1) throw NumericError("group_size must be >= 1");
  const auto& w = rewards.spec().weights;
  GroupBatch batch;
  batch.prompt_id = prompt_id;
  batch.trajectories.reserve(static_cast<std::size_t>(group_size));
  batch.component_rewards.resize(group_size, rewards.k());
  batch.composite_rewards.resize(group_size);
  batch.old_log_probs.resize(group_size);
  for (int i = 0; i < group_size; ++i) {
    Trajectory traj = sample_trajectory(env, policy, prompt_id, rng);
    rewards.fill(traj);
    for (int k = 0; k < rewards.k(); ++k) batch.component_rewards(i, k) = traj.rewards[static_cast<std::size_t>(k)];
    batch.composite_rewards[i] = composite(traj.rewards, w);
    batch.old_log_probs[i] = log_prob(policy, env, traj);
    batch.trajectories.push_back(std::move(traj));
  }
  return batch;
}

Eigen::VectorXd group_advantages(std::span<const double> rewards, double norm_eps) {
  const auto g = rewards.size();
  if (g < 2) throw DimensionError("group_advantages needs at least 2 rewards");
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(g);
  Eigen::VectorXd adv = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g));
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return adv;
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double denom = std::sqrt(ss / static_cast<double>(g)) + norm_eps;
  for (std::size_t i = 0; i < g; ++i) adv[static_cast<Eigen::Index>(i)] = (rewards[i] - mean) / denom;
  return adv;
}

double clipped_surrogate(std::span<const double> ratios, std::span<const double> advantages, double clip_eps) {
  if (ratios.size() != advantages.size()) throw DimensionError("ratios and advantages differ in length");
  if (ratios.empty()) throw DimensionError("clipped_surrogate needs at least one sample");
  double total = 0.0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double r = ratios[i];
    if (!(r > 0.0)) throw NumericError("importance ratios must be positive");
    const double clipped = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
    total += std::min(r * advantages[i], clipped * advantages[i]);
  }
  return total / static_cast<double>(ratios.size());
}

GradientResult grpo_gradient(const PolicyParams& policy, const PolicyParams& old_policy, const PolicyParams& ref_policy,
                             const TaMdp& env, std::span<const GroupBatch> batches, const GrpoConfig& config,
                             std::span<const double> weights) {
  check_compatible(policy, env);
  if (!policy.same_shape(old_policy) || !policy.same_shape(ref_policy))
    throw DimensionError("policy, old policy and reference differ in shape");
  if (batches.empty()) throw DimensionError("grpo_gradient needs at least one batch");

  GradientResult out;
  out.gradient = Eigen::VectorXd::Zero(policy.dim());
  auto& diag = out.diagnostics;
  const double nb = static_cast<double>(batches.size());
  std::size_t n_samples = 0, n_clipped = 0;
  double var_total = 0.0;
  std::vector<const Trajectory*> visited;

  for (const auto& batch : batches) {
    const int g = batch.size();
    if (g < 2) throw DimensionError("each batch needs at least 2 trajectories");
    if (batch.component_rewards.rows() != g || batch.composite_rewards.size() != g || batch.old_log_probs.size() != g)
      throw DimensionError("batch reward arrays do not match its trajectory count");
    if (config.mode == GrpoMode::Decomposed && static_cast<std::size_t>(batch.component_rewards.cols()) != weights.size())
      throw DimensionError("weights length does not match reward components");

    const auto sets = advantage_sets(batch, config, weights);
    std::vector<double> coef(static_cast<std::size_t>(g), 0.0);
    double surrogate = 0.0;
    for (int i = 0; i < g; ++i) {
      const auto& traj = batch.trajectories[static_cast<std::size_t>(i)];
      const double ratio = std::exp(log_prob(policy, env, traj) - batch.old_log_probs[i]);
      const double clipped = std::clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
      bool any_clipped = false;
      for (const auto& s : sets) {
        const double a = s.adv[i];
        // The min picks the clipped branch only when it is strictly smaller; that branch is constant in theta.
        if (clipped * a < ratio * a) {
          any_clipped = true;
          surrogate += s.weight * clipped * a / g;
        } else {
          surrogate += s.weight * ratio * a / g;
          coef[static_cast<std::size_t>(i)] += s.weight * a * ratio / g;
        }
      }
      if (any_clipped) ++n_clipped;
      ++n_samples;
      visited.push_back(&traj);
    }
    diag.surrogate += surrogate / nb;

    // Per-sample terms x_i = G * coef_i * score_i, so the batch gradient is their mean.
    Eigen::VectorXd batch_grad = Eigen::VectorXd::Zero(policy.dim());
    double sum_sq = 0.0;
    for (int i = 0; i < g; ++i) {
      const double c = coef[static_cast<std::size_t>(i)];
      if (c == 0.0) continue;
      const auto& traj = batch.trajectories[static_cast<std::size_t>(i)];
      add_score(policy, env, traj, c, batch_grad);
      double norm2 = 0.0;
      for (const auto& [idx, v] : sparse_score(policy, env, traj)) norm2 += v * v;
      sum_sq += (g * c) * (g * c) * norm2;
    }
    const double mean_sq = static_cast<double>(g) * batch_grad.squaredNorm();
    var_total += std::max(sum_sq - mean_sq, 0.0) / (static_cast<double>(g) * (g - 1));
    out.gradient += batch_grad / nb;
  }
  diag.pg_norm = out.gradient.norm();
  diag.clip_fraction = static_cast<double>(n_clipped) / static_cast<double>(n_samples);
  diag.sample_variance = var_total / (nb * nb);

  std::vector<double> visitation(static_cast<std::size_t>(env.n_policy_rows()), 0.0);
  std::size_t steps = 0;
  for (const auto* t : visited) {
    for (const auto& s : t->steps) visitation[static_cast<std::size_t>(env.policy_row(s.state))] += 1.0;
    steps += t->steps.size();
  }
  if (steps > 0) {
    for (double& v : visitation) v /= static_cast<double>(steps);
    diag.kl_value = kl_to_ref(policy, ref_policy, visitation);
    if (config.kl_coef > 0.0) out.gradient -= config.kl_coef * kl_gradient(policy, ref_policy, visitation);
  }
  diag.surrogate -= config.kl_coef * diag.kl_value;
  return out;
}

std::vector<double> RunLog::grad_norms() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.grad_norm);
  return out;
}

std::string RunLog::to_csv() const {
  std::string out = "t,grad_norm,objective_estimate,kl_value,alpha_hat";
  for (int k = 1; k <= reward_spec.k; ++k) out += ",mean_R_" + std::to_string(k);
  out += ",grad_variance_estimate\n";
  for (const auto& r : records) {
    out += std::to_string(r.t);
    for (double x : {r.grad_norm, r.objective_estimate, r.kl_value}) {
      out += ',';
      append_number(out, x);
    }
    out += ',';
    if (r.alpha_hat) append_number(out, *r.alpha_hat);
    for (double m : r.component_means) {
      out += ',';
      append_number(out, m);
    }
    out += ',';
    append_number(out, r.grad_variance_estimate);
    out += '\n';
  }
  return out;
}

std::string RunLog::summary_json() const {
  using detail::json;
  using detail::number_or_null;
  json doc;
  doc["seed"] = seed;
  doc["optim"] = detail::to_json(config);
  doc["env"] = detail::to_json(env_spec);
  doc["rewards"] = detail::to_json(reward_spec);
  doc["n_records"] = records.size();
  if (!records.empty()) {
    const auto& last = records.back();
    const std::size_t tail = std::min<std::size_t>(100, records.size());
    double tail_mean = 0.0;
    for (std::size_t i = records.size() - tail; i < records.size(); ++i) tail_mean += records[i].grad_norm;
    doc["final"] = {{"t", last.t},
                    {"grad_norm", number_or_null(last.grad_norm)},
                    {"grad_norm_tail_mean", number_or_null(tail_mean / static_cast<double>(tail))},
                    {"objective_estimate", number_or_null(last.objective_estimate)},
                    {"kl_value", number_or_null(last.kl_value)},
                    {"alpha_hat", number_or_null(last.alpha_hat)},
                    {"component_means", last.component_means}};
  }
  return doc.dump(2);
}

TrainResult grpo_train(const TaMdp& env, const RewardModel& rewards, const GrpoConfig& config,
                       const PolicyParams& ref_policy, std::uint64_t seed, const TrainOptions& options) {
  config.validate();
  check_compatible(ref_policy, env);
  if (&rewards.env() != &env) throw DimensionError("reward model is bound to a different environment");
  const auto prompt_dist = resolve_prompt_dist(env, options.prompt_dist);
  PolicyParams policy = options.init ? *options.init : ref_policy;
  check_compatible(policy, env);

  RunLog log;
  log.config = config;
  log.env_spec = env.spec();
  log.reward_spec = rewards.spec();
  log.seed = seed;
  log.records.reserve(static_cast<std::size_t>(config.iters));

  const std::uint64_t root = derive_seed(seed, {config.opt_seed});
  const double eta = config.step_size();
  const auto& weights = rewards.spec().weights;
  const int k = rewards.k();

  for (int t = 1; t <= config.iters; ++t) {
    const auto batches = sample_batches(env, policy, rewards, prompt_dist, config.prompts_per_iter,
                                        config.group_size, root, static_cast<std::uint64_t>(t));
    if (options.on_batches) options.on_batches(t, batches);
    IterationRecord rec;
    rec.t = t;
    const PolicyParams old = policy;
    for (int e = 0; e < config.inner_epochs; ++e) {
      const auto res = grpo_gradient(policy, old, ref_policy, env, batches, config, weights);
      if (e == 0) {
        rec.grad_norm = res.gradient.norm();
        rec.kl_value = res.diagnostics.kl_value;
        rec.grad_variance_estimate = res.diagnostics.sample_variance;
      }
      if (!res.gradient.allFinite()) throw TrainingAborted("non-finite gradient at iteration " + std::to_string(t), log);
      policy = apply_update(policy, res.gradient, eta);
    }

    const Eigen::Index n = static_cast<Eigen::Index>(batches.size()) * config.group_size;
    Eigen::MatrixXd pooled(n, k);
    double comp_mean = 0.0;
    Eigen::Index row = 0;
    for (const auto& b : batches) {
      pooled.middleRows(row, b.size()) = b.component_rewards;
      comp_mean += b.composite_rewards.sum();
      row += b.size();
    }
    comp_mean /= static_cast<double>(n);
    rec.alpha_hat = estimate_alignment(pooled, weights).alpha_hat;
    const Eigen::VectorXd means = pooled.colwise().mean();
    rec.component_means.assign(means.data(), means.data() + means.size());
    rec.objective_estimate = comp_mean - config.kl_coef * rec.kl_value;
    if (!std::isfinite(rec.objective_estimate) || !std::isfinite(rec.grad_norm))
      throw TrainingAborted("non-finite objective estimate at iteration " + std::to_string(t), log);
    log.records.push_back(std::move(rec));
    if (options.on_iteration) options.on_iteration(t, policy);
  }
  return {std::move(policy), std::move(log)};
}

double grad_variance(const PolicyParams& policy, const PolicyParams& old_policy, const PolicyParams& ref_policy,
                     const TaMdp& env, const RewardModel& rewards, const GrpoConfig& config, int n_replicates,
                     std::uint64_t seed, std::span<const double> prompt_dist) {
  if (n_replicates < 2) throw NumericError("grad_variance needs at least 2 replicates");
  const auto dist = resolve_prompt_dist(env, prompt_dist);
  std::vector<Eigen::VectorXd> grads;
  grads.reserve(static_cast<std::size_t>(n_replicates));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(policy.dim());
  for (int r = 0; r < n_replicates; ++r) {
    // Batches are drawn under old_policy, the sampling distribution of the estimator.
    const auto batches = sample_batches(env, old_policy, rewards, dist, config.prompts_per_iter, config.group_size,
                                        seed, static_cast<std::uint64_t>(r));
    grads.push_back(grpo_gradient(policy, old_policy, ref_policy, env, batches, config, rewards.spec().weights).gradient);
    mean += grads.back();
  }
  mean /= n_replicates;
  double total = 0.0;
  for (const auto& g : grads) total += (g - mean).squaredNorm();
  return total / (n_replicates - 1);
}

double lipschitz_probe(const PolicyParams& policy, const PolicyParams& ref_policy, const TaMdp& env,
                       const RewardModel& rewards, const GrpoConfig& config, std::uint64_t seed, int n_directions,
                       double radius, int groups_per_estimate) {
  if (n_directions < 1 || groups_per_estimate < 1 || !(radius > 0.0))
    throw NumericError("lipschitz_probe needs positive directions, groups and radius");
  const auto dist = resolve_prompt_dist(env, {});
  const auto& w = rewards.spec().weights;
  auto estimate = [&](const PolicyParams& p, std::uint64_t stream) {
    const auto batches = sample_batches(env, p, rewards, dist, groups_per_estimate, config.group_size, seed, stream);
    return grpo_gradient(p, p, ref_policy, env, batches, config, w).gradient;
  };
  Rng rng = make_rng(seed, {0xd1ec});
  std::normal_distribution<double> normal;
  double best = 0.0;
  for (int j = 0; j < n_directions; ++j) {
    Eigen::VectorXd delta(policy.dim());
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = normal(rng);
    delta *= radius / delta.norm();
    PolicyParams moved = policy;
    moved.theta() += delta;
    const auto stream = static_cast<std::uint64_t>(j) + 1;
    best = std::max(best, (estimate(moved, stream) - estimate(policy, stream)).norm() / radius);
  }
  return best;
}

RolloutStats evaluate_policy(const TaMdp& env, const PolicyParams& policy, const RewardModel& rewards,
                             std::span<const double> prompt_dist, int n_rollouts, std::uint64_t seed) {
  if (n_rollouts < 2) throw NumericError("evaluate_policy needs at least 2 rollouts");
  check_compatible(policy, env);
  const auto dist = resolve_prompt_dist(env, prompt_dist);
  RolloutStats st;
  st.components.resize(n_rollouts, rewards.k());
  st.composites.resize(n_rollouts);
  st.prompts.reserve(static_cast<std::size_t>(n_rollouts));
  st.visitation.assign(static_cast<std::size_t>(env.n_policy_rows()), 0.0);
  std::size_t steps = 0;
  Rng rng = make_rng(seed, {0xe7a1});
  for (int i = 0; i < n_rollouts; ++i) {
    const int prompt = sample_categorical(dist, rng);
    Trajectory traj = sample_trajectory(env, policy, prompt, rng);
    rewards.fill(traj);
    for (int k = 0; k < rewards.k(); ++k) st.components(i, k) = traj.rewards[static_cast<std::size_t>(k)];
    st.composites[i] = composite(traj.rewards, rewards.spec().weights);
    st.prompts.push_back(prompt);
    for (const auto& s : traj.steps) st.visitation[static_cast<std::size_t>(env.policy_row(s.state))] += 1.0;
    steps += traj.steps.size();
  }
  if (steps > 0)
    for (double& v : st.visitation) v /= static_cast<double>(steps);
  st.mean_composite = st.composites.mean();
  const double var = (st.composites.array() - st.mean_composite).square().sum() / (n_rollouts - 1);
  st.stderr_composite = std::sqrt(var / n_rollouts);
  return st;
}

}  // namespace tamdp

#pragma once

// Independent reference computations used as test oracles. Nothing here
// calls log_prob, grad_log_prob, sample_trajectory or grpo_gradient.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tamdp/env.hpp"
#include "tamdp/policy.hpp"
#include "tamdp/rewards.hpp"

namespace oracle {

// Softmax over the first n logits of a row, computed the long way.
inline std::vector<double> softmax(const tamdp::PolicyParams& p, int row, int n) {
  std::vector<double> e(static_cast<std::size_t>(n));
  double mx = -1e300;
  for (int a = 0; a < n; ++a) mx = std::max(mx, p.theta()[p.offset(row) + a]);
  double z = 0.0;
  for (int a = 0; a < n; ++a) z += (e[a] = std::exp(p.theta()[p.offset(row) + a] - mx));
  for (auto& x : e) x /= z;
  return e;
}

struct Path {
  tamdp::Trajectory traj;
  double prob = 1.0;          // policy and kernel probability
  double policy_prob = 1.0;   // policy factors only
  Eigen::VectorXd score;      // d/dtheta log policy_prob
};

// Every trajectory reachable from `prompt` under the env's dynamics.
inline std::vector<Path> enumerate(const tamdp::TaMdp& env, const tamdp::PolicyParams& p, int prompt) {
  std::vector<Path> out;
  const auto& spec = env.spec();
  std::function<void(Path, int, int)> rec = [&](Path cur, int state, int depth) {
    if (static_cast<int>(cur.traj.steps.size()) >= spec.horizon || env.terminal(state)) {
      cur.traj.terminal_state = state;
      cur.traj.depth = depth;
      out.push_back(std::move(cur));
      return;
    }
    const int row = env.policy_row(state);
    const int n = env.available_actions(state, depth);
    const auto pi = softmax(p, row, n);
    for (int a = 0; a < n; ++a) {
      if (pi[a] == 0.0) continue;
      Path next = cur;
      next.prob *= pi[a];
      next.policy_prob *= pi[a];
      for (int b = 0; b < n; ++b) next.score[p.offset(row) + b] += (a == b ? 1.0 : 0.0) - pi[b];
      const bool tool = env.is_tool_action(a);
      next.traj.steps.push_back({state, a, tool});
      if (tool) {
        const int t = a - spec.n_vocab;
        rec(std::move(next), env.tool_return(t, env.tool_state(state, t)), depth + 1);
        continue;
      }
      if (a == env.stop_action()) {
        next.traj.terminal_state = state;
        next.traj.depth = depth;
        out.push_back(std::move(next));
        continue;
      }
      const auto succ = env.successors(state, a);
      const auto pr = env.probabilities(state, a);
      for (std::size_t j = 0; j < succ.size(); ++j) {
        Path branch = next;
        branch.prob *= pr[j];
        rec(std::move(branch), succ[j], depth);
      }
    }
  };
  Path start;
  start.traj.prompt_id = prompt;
  start.score = Eigen::VectorXd::Zero(p.dim());
  rec(std::move(start), prompt, 0);
  return out;
}

// Population-std normalization written out directly.
inline std::vector<double> advantages(const std::vector<double>& r, double eps) {
  const double g = static_cast<double>(r.size());
  double m = 0.0;
  for (double x : r) m += x;
  m /= g;
  double v = 0.0;
  for (double x : r) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / g);
  std::vector<double> a(r.size(), 0.0);
  if (sd == 0.0) return a;
  for (std::size_t i = 0; i < r.size(); ++i) a[i] = (r[i] - m) / (sd + eps);
  return a;
}

struct ExactGradients {
  Eigen::VectorXd policy_gradient;  // d/dtheta E[composite]
  Eigen::VectorXd joint_pair;       // E of the joint-mode estimator with G = 2, ratios 1, beta 0
};

// Exact expectations over prompts, trajectories and, for the group
// estimator, every ordered pair of trajectories.
inline ExactGradients exact_gradients(const tamdp::TaMdp& env, const tamdp::PolicyParams& p,
                                      const tamdp::RewardModel& rewards, std::span<const double> prompt_dist,
                                      double norm_eps) {
  ExactGradients out{Eigen::VectorXd::Zero(p.dim()), Eigen::VectorXd::Zero(p.dim())};
  for (int x = 0; x < static_cast<int>(prompt_dist.size()); ++x) {
    if (prompt_dist[x] == 0.0) continue;
    const auto paths = enumerate(env, p, x);
    std::vector<double> r;
    for (const auto& path : paths) {
      const auto comp = rewards.evaluate(path.traj);
      double c = 0.0;
      for (std::size_t k = 0; k < comp.size(); ++k) c += rewards.spec().weights[k] * comp[k];
      r.push_back(c);
    }
    for (std::size_t i = 0; i < paths.size(); ++i) {
      out.policy_gradient += prompt_dist[x] * paths[i].prob * r[i] * paths[i].score;
      for (std::size_t j = 0; j < paths.size(); ++j) {
        const auto a = advantages({r[i], r[j]}, norm_eps);
        const double w = prompt_dist[x] * paths[i].prob * paths[j].prob;
        out.joint_pair += w * 0.5 * (a[0] * paths[i].score + a[1] * paths[j].score);
      }
    }
  }
  return out;
}

// Three generation states (one is the terminal goal), two content tokens
// plus stop, no tools, horizon 3.
inline tamdp::TaMdpSpec micro_spec() {
  tamdp::TaMdpSpec s;
  s.n_gen = 3;
  s.n_tool = 0;
  s.n_ret = 0;
  s.n_tools = 0;
  s.d_max = 0;
  s.n_vocab = 3;
  s.horizon = 3;
  s.branch = 2;
  s.env_seed = 17;
  return s;
}

}  // namespace oracle

#include "tamdp/env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "tamdp/errors.hpp"
#include "tamdp/policy.hpp"

namespace tamdp {

namespace {

enum Stream : std::uint64_t { kKernel = 1, kToolTarget = 2, kToolFn = 3, kGoal = 4, kToolOff = 5 };

constexpr int kMaxRowWidth = 256;

}  // namespace

void TaMdpSpec::validate() const {
  if (n_gen < 1) throw ConfigError("env.n_gen", "must be >= 1");
  if (n_vocab < 1) throw ConfigError("env.n_vocab", "must be >= 1");
  if (horizon < 1) throw ConfigError("env.horizon", "must be >= 1");
  if (n_tools < 0) throw ConfigError("env.n_tools", "must be >= 0");
  if (n_tool < 0) throw ConfigError("env.n_tool", "must be >= 0");
  if (n_ret < 0) throw ConfigError("env.n_ret", "must be >= 0");
  if (n_tools > 0 && n_tool < 1) throw ConfigError("env.n_tool", "must be >= 1 when tools are present");
  if (n_tools > 0 && n_ret < 1) throw ConfigError("env.n_ret", "must be >= 1 when tools are present");
  if (d_max < 0) throw ConfigError("env.d_max", "must be >= 0");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("env.gamma", "must lie in [0, 1)");
  if (branch < 1) throw ConfigError("env.branch", "must be >= 1");
  if (branch > n_gen) throw ConfigError("env.branch", "exceeds the number of generation states");
  if (n_actions() > kMaxRowWidth) throw ConfigError("env.n_vocab", "action space wider than 256");
  if (!(disabled_tool_frac >= 0.0 && disabled_tool_frac <= 1.0))
    throw ConfigError("env.disabled_tool_frac", "must lie in [0, 1]");
}

StateKind TaMdp::kind(int state) const {
  if (state < 0 || state >= n_states()) throw DimensionError("state index out of range");
  if (state < spec_.n_gen) return StateKind::Generation;
  if (state < spec_.n_gen + spec_.n_tool) return StateKind::ToolInvocation;
  return StateKind::ToolReturn;
}

int TaMdp::policy_row(int state) const {
  switch (kind(state)) {
    case StateKind::Generation:
      return state;
    case StateKind::ToolReturn:
      return state - spec_.n_tool;
    case StateKind::ToolInvocation:
      break;
  }
  return -1;
}

int TaMdp::row_state(int row) const {
  if (row < 0 || row >= n_policy_rows()) throw DimensionError("policy row out of range");
  return row < spec_.n_gen ? row : row + spec_.n_tool;
}

int TaMdp::row_width(int row) const {
  if (row < 0 || row >= n_policy_rows()) throw DimensionError("policy row out of range");
  return (row < spec_.n_gen && tools_enabled()) ? n_actions() : spec_.n_vocab;
}

int TaMdp::available_actions(int state, int depth) const {
  switch (kind(state)) {
    case StateKind::Generation:
      return (tools_enabled() && depth < spec_.d_max) ? n_actions() : spec_.n_vocab;
    case StateKind::ToolReturn:
      return spec_.n_vocab;
    case StateKind::ToolInvocation:
      break;
  }
  return 0;
}

std::size_t TaMdp::token_slot(int state, int token) const {
  const int row = policy_row(state);
  if (row < 0) throw DimensionError("tool-invocation states have no token transitions");
  if (token < 0 || token >= spec_.n_vocab) throw DimensionError("token index out of range");
  return (static_cast<std::size_t>(row) * spec_.n_vocab + token) * spec_.branch;
}

std::span<const int> TaMdp::successors(int state, int token) const {
  return {succ_.data() + token_slot(state, token), static_cast<std::size_t>(spec_.branch)};
}

std::span<const double> TaMdp::probabilities(int state, int token) const {
  return {prob_.data() + token_slot(state, token), static_cast<std::size_t>(spec_.branch)};
}

int TaMdp::tool_state(int state, int tool) const {
  if (kind(state) != StateKind::Generation) throw DimensionError("tools are issued from generation states only");
  if (tool < 0 || tool >= spec_.n_tools) throw DimensionError("tool index out of range");
  return tool_target_[static_cast<std::size_t>(state) * spec_.n_tools + tool];
}

int TaMdp::tool_return(int tool, int tool_state) const {
  if (tool < 0 || tool >= spec_.n_tools) throw DimensionError("tool index out of range");
  if (kind(tool_state) != StateKind::ToolInvocation) throw DimensionError("not a tool-invocation state");
  return tool_fn_[static_cast<std::size_t>(tool) * spec_.n_tool + (tool_state - spec_.n_gen)];
}

bool TaMdp::tool_disabled(int tool, int tool_state) const {
  if (tool < 0 || tool >= spec_.n_tools) throw DimensionError("tool index out of range");
  if (kind(tool_state) != StateKind::ToolInvocation) throw DimensionError("not a tool-invocation state");
  return tool_off_[static_cast<std::size_t>(tool) * spec_.n_tool + (tool_state - spec_.n_gen)] != 0;
}

std::string TaMdp::kernel_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "state,action,successor,probability\n";
  for (int row = 0; row < n_policy_rows(); ++row) {
    const int s = row_state(row);
    for (int a = 0; a < spec_.n_vocab; ++a) {
      auto succ = successors(s, a);
      auto prob = probabilities(s, a);
      for (std::size_t j = 0; j < succ.size(); ++j) os << s << ',' << a << ',' << succ[j] << ',' << prob[j] << '\n';
    }
    if (kind(s) == StateKind::Generation) {
      for (int tool = 0; tool < spec_.n_tools; ++tool)
        os << s << ',' << spec_.n_vocab + tool << ',' << tool_state(s, tool) << ",1\n";
    }
  }
  for (int ts = spec_.n_gen; ts < spec_.n_gen + spec_.n_tool; ++ts)
    for (int tool = 0; tool < spec_.n_tools; ++tool)
      os << ts << ',' << spec_.n_vocab + tool << ',' << tool_return(tool, ts) << ",1\n";
  return os.str();
}

TaMdp build_env(const TaMdpSpec& spec) {
  spec.validate();
  TaMdp env;
  env.spec_ = spec;
  const int rows = env.n_policy_rows();
  const auto seed = spec.env_seed;

  env.succ_.resize(static_cast<std::size_t>(rows) * spec.n_vocab * spec.branch);
  env.prob_.resize(env.succ_.size());
  std::vector<int> pool(static_cast<std::size_t>(spec.n_gen));
  for (int row = 0; row < rows; ++row) {
    const int s = env.row_state(row);
    for (int a = 0; a < spec.n_vocab; ++a) {
      // Partial Fisher-Yates for `branch` distinct successors, then Dirichlet(1,...,1) weights.
      Rng rng = make_rng(seed, {kKernel, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(a)});
      for (int i = 0; i < spec.n_gen; ++i) pool[static_cast<std::size_t>(i)] = i;
      const std::size_t base = env.token_slot(s, a);
      double total = 0.0;
      for (int j = 0; j < spec.branch; ++j) {
        std::uniform_int_distribution<int> pick(j, spec.n_gen - 1);
        std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick(rng))]);
        env.succ_[base + j] = pool[static_cast<std::size_t>(j)];
        const double e = -std::log(uniform_open(rng));
        env.prob_[base + j] = e;
        total += e;
      }
      for (int j = 0; j < spec.branch; ++j) env.prob_[base + j] /= total;
    }
  }

  if (spec.n_tools > 0) {
    env.tool_target_.resize(static_cast<std::size_t>(spec.n_gen) * spec.n_tools);
    for (int s = 0; s < spec.n_gen; ++s) {
      for (int tool = 0; tool < spec.n_tools; ++tool) {
        Rng rng = make_rng(seed, {kToolTarget, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(tool)});
        std::uniform_int_distribution<int> pick(0, spec.n_tool - 1);
        env.tool_target_[static_cast<std::size_t>(s) * spec.n_tools + tool] = spec.n_gen + pick(rng);
      }
    }
    env.tool_fn_.resize(static_cast<std::size_t>(spec.n_tools) * spec.n_tool);
    env.tool_off_.resize(env.tool_fn_.size());
    for (int tool = 0; tool < spec.n_tools; ++tool) {
      for (int j = 0; j < spec.n_tool; ++j) {
        Rng rng = make_rng(seed, {kToolFn, static_cast<std::uint64_t>(tool), static_cast<std::uint64_t>(j)});
        std::uniform_int_distribution<int> pick(0, spec.n_ret - 1);
        const std::size_t idx = static_cast<std::size_t>(tool) * spec.n_tool + j;
        env.tool_fn_[idx] = spec.n_gen + spec.n_tool + pick(rng);
        Rng off = make_rng(seed, {kToolOff, static_cast<std::uint64_t>(tool), static_cast<std::uint64_t>(j)});
        env.tool_off_[idx] = uniform_open(off) < spec.disabled_tool_frac ? 1 : 0;
      }
    }
  }

  env.terminal_.assign(static_cast<std::size_t>(spec.n_states()), 0);
  {
    Rng rng = make_rng(seed, {kGoal});
    std::uniform_int_distribution<int> pick(0, spec.n_gen - 1);
    env.goal_ = pick(rng);
  }
  // A single-state environment keeps its only state non-terminal so prompts exist.
  if (spec.n_gen > 1) env.terminal_[static_cast<std::size_t>(env.goal_)] = 1;

  env.initial_.assign(static_cast<std::size_t>(spec.n_gen), 0.0);
  int open = 0;
  for (int s = 0; s < spec.n_gen; ++s) open += env.terminal_[static_cast<std::size_t>(s)] ? 0 : 1;
  for (int s = 0; s < spec.n_gen; ++s)
    if (!env.terminal_[static_cast<std::size_t>(s)]) env.initial_[static_cast<std::size_t>(s)] = 1.0 / open;
  return env;
}

int sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform_open(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u above the last partial sum; return the last positive entry.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<int>(i);
  return static_cast<int>(probs.size()) - 1;
}

Trajectory sample_trajectory(const TaMdp& env, const PolicyParams& policy, int prompt_id, Rng& rng) {
  check_compatible(policy, env);
  if (prompt_id < 0 || prompt_id >= env.spec().n_gen) throw DimensionError("prompt_id must be a generation state");

  const auto& spec = env.spec();
  Trajectory traj;
  traj.prompt_id = prompt_id;
  traj.steps.reserve(static_cast<std::size_t>(spec.horizon));
  std::array<double, kMaxRowWidth> probs{};

  int state = prompt_id;
  int depth = 0;
  while (static_cast<int>(traj.steps.size()) < spec.horizon && !env.terminal(state)) {
    const int row = env.policy_row(state);
    const int n = env.available_actions(state, depth);
    policy.softmax(row, n, std::span<double>(probs.data(), static_cast<std::size_t>(n)));
    const int a = sample_categorical(std::span<const double>(probs.data(), static_cast<std::size_t>(n)), rng);
    const bool tool = env.is_tool_action(a);
    traj.steps.push_back({state, a, tool});
    if (tool) {
      const int t = a - spec.n_vocab;
      ++depth;
      state = env.tool_return(t, env.tool_state(state, t));
      continue;
    }
    if (a == env.stop_action()) break;
    auto succ = env.successors(state, a);
    state = succ[static_cast<std::size_t>(sample_categorical(env.probabilities(state, a), rng))];
  }
  traj.depth = depth;
  traj.terminal_state = state;
  return traj;
}

int trajectory_depth(const Trajectory& traj) {
  return static_cast<int>(std::count_if(traj.steps.begin(), traj.steps.end(), [](const Step& s) { return s.tool_call; }));
}

int effective_state_dim(const TaMdpSpec& spec, int depth) {
  if (depth < 0 || depth > spec.d_max) throw DimensionError("depth outside [0, d_max]");
  return spec.n_gen + depth * spec.n_ret;
}

}  // namespace tamdp

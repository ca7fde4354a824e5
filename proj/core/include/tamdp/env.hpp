#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tamdp/rng.hpp"

namespace tamdp {

class PolicyParams;

/// Size and seed description of a synthetic tool-augmented MDP.
///
/// States are laid out as [generation | tool-invocation | tool-return].
/// Actions are laid out as [vocabulary tokens | tools]; the last vocabulary
/// token is the stop action. Tool actions are only ever enabled in
/// generation states, and only while the running call count is below
/// `d_max`.
struct TaMdpSpec {
  int n_gen = 100;
  int n_tool = 10;
  int n_ret = 20;
  int n_vocab = 8;
  int n_tools = 2;
  int d_max = 2;
  double gamma = 0.99;
  int horizon = 20;
  std::uint64_t env_seed = 0;
  int branch = 2;
  /// Fraction of (tool, tool-invocation state) pairs at which the tool is
  /// disabled. A call to a disabled tool still returns deterministically but
  /// counts as a failed execution for the tool_exec reward component.
  double disabled_tool_frac = 0.2;

  int n_states() const noexcept { return n_gen + n_tool + n_ret; }
  int n_actions() const noexcept { return n_vocab + n_tools; }

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

enum class StateKind { Generation, ToolInvocation, ToolReturn };

struct Step {
  int state = 0;
  int action = 0;
  bool tool_call = false;
};

/// One sampled episode. Rewards are trajectory-level and are filled in by
/// the rewards module after sampling.
struct Trajectory {
  std::vector<Step> steps;
  int depth = 0;
  int terminal_state = -1;
  int prompt_id = -1;
  std::vector<double> rewards;

  std::size_t length() const noexcept { return steps.size(); }
};

/// Immutable environment built from a TaMdpSpec. Safe to share across threads.
class TaMdp {
 public:
  const TaMdpSpec& spec() const noexcept { return spec_; }
  int n_states() const noexcept { return spec_.n_states(); }
  int n_actions() const noexcept { return spec_.n_actions(); }
  int n_vocab() const noexcept { return spec_.n_vocab; }

  StateKind kind(int state) const;
  bool is_tool_action(int action) const noexcept { return action >= spec_.n_vocab; }
  int stop_action() const noexcept { return spec_.n_vocab - 1; }
  bool terminal(int state) const { return terminal_.at(static_cast<std::size_t>(state)) != 0; }
  int goal() const noexcept { return goal_; }

  /// Policy-controlled states (generation and return) map to a parameter
  /// row; tool-invocation states map to -1.
  int policy_row(int state) const;
  int n_policy_rows() const noexcept { return spec_.n_gen + spec_.n_ret; }
  int row_state(int row) const;
  /// Number of actions structurally available in `row`, ignoring the depth mask.
  int row_width(int row) const;
  /// Actions available at `state` given the running tool-call depth. The
  /// enabled set is always the prefix [0, n) of the action layout.
  int available_actions(int state, int depth) const;
  bool tools_enabled() const noexcept { return spec_.n_tools > 0 && spec_.d_max > 0; }

  std::span<const int> successors(int state, int token) const;
  std::span<const double> probabilities(int state, int token) const;
  /// Tool-invocation state reached when `tool` is issued from generation state `state`.
  int tool_state(int state, int tool) const;
  /// The deterministic tool function f_tool: S_tool -> S_ret.
  int tool_return(int tool, int tool_state) const;
  bool tool_disabled(int tool, int tool_state) const;

  /// Distribution over generation states used to draw prompts.
  std::span<const double> initial_dist() const noexcept { return initial_; }

  /// Full kernel as CSV rows (state, action, successor, probability).
  std::string kernel_csv() const;

 private:
  friend TaMdp build_env(const TaMdpSpec& spec);
  std::size_t token_slot(int state, int token) const;

  TaMdpSpec spec_;
  std::vector<int> succ_;
  std::vector<double> prob_;
  std::vector<int> tool_target_;  // [gen state][tool] -> tool state
  std::vector<int> tool_fn_;      // [tool][tool state local] -> return state
  std::vector<char> tool_off_;    // [tool][tool state local]
  std::vector<char> terminal_;
  std::vector<double> initial_;
  int goal_ = 0;
};

/// Builds the kernel and tool functions as a pure function of the spec.
TaMdp build_env(const TaMdpSpec& spec);

/// Samples one episode. Tool hops consume no randomness; the generator is
/// only advanced by policy decisions and stochastic token transitions.
Trajectory sample_trajectory(const TaMdp& env, const PolicyParams& policy, int prompt_id, Rng& rng);

/// Number of tool invocations along the trajectory. Calls are counted
/// sequentially: every call raises the level and nothing lowers it.
int trajectory_depth(const Trajectory& traj);

/// |S_gen| + depth * |S_ret|.
int effective_state_dim(const TaMdpSpec& spec, int depth);

/// Draws an index from a categorical distribution given by `probs`.
int sample_categorical(std::span<const double> probs, Rng& rng);

}  // namespace tamdp

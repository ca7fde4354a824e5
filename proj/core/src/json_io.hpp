#pragma once

// Private JSON helpers; nlohmann/json stays out of the public headers.

#include <cmath>
#include <optional>

#include <json.hpp>

#include "tamdp/env.hpp"
#include "tamdp/optim.hpp"
#include "tamdp/rewards.hpp"

namespace tamdp::detail {

using nlohmann::json;

inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
inline json number_or_null(const std::optional<double>& x) { return x ? number_or_null(*x) : json(nullptr); }

inline json to_json(const TaMdpSpec& s) {
  return {{"n_gen", s.n_gen},       {"n_tool", s.n_tool},   {"n_ret", s.n_ret},
          {"n_vocab", s.n_vocab},   {"n_tools", s.n_tools}, {"d_max", s.d_max},
          {"gamma", s.gamma},       {"horizon", s.horizon}, {"env_seed", s.env_seed},
          {"branch", s.branch},     {"disabled_tool_frac", s.disabled_tool_frac}};
}

inline json to_json(const RewardSpec& s) {
  json kinds = json::array();
  for (auto k : s.kinds) kinds.push_back(to_string(k));
  return {{"k", s.k},
          {"weights", s.weights},
          {"kinds", kinds},
          {"r_max", s.r_max()},
          {"alpha_target", s.alpha_target},
          {"reward_seed", s.reward_seed}};
}

inline json to_json(const GrpoConfig& c) {
  return {{"group_size", c.group_size},
          {"kl_coef", c.kl_coef},
          {"norm_eps", c.norm_eps},
          {"clip_eps", c.clip_eps},
          {"iters", c.iters},
          {"lipschitz_estimate", c.lipschitz_estimate},
          {"step_size", c.step_size()},
          {"mode", to_string(c.mode)},
          {"inner_epochs", c.inner_epochs},
          {"prompts_per_iter", c.prompts_per_iter},
          {"opt_seed", c.opt_seed}};
}

}  // namespace tamdp::detail

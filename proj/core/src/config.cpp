#include "tamdp/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "tamdp/errors.hpp"

namespace tamdp {

namespace {

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw std::invalid_argument("empty list item");
    out.push_back(item);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

long long parse_int(const std::string& v) {
  long long x = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || p != end) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return x;
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t x = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || p != end) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return x;
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return x;
}

int parse_int32(const std::string& v) {
  const auto x = parse_int(v);
  if (x < -2147483647LL || x > 2147483647LL) throw std::invalid_argument("integer out of range");
  return static_cast<int>(x);
}

bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::string format_number(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_same_v<T, double>)
      out += format_number(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out;
}

bool is_integer(double v) { return std::isfinite(v) && std::floor(v) == v; }

// Expected grid field per experiment; empty means any field (or none).
std::string expected_grid_field(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::ConvergenceK:
      return "k";
    case ExperimentKind::GroupSize:
      return "group_size";
    case ExperimentKind::Decomposition:
      return "alpha_target";
    case ExperimentKind::GeneralizationDepth:
      return "d_max";
    case ExperimentKind::BetaSweep:
      return "kl_coef";
    case ExperimentKind::AlignmentDynamics:
    case ExperimentKind::BoundCheck:
      return "";
  }
  return "";
}

const std::set<std::string> kGridFields = {"k", "group_size", "alpha_target", "d_max", "kl_coef"};

void check_rewards(const RewardSpec& r, const std::string& where, std::vector<Diagnostic>& d) {
  if (r.k < 1) {
    d.push_back({"rewards.k" + where, "must be >= 1"});
    return;
  }
  if (static_cast<int>(r.weights.size()) != r.k)
    d.push_back({"rewards.weights" + where, "expected " + std::to_string(r.k) + " weights"});
  for (double w : r.weights)
    if (!(w > 0.0) || !std::isfinite(w)) {
      d.push_back({"rewards.weights" + where, "every weight must be finite and > 0"});
      break;
    }
  if (static_cast<int>(r.kinds.size()) != r.k)
    d.push_back({"rewards.kinds" + where, "expected " + std::to_string(r.k) + " kinds"});
  if (!(std::abs(r.alpha_target) <= 0.95))
    d.push_back({"rewards.alpha_target" + where, "must lie in [-0.95, 0.95]"});
  else if (r.k > 1 && !(r.alpha_target > -1.0 / (r.k - 1)))
    d.push_back({"rewards.alpha_target" + where,
                 "infeasible equicorrelation for K = " + std::to_string(r.k) + ": must exceed " +
                     format_number(-1.0 / (r.k - 1))});
}

void check_env(const TaMdpSpec& e, const std::string& where, std::vector<Diagnostic>& d) {
  try {
    e.validate();
  } catch (const ConfigError& err) {
    d.push_back({err.field() + where, std::string(err.what()).substr(err.field().size() + 2)});
  }
  if (e.d_max > e.horizon) d.push_back({"env.d_max" + where, "exceeds the horizon budget (each call uses a step)"});
}

void check_optim(const GrpoConfig& o, const std::string& where, std::vector<Diagnostic>& d) {
  try {
    o.validate();
  } catch (const ConfigError& err) {
    d.push_back({err.field() + where, std::string(err.what()).substr(err.field().size() + 2)});
    return;
  }
  const double eta = o.step_size();
  if (!std::isfinite(eta) || eta > 10.0)
    d.push_back({"optim.lipschitz_estimate" + where, "step size 1/(L sqrt(T)) = " + format_number(eta) + " exceeds 10"});
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::ConvergenceK:
      return "convergence-k";
    case ExperimentKind::GroupSize:
      return "group-size";
    case ExperimentKind::Decomposition:
      return "decomposition";
    case ExperimentKind::GeneralizationDepth:
      return "generalization-depth";
    case ExperimentKind::AlignmentDynamics:
      return "alignment-dynamics";
    case ExperimentKind::BetaSweep:
      return "beta-sweep";
    case ExperimentKind::BoundCheck:
      return "bound-check";
  }
  return "convergence-k";
}

std::optional<ExperimentKind> parse_experiment_kind(const std::string& text) {
  for (auto k : {ExperimentKind::ConvergenceK, ExperimentKind::GroupSize, ExperimentKind::Decomposition,
                 ExperimentKind::GeneralizationDepth, ExperimentKind::AlignmentDynamics, ExperimentKind::BetaSweep,
                 ExperimentKind::BoundCheck})
    if (to_string(k) == text) return k;
  return std::nullopt;
}

std::string format_diagnostics(const std::vector<Diagnostic>& diags) {
  std::string out;
  for (const auto& d : diags) out += d.field + ": " + d.message + "\n";
  return out;
}

ExperimentConfig parse_config(const std::string& text, std::vector<Diagnostic>& diags) {
  ExperimentConfig c;
  bool have_experiment = false, have_kinds = false;
  auto& e = c.env;
  auto& r = c.rewards;
  auto& o = c.optim;
  auto& a = c.analysis;
  r.weights.clear();
  r.kinds.clear();

  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"experiment",
       [&](const std::string& v) {
         const auto k = parse_experiment_kind(v);
         if (!k) throw std::invalid_argument("unknown experiment '" + v + "'");
         c.experiment = *k;
         have_experiment = true;
       }},
      {"out_dir", [&](const std::string& v) { c.out_dir = v; }},
      {"seeds",
       [&](const std::string& v) {
         c.seeds.clear();
         for (const auto& s : split_list(v)) c.seeds.push_back(parse_uint(s));
       }},
      {"n_train_prompts", [&](const std::string& v) { c.n_train_prompts = parse_double(v); }},
      {"delta", [&](const std::string& v) { c.delta = parse_double(v); }},
      {"env.n_gen", [&](const std::string& v) { e.n_gen = parse_int32(v); }},
      {"env.n_tool", [&](const std::string& v) { e.n_tool = parse_int32(v); }},
      {"env.n_ret", [&](const std::string& v) { e.n_ret = parse_int32(v); }},
      {"env.n_vocab", [&](const std::string& v) { e.n_vocab = parse_int32(v); }},
      {"env.n_tools", [&](const std::string& v) { e.n_tools = parse_int32(v); }},
      {"env.d_max", [&](const std::string& v) { e.d_max = parse_int32(v); }},
      {"env.gamma", [&](const std::string& v) { e.gamma = parse_double(v); }},
      {"env.horizon", [&](const std::string& v) { e.horizon = parse_int32(v); }},
      {"env.env_seed", [&](const std::string& v) { e.env_seed = parse_uint(v); }},
      {"env.branch", [&](const std::string& v) { e.branch = parse_int32(v); }},
      {"env.disabled_tool_frac", [&](const std::string& v) { e.disabled_tool_frac = parse_double(v); }},
      {"rewards.k", [&](const std::string& v) { r.k = parse_int32(v); }},
      {"rewards.weights",
       [&](const std::string& v) {
         r.weights.clear();
         for (const auto& s : split_list(v)) r.weights.push_back(parse_double(s));
       }},
      {"rewards.kinds",
       [&](const std::string& v) {
         r.kinds.clear();
         for (const auto& s : split_list(v)) r.kinds.push_back(parse_component_kind(s));
         have_kinds = true;
       }},
      {"rewards.alpha_target", [&](const std::string& v) { r.alpha_target = parse_double(v); }},
      {"rewards.reward_seed", [&](const std::string& v) { r.reward_seed = parse_uint(v); }},
      {"rewards.r_max", [&](const std::string& v) { c.r_max = parse_double(v); }},
      {"rewards.component_weight", [&](const std::string& v) { c.component_weight = parse_double(v); }},
      {"optim.group_size", [&](const std::string& v) { o.group_size = parse_int32(v); }},
      {"optim.kl_coef", [&](const std::string& v) { o.kl_coef = parse_double(v); }},
      {"optim.norm_eps", [&](const std::string& v) { o.norm_eps = parse_double(v); }},
      {"optim.clip_eps", [&](const std::string& v) { o.clip_eps = parse_double(v); }},
      {"optim.iters", [&](const std::string& v) { o.iters = parse_int32(v); }},
      {"optim.lipschitz_estimate", [&](const std::string& v) { o.lipschitz_estimate = parse_double(v); }},
      {"optim.mode", [&](const std::string& v) { o.mode = parse_grpo_mode(v); }},
      {"optim.inner_epochs", [&](const std::string& v) { o.inner_epochs = parse_int32(v); }},
      {"optim.prompts_per_iter", [&](const std::string& v) { o.prompts_per_iter = parse_int32(v); }},
      {"optim.opt_seed", [&](const std::string& v) { o.opt_seed = parse_uint(v); }},
      {"grid.field", [&](const std::string& v) { c.grid.field = v; }},
      {"grid.values",
       [&](const std::string& v) {
         c.grid.values.clear();
         for (const auto& s : split_list(v)) c.grid.values.push_back(parse_double(s));
       }},
      {"analysis.eval_rollouts", [&](const std::string& v) { a.eval_rollouts = parse_int32(v); }},
      {"analysis.variance_replicates", [&](const std::string& v) { a.variance_replicates = parse_int32(v); }},
      {"analysis.variance_mode", [&](const std::string& v) { a.variance_mode = parse_grpo_mode(v); }},
      {"analysis.rms_window", [&](const std::string& v) { a.rms_window = parse_int32(v); }},
      {"analysis.threshold", [&](const std::string& v) { a.threshold = parse_double(v); }},
      {"analysis.checkpoint_every", [&](const std::string& v) { a.checkpoint_every = parse_int32(v); }},
      {"analysis.alignment_rollouts", [&](const std::string& v) { a.alignment_rollouts = parse_int32(v); }},
      {"analysis.kl_target", [&](const std::string& v) { a.kl_target = parse_double(v); }},
      {"analysis.fisher_per_prompt", [&](const std::string& v) { a.fisher_per_prompt = parse_int32(v); }},
      {"analysis.fisher_ridge", [&](const std::string& v) { a.fisher_ridge = parse_double(v); }},
      {"analysis.train_fraction", [&](const std::string& v) { a.train_fraction = parse_double(v); }},
      {"analysis.lipschitz_probe", [&](const std::string& v) { a.lipschitz_probe = parse_bool(v); }},
  };

  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      diags.push_back({"line " + std::to_string(lineno), "expected 'key = value'"});
      continue;
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) {
      diags.push_back({key, "unknown key (line " + std::to_string(lineno) + ")"});
      continue;
    }
    if (!seen.insert(key).second) {
      diags.push_back({key, "duplicate key (line " + std::to_string(lineno) + ")"});
      continue;
    }
    try {
      it->second(value);
    } catch (const ConfigError& err) {
      diags.push_back({key, std::string(err.what()).substr(err.field().size() + 2)});
    } catch (const std::exception& err) {
      diags.push_back({key, err.what()});
    }
  }
  if (!have_experiment && !seen.count("experiment")) diags.push_back({"experiment", "required"});
  if (!have_kinds && r.k >= 1 && c.grid.field != "k") r.kinds = RewardSpec::default_kinds(r.k);
  return c;
}

RewardSpec cell_rewards(const ExperimentConfig& config, int k, double alpha_target) {
  RewardSpec r = config.rewards;
  const bool k_changed = k != r.k;
  r.k = k;
  r.alpha_target = alpha_target;
  if (r.weights.empty() && config.r_max && k >= 1) r.weights.assign(static_cast<std::size_t>(k), *config.r_max / k);
  if (r.weights.empty() && config.component_weight && k >= 1)
    r.weights.assign(static_cast<std::size_t>(k), *config.component_weight);
  if ((r.kinds.empty() || k_changed) && k >= 1) r.kinds = RewardSpec::default_kinds(k);
  return r;
}

ExperimentConfig cell_config(const ExperimentConfig& config, double value) {
  ExperimentConfig c = config;
  const auto& f = config.grid.field;
  if (f == "k") {
    c.rewards = cell_rewards(config, static_cast<int>(value), config.rewards.alpha_target);
  } else {
    if (f == "alpha_target") c.rewards.alpha_target = value;
    if (f == "group_size") c.optim.group_size = static_cast<int>(value);
    if (f == "d_max") c.env.d_max = static_cast<int>(value);
    if (f == "kl_coef") c.optim.kl_coef = value;
    c.rewards = cell_rewards(c, c.rewards.k, c.rewards.alpha_target);
  }
  return c;
}

std::vector<Diagnostic> validate_config(const ExperimentConfig& config) {
  std::vector<Diagnostic> d;
  const auto& g = config.grid;

  if (config.seeds.empty()) d.push_back({"seeds", "at least one seed is required"});
  if (config.out_dir.empty()) d.push_back({"out_dir", "must not be empty"});
  if (!(config.n_train_prompts >= 1.0)) d.push_back({"n_train_prompts", "must be >= 1"});
  if (!(config.delta > 0.0 && config.delta < 1.0)) d.push_back({"delta", "must lie in (0, 1)"});

  const int weight_sources =
      static_cast<int>(!config.rewards.weights.empty()) + static_cast<int>(config.r_max.has_value()) +
      static_cast<int>(config.component_weight.has_value());
  if (weight_sources == 0)
    d.push_back({"rewards.weights", "required unless rewards.r_max or rewards.component_weight is set"});
  if (weight_sources > 1)
    d.push_back({"rewards.r_max", "give only one of rewards.weights, rewards.r_max, rewards.component_weight"});
  if (config.r_max && !(*config.r_max > 0.0)) d.push_back({"rewards.r_max", "must be > 0"});
  if (config.component_weight && !(*config.component_weight > 0.0))
    d.push_back({"rewards.component_weight", "must be > 0"});
  if (g.field == "k" && !config.rewards.weights.empty())
    d.push_back({"rewards.weights", "cannot be fixed while sweeping k; set rewards.r_max or rewards.component_weight instead"});

  const auto expected = expected_grid_field(config.experiment);
  if (!g.field.empty() && !kGridFields.count(g.field))
    d.push_back({"grid.field", "must be one of k, group_size, alpha_target, d_max, kl_coef"});
  if (!expected.empty() && g.field != expected)
    d.push_back({"grid.field", to_string(config.experiment) + " sweeps '" + expected + "'"});
  if (!g.field.empty() && g.values.empty()) d.push_back({"grid.values", "required when grid.field is set"});
  if (g.field.empty() && !g.values.empty()) d.push_back({"grid.field", "required when grid.values is set"});

  const auto& a = config.analysis;
  if (a.eval_rollouts < 2) d.push_back({"analysis.eval_rollouts", "must be >= 2"});
  if (a.variance_replicates < 2) d.push_back({"analysis.variance_replicates", "must be >= 2"});
  if (a.rms_window < 1) d.push_back({"analysis.rms_window", "must be >= 1"});
  if (a.checkpoint_every < 1) d.push_back({"analysis.checkpoint_every", "must be >= 1"});
  if (a.alignment_rollouts < 3) d.push_back({"analysis.alignment_rollouts", "must be >= 3"});
  if (!(a.kl_target >= 0.0)) d.push_back({"analysis.kl_target", "must be >= 0"});
  if (a.fisher_per_prompt < 1) d.push_back({"analysis.fisher_per_prompt", "must be >= 1"});
  if (!(a.fisher_ridge >= 0.0)) d.push_back({"analysis.fisher_ridge", "must be >= 0"});
  if (!(a.train_fraction > 0.0 && a.train_fraction < 1.0)) d.push_back({"analysis.train_fraction", "must lie in (0, 1)"});
  if (config.experiment == ExperimentKind::ConvergenceK && config.optim.iters < 50)
    d.push_back({"optim.iters", "the rate fit needs at least 50 iterations"});

  // Per-cell checks cover the values each cell actually runs with.
  std::vector<std::optional<double>> cells;
  if (g.field.empty() || g.values.empty() || !kGridFields.count(g.field))
    cells.push_back(std::nullopt);
  else
    for (double v : g.values) cells.push_back(v);
  std::set<std::string> reported;
  for (const auto& v : cells) {
    std::vector<Diagnostic> local;
    const std::string where = v ? " (grid value " + format_number(*v) + ")" : "";
    if (v) {
      const bool int_field = g.field == "k" || g.field == "group_size" || g.field == "d_max";
      if (int_field && !is_integer(*v)) {
        d.push_back({"grid.values", "'" + g.field + "' values must be integers, got " + format_number(*v)});
        continue;
      }
      if (g.field == "kl_coef" && !(*v >= 0.0)) {
        d.push_back({"grid.values", "kl_coef values must be >= 0"});
        continue;
      }
    }
    const auto c = v ? cell_config(config, *v) : cell_config(config, 0.0);
    check_env(c.env, where, local);
    check_optim(c.optim, where, local);
    if (weight_sources > 0) check_rewards(c.rewards, where, local);
    for (auto& x : local)
      if (reported.insert(x.field + x.message).second) d.push_back(std::move(x));
  }
  return d;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  std::vector<Diagnostic> diags;
  auto config = parse_config(ss.str(), diags);
  if (diags.empty()) diags = validate_config(config);
  if (!diags.empty()) throw ConfigError(diags.front().field, "invalid configuration\n" + format_diagnostics(diags));
  return config;
}

std::string to_config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  const auto& e = c.env;
  const auto& r = c.rewards;
  const auto& o = c.optim;
  const auto& a = c.analysis;
  os << "experiment = " << to_string(c.experiment) << "\n"
     << "out_dir = " << c.out_dir << "\n"
     << "seeds = " << join(c.seeds) << "\n"
     << "n_train_prompts = " << format_number(c.n_train_prompts) << "\n"
     << "delta = " << format_number(c.delta) << "\n\n"
     << "env.n_gen = " << e.n_gen << "\nenv.n_tool = " << e.n_tool << "\nenv.n_ret = " << e.n_ret
     << "\nenv.n_vocab = " << e.n_vocab << "\nenv.n_tools = " << e.n_tools << "\nenv.d_max = " << e.d_max
     << "\nenv.gamma = " << format_number(e.gamma) << "\nenv.horizon = " << e.horizon
     << "\nenv.env_seed = " << e.env_seed << "\nenv.branch = " << e.branch
     << "\nenv.disabled_tool_frac = " << format_number(e.disabled_tool_frac) << "\n\n"
     << "rewards.k = " << r.k << "\n";
  if (c.r_max) os << "rewards.r_max = " << format_number(*c.r_max) << "\n";
  if (c.component_weight) os << "rewards.component_weight = " << format_number(*c.component_weight) << "\n";
  if (!r.weights.empty()) os << "rewards.weights = " << join(r.weights) << "\n";
  if (!r.kinds.empty() && c.grid.field != "k") {
    os << "rewards.kinds = ";
    for (std::size_t i = 0; i < r.kinds.size(); ++i) os << (i ? ", " : "") << to_string(r.kinds[i]);
    os << "\n";
  }
  os << "rewards.alpha_target = " << format_number(r.alpha_target) << "\nrewards.reward_seed = " << r.reward_seed
     << "\n\n"
     << "optim.group_size = " << o.group_size << "\noptim.kl_coef = " << format_number(o.kl_coef)
     << "\noptim.norm_eps = " << format_number(o.norm_eps) << "\noptim.clip_eps = " << format_number(o.clip_eps)
     << "\noptim.iters = " << o.iters << "\noptim.lipschitz_estimate = " << format_number(o.lipschitz_estimate)
     << "\noptim.mode = " << to_string(o.mode) << "\noptim.inner_epochs = " << o.inner_epochs
     << "\noptim.prompts_per_iter = " << o.prompts_per_iter << "\noptim.opt_seed = " << o.opt_seed << "\n\n";
  if (!c.grid.field.empty()) os << "grid.field = " << c.grid.field << "\ngrid.values = " << join(c.grid.values) << "\n\n";
  os << "analysis.eval_rollouts = " << a.eval_rollouts << "\nanalysis.variance_replicates = " << a.variance_replicates
     << "\nanalysis.variance_mode = " << to_string(a.variance_mode) << "\nanalysis.rms_window = " << a.rms_window
     << "\nanalysis.threshold = " << format_number(a.threshold) << "\nanalysis.checkpoint_every = " << a.checkpoint_every
     << "\nanalysis.alignment_rollouts = " << a.alignment_rollouts
     << "\nanalysis.kl_target = " << format_number(a.kl_target) << "\nanalysis.fisher_per_prompt = " << a.fisher_per_prompt
     << "\nanalysis.fisher_ridge = " << format_number(a.fisher_ridge)
     << "\nanalysis.train_fraction = " << format_number(a.train_fraction)
     << "\nanalysis.lipschitz_probe = " << (a.lipschitz_probe ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace tamdp

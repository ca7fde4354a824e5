#include "tamdp/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "json_io.hpp"
#include "tamdp/analysis.hpp"
#include "tamdp/errors.hpp"
#include "tamdp/io.hpp"
#include "tamdp/rng.hpp"

namespace tamdp {

namespace {

using detail::json;
using detail::number_or_null;
namespace fs = std::filesystem;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream ids for seeds derived from the run seed.
enum Stream : std::uint64_t {
  kVarianceStream = 0x7661,
  kInitEvalStream = 0x6530,
  kFinalEvalStream = 0x6531,
  kProbeStream = 0x6c70,
  kCheckpointStream = 0x636b,
  kGeneralizationStream = 0x6765,
  kHeldOutStream = 0x686f,
};

double sqr(double x) { return x * x; }

double mean(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Standard error of the mean with the (n - 1) convention; NaN below 2 values.
double stderr_of_mean(const std::vector<double>& v) {
  if (v.size() < 2) return kNaN;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += sqr(x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

std::string format_value(double v) {
  if (std::isnan(v)) return "base";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json metrics_json(const Metrics& m, bool with_series) {
  json values = json::object();
  for (const auto& [k, v] : m.values) values[k] = number_or_null(v);
  if (!with_series || m.series.empty()) return values;
  json series = json::object();
  for (const auto& [k, v] : m.series) {
    json arr = json::array();
    for (double x : v) arr.push_back(number_or_null(x));
    series[k] = arr;
  }
  return {{"values", values}, {"series", series}};
}

json inputs_json(const ExperimentConfig& c) {
  const auto& a = c.analysis;
  return {{"experiment", to_string(c.experiment)},
          {"env", detail::to_json(c.env)},
          {"rewards", detail::to_json(c.rewards)},
          {"optim", detail::to_json(c.optim)},
          {"grid", {{"field", c.grid.field}, {"values", c.grid.values}}},
          {"seeds", c.seeds},
          {"n_train_prompts", c.n_train_prompts},
          {"delta", c.delta},
          {"analysis",
           {{"eval_rollouts", a.eval_rollouts},
            {"variance_replicates", a.variance_replicates},
            {"variance_mode", to_string(a.variance_mode)},
            {"rms_window", a.rms_window},
            {"threshold", a.threshold},
            {"checkpoint_every", a.checkpoint_every},
            {"alignment_rollouts", a.alignment_rollouts},
            {"kl_target", a.kl_target},
            {"fisher_per_prompt", a.fisher_per_prompt},
            {"fisher_ridge", a.fisher_ridge},
            {"train_fraction", a.train_fraction},
            {"lipschitz_probe", a.lipschitz_probe}}}};
}

// One (cell, seed) job. Files go to `dir`; the outcome carries what the
// cell aggregation needs.
struct Job {
  std::size_t cell_index = 0;
  double value = kNaN;
  std::uint64_t seed = 0;
  ExperimentConfig config;  // cell config
  fs::path dir;
};

double objective(const TaMdp& env, const PolicyParams& policy, const PolicyParams& ref, const RewardModel& rewards,
                 double beta, std::span<const double> dist, int n, std::uint64_t seed) {
  const auto ev = evaluate_policy(env, policy, rewards, dist, n, seed);
  return ev.mean_composite - beta * kl_to_ref(policy, ref, ev.visitation);
}

void write_seed_files(const Job& job, const std::optional<RunLog>& log, const Metrics& m,
                      const std::vector<std::pair<std::string, std::string>>& extra_files = {}) {
  if (log) write_file_atomic(job.dir / "runlog.csv", log->to_csv());
  for (const auto& [name, content] : extra_files) write_file_atomic(job.dir / name, content);
  json doc = {{"inputs", inputs_json(job.config)},
              {"cell_value", number_or_null(job.value)},
              {"seed", job.seed},
              {"metrics", metrics_json(m, true)}};
  write_file_atomic(job.dir / "report.json", doc.dump(2) + "\n");
}

// Training run with the rate-fit and bound inputs shared by convergence-k,
// group-size and bound-check.
Metrics run_training_job(const Job& job, bool with_variance) {
  const auto& c = job.config;
  const auto env = build_env(c.env);
  const RewardModel rewards(env, c.rewards);
  const auto ref = PolicyParams::uniform(env);
  const double r_max = c.rewards.r_max();
  Metrics m;

  double variance = kNaN;
  if (with_variance) {
    GrpoConfig vc = c.optim;
    vc.mode = c.analysis.variance_mode;
    variance = grad_variance(ref, ref, ref, env, rewards, vc, c.analysis.variance_replicates,
                             derive_seed(job.seed, {kVarianceStream}));
  }
  const double j0 =
      objective(env, ref, ref, rewards, c.optim.kl_coef, {}, c.analysis.eval_rollouts, derive_seed(job.seed, {kInitEvalStream}));
  const double j_gap = std::max(0.0, r_max - j0);

  double lipschitz = kNaN;
  if (c.analysis.lipschitz_probe)
    lipschitz = lipschitz_probe(ref, ref, env, rewards, c.optim, derive_seed(job.seed, {kProbeStream}));

  const auto res = grpo_train(env, rewards, c.optim, ref, job.seed);
  const auto norms = res.log.grad_norms();
  const double j_final = objective(env, res.policy, ref, rewards, c.optim.kl_coef, {}, c.analysis.eval_rollouts,
                                   derive_seed(job.seed, {kFinalEvalStream}));

  double mean_sq = 0.0;
  for (double g : norms) mean_sq += g * g;
  mean_sq /= static_cast<double>(norms.size());
  double var_sq = 0.0;
  for (double g : norms) var_sq += sqr(g * g - mean_sq);
  const double mean_sq_se =
      norms.size() > 1 ? std::sqrt(var_sq / static_cast<double>(norms.size() - 1) / static_cast<double>(norms.size()))
                       : kNaN;

  std::optional<RateFit> fit;
  if (norms.size() >= 50) {
    try {
      fit = fit_rate_exponent(norms);
    } catch (const NumericError&) {
      // Exact zero gradients (all-degenerate groups) leave the raw series unfittable.
    }
  }
  const double sb2 = with_variance ? variance : 0.0;
  const double bound = convergence_bound(j_gap, c.optim.lipschitz_estimate, sb2, 0.0, c.rewards.k,
                                         c.optim.group_size, c.optim.kl_coef, r_max, c.optim.iters);
  const auto hit = iters_to_threshold(norms, c.analysis.threshold);

  m.set("gamma_hat_raw", fit ? fit->gamma_hat : kNaN);
  m.set("gamma_stderr_raw", fit ? fit->stderr : kNaN);
  m.set("grad_norm_last", norms.back());
  m.set("grad_variance", variance);
  m.set("j_initial", j0);
  m.set("j_final", j_final);
  m.set("j_gap", j_gap);
  m.set("mean_sq_grad_norm", mean_sq);
  m.set("mean_sq_grad_norm_stderr", mean_sq_se);
  m.set("bound_rhs", bound);
  m.set("lipschitz_probe", lipschitz);
  m.set("iters_to_eps_raw", hit ? *hit : kNaN);
  m.series["grad_norm"] = norms;
  write_seed_files(job, res.log, m);
  return m;
}

Metrics run_decomposition_job(const Job& job) {
  const auto& c = job.config;
  const auto env = build_env(c.env);
  const std::uint64_t seeds[] = {job.seed};
  DecompositionOptions opts;
  opts.n_eval = c.analysis.eval_rollouts;
  const auto rep = measure_decomposition_gap(env, c.rewards, c.optim, seeds, opts);
  Metrics m;
  m.set("j_joint", rep.j_joint);
  m.set("j_decomposed", rep.j_decomposed);
  m.set("empirical_gap", rep.empirical_gap);
  m.set("gap_stderr", rep.gap_stderr);
  m.set("sigma_norm2", rep.sigma_norm2);
  m.set("bound_rhs", rep.bound_rhs);
  m.set("tightness", rep.tightness.value_or(kNaN));
  m.set("alpha_hat", rep.alpha_hat.value_or(kNaN));
  m.series["covariance"].assign(rep.covariances.data(), rep.covariances.data() + rep.covariances.size());
  write_seed_files(job, rep.joint_logs.front(), m, {{"runlog-decomposed.csv", rep.decomposed_logs.front().to_csv()}});
  return m;
}

Metrics run_generalization_job(const Job& job) {
  const auto& c = job.config;
  const auto env = build_env(c.env);
  const RewardModel rewards(env, c.rewards);
  const auto ref = PolicyParams::uniform(env);
  const std::vector<double> source(env.initial_dist().begin(), env.initial_dist().end());
  const auto target = make_tilted_distribution(source, c.analysis.kl_target);

  TrainOptions topts;
  topts.prompt_dist = source;
  const auto res = grpo_train(env, rewards, c.optim, ref, job.seed, topts);

  GeneralizationOptions g;
  g.n_rollouts = c.analysis.eval_rollouts;
  g.n_train_prompts = c.n_train_prompts;
  g.delta = c.delta;
  g.group_size = c.optim.group_size;
  g.fisher = {c.analysis.fisher_per_prompt, c.analysis.fisher_ridge};
  const auto rep = measure_generalization_gap(res.policy, ref, env, rewards, source, target, g,
                                              derive_seed(job.seed, {kGeneralizationStream}));
  Metrics m;
  m.set("v_source", rep.v_source);
  m.set("v_target", rep.v_target);
  m.set("gap", rep.gap);
  m.set("gap_stderr", rep.gap_stderr);
  m.set("kl_shift", rep.kl_shift);
  m.set("kl_infinite", rep.kl_infinite ? 1.0 : 0.0);
  m.set("shift_term", rep.terms.shift);
  m.set("complexity_term", rep.terms.complexity);
  m.set("group_term", rep.terms.group);
  m.set("bound_total", rep.terms.total);
  m.set("d_eff", rep.d_eff);
  m.set("d_eff_ref", rep.d_eff_ref);
  m.set("dim", rep.dim);
  m.set("dims_ratio", rep.dims_ratio);
  m.set("dims_ratio_ref", rep.dims_ratio_ref);
  m.set("effective_state_dim", effective_state_dim(c.env, c.env.d_max));
  write_seed_files(job, res.log, m);
  return m;
}

Metrics run_alignment_job(const Job& job) {
  const auto& c = job.config;
  const auto env = build_env(c.env);
  const RewardModel rewards(env, c.rewards);
  const auto ref = PolicyParams::uniform(env);
  const auto& w = c.rewards.weights;

  std::vector<double> ts, alphas, ses;
  auto checkpoint = [&](int t, const PolicyParams& policy) {
    const auto ev = evaluate_policy(env, policy, rewards, {}, c.analysis.alignment_rollouts,
                                    derive_seed(job.seed, {kCheckpointStream, static_cast<std::uint64_t>(t)}));
    ts.push_back(t);
    alphas.push_back(estimate_alignment(ev.components, w).alpha_hat.value_or(kNaN));
    ses.push_back(alignment_stderr(ev.components, w).value_or(kNaN));
  };
  checkpoint(0, ref);
  TrainOptions topts;
  const int every = c.analysis.checkpoint_every;
  topts.on_iteration = [&](int t, const PolicyParams& p) {
    if (t % every == 0) checkpoint(t, p);
  };
  const auto res = grpo_train(env, rewards, c.optim, ref, job.seed, topts);

  int violations = 0;
  for (std::size_t i = 1; i < alphas.size(); ++i)
    if (!(alphas[i] >= alphas[i - 1] - std::sqrt(sqr(ses[i]) + sqr(ses[i - 1])))) ++violations;
  Metrics m;
  m.set("alpha_hat_initial", alphas.front());
  m.set("alpha_hat_final", alphas.back());
  m.set("n_checkpoints", static_cast<double>(alphas.size()));
  m.set("monotone_violations", violations);
  m.series["checkpoint_t"] = ts;
  m.series["alpha_hat"] = alphas;
  m.series["alpha_stderr"] = ses;
  write_seed_files(job, res.log, m);
  return m;
}

// Training prompts are the first ceil(fraction * n_gen) generation states;
// the rest are held out. Each side keeps the initial distribution's shape.
std::pair<std::vector<double>, std::vector<double>> split_prompts(const TaMdp& env, double fraction) {
  const int n = env.spec().n_gen;
  const int n_train = std::clamp(static_cast<int>(std::ceil(fraction * n)), 1, n - 1);
  std::vector<double> train(static_cast<std::size_t>(n), 0.0), held(static_cast<std::size_t>(n), 0.0);
  const auto init = env.initial_dist();
  double st = 0.0, sh = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (i < n_train) {
      train[u] = init[u];
      st += init[u];
    } else {
      held[u] = init[u];
      sh += init[u];
    }
  }
  if (!(st > 0.0) || !(sh > 0.0)) throw NumericError("prompt split leaves one side with no probability mass");
  for (auto& x : train) x /= st;
  for (auto& x : held) x /= sh;
  return {train, held};
}

Metrics run_beta_job(const Job& job) {
  const auto& c = job.config;
  const auto env = build_env(c.env);
  if (env.spec().n_gen < 2) throw ConfigError("env.n_gen", "beta-sweep needs at least 2 generation states");
  const RewardModel rewards(env, c.rewards);
  const auto ref = PolicyParams::uniform(env);
  const auto [train, held] = split_prompts(env, c.analysis.train_fraction);
  const double r_max = c.rewards.r_max();

  TrainOptions topts;
  topts.prompt_dist = train;
  const auto res = grpo_train(env, rewards, c.optim, ref, job.seed, topts);

  const auto ev = evaluate_policy(env, res.policy, rewards, train, c.analysis.eval_rollouts,
                                  derive_seed(job.seed, {kFinalEvalStream}));
  const double final_objective = ev.mean_composite - c.optim.kl_coef * kl_to_ref(res.policy, ref, ev.visitation);
  const double proxy = ev.mean_composite / r_max;

  // Ground truth: raw accuracy on held-out prompts, or the normalized
  // composite there when no accuracy component exists.
  int acc = -1;
  for (int k = 0; k < c.rewards.k; ++k)
    if (c.rewards.kinds[static_cast<std::size_t>(k)] == ComponentKind::Accuracy) {
      acc = k;
      break;
    }
  Rng rng = make_rng(job.seed, {kHeldOutStream});
  const int n = c.analysis.eval_rollouts;
  double truth = 0.0, truth_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    auto traj = sample_trajectory(env, res.policy, sample_categorical(held, rng), rng);
    double v;
    if (acc >= 0) {
      v = rewards.raw_component(acc, traj);
    } else {
      const auto comps = rewards.evaluate(traj);
      v = composite(comps, c.rewards.weights) / r_max;
    }
    truth += v;
    truth_sq += v * v;
  }
  truth /= n;
  const double truth_se = std::sqrt(std::max(0.0, truth_sq / n - truth * truth) / (n - 1.0));

  double tail = 0.0;
  const auto& recs = res.log.records;
  const std::size_t n_tail = std::min<std::size_t>(100, recs.size());
  for (std::size_t i = recs.size() - n_tail; i < recs.size(); ++i) tail += recs[i].objective_estimate;

  Metrics m;
  m.set("final_objective", final_objective);
  m.set("final_objective_logged", n_tail ? tail / static_cast<double>(n_tail) : kNaN);
  m.set("proxy", proxy);
  m.set("proxy_stderr", ev.stderr_composite / r_max);
  m.set("truth", truth);
  m.set("truth_stderr", truth_se);
  m.set("overopt_gap", proxy - truth);
  m.set("kl_final", kl_to_ref(res.policy, ref, ev.visitation));
  write_seed_files(job, res.log, m);
  return m;
}

Metrics run_job(ExperimentKind kind, const Job& job) {
  switch (kind) {
    case ExperimentKind::ConvergenceK:
    case ExperimentKind::BoundCheck:
      return run_training_job(job, true);
    case ExperimentKind::GroupSize:
      return run_training_job(job, false);
    case ExperimentKind::Decomposition:
      return run_decomposition_job(job);
    case ExperimentKind::GeneralizationDepth:
      return run_generalization_job(job);
    case ExperimentKind::AlignmentDynamics:
      return run_alignment_job(job);
    case ExperimentKind::BetaSweep:
      return run_beta_job(job);
  }
  throw LabError("unknown experiment");
}

std::vector<double> collect(const std::vector<const SeedOutcome*>& runs, const std::string& name) {
  std::vector<double> out;
  for (const auto* r : runs) {
    const auto v = r->metrics.get(name);
    if (v && std::isfinite(*v)) out.push_back(*v);
  }
  return out;
}

void set_mean(Metrics& m, const std::vector<const SeedOutcome*>& runs, const std::string& name,
              const std::string& as = "") {
  const auto v = collect(runs, name);
  m.set(as.empty() ? name : as, mean(v));
}

// Shared by the training experiments: RMS of ||g_t|| pooled over seeds and
// a centered window, then the rate fit and threshold crossing on it.
void aggregate_training(Metrics& m, const std::vector<const SeedOutcome*>& runs, const ExperimentConfig& c) {
  std::vector<std::vector<double>> series;
  for (const auto* r : runs) series.push_back(r->metrics.series.at("grad_norm"));
  const auto rms = pooled_rms(series, c.analysis.rms_window);
  std::optional<RateFit> fit;
  if (rms.size() >= 50) {
    try {
      fit = fit_rate_exponent(rms);
    } catch (const NumericError&) {
    }
  }
  const auto hit = iters_to_threshold(rms, c.analysis.threshold);
  const auto gammas = collect(runs, "gamma_hat_raw");
  m.set("gamma_hat", fit ? fit->gamma_hat : kNaN);
  m.set("gamma_stderr", fit ? fit->stderr : kNaN);
  m.set("grad_norm_at_T", rms.back());
  m.set("effective_sigma2", mean(collect(runs, "grad_variance")));
  m.set("effective_sigma2_stderr", stderr_of_mean(collect(runs, "grad_variance")));
  m.set("iters_to_eps", hit ? *hit : kNaN);
  m.set("gamma_hat_raw_mean", mean(gammas));
  m.set("gamma_hat_raw_stderr", stderr_of_mean(gammas));
  set_mean(m, runs, "j_final");
  set_mean(m, runs, "mean_sq_grad_norm");
  set_mean(m, runs, "bound_rhs");
  m.series["grad_norm_rms"] = rms;
}

Metrics aggregate_cell(ExperimentKind kind, const std::vector<const SeedOutcome*>& runs, const ExperimentConfig& c) {
  Metrics m;
  if (runs.empty()) return m;
  const double ns = static_cast<double>(runs.size());
  switch (kind) {
    case ExperimentKind::ConvergenceK:
    case ExperimentKind::GroupSize:
      aggregate_training(m, runs, c);
      break;
    case ExperimentKind::BoundCheck: {
      aggregate_training(m, runs, c);
      double se2 = 0.0;
      for (double s : collect(runs, "mean_sq_grad_norm_stderr")) se2 += s * s;
      const double se = std::sqrt(se2) / ns;
      m.set("mean_sq_grad_norm_stderr", se);
      m.set("holds", m.at("mean_sq_grad_norm") <= m.at("bound_rhs") + 3.0 * se ? 1.0 : 0.0);
      break;
    }
    case ExperimentKind::Decomposition: {
      const int k = c.rewards.k;
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
      double se2 = 0.0;
      for (const auto* r : runs) {
        const auto& flat = r->metrics.series.at("covariance");
        cov += Eigen::Map<const Eigen::MatrixXd>(flat.data(), k, k);
        se2 += sqr(r->metrics.at("gap_stderr"));
      }
      cov /= ns;
      set_mean(m, runs, "j_joint");
      set_mean(m, runs, "j_decomposed");
      const double gap = m.at("j_joint") - m.at("j_decomposed");
      const double se = std::sqrt(se2) / ns;
      set_mean(m, runs, "sigma_norm2");
      const double bound = decomposition_bound(cov, c.rewards.weights, c.optim.group_size, m.at("sigma_norm2"));
      m.set("empirical_gap", gap);
      m.set("gap_stderr", se);
      m.set("bound_rhs", bound);
      m.set("tightness", gap > 0.0 ? bound / gap : kNaN);
      m.set("holds", gap <= bound + 3.0 * se ? 1.0 : 0.0);
      set_mean(m, runs, "alpha_hat");
      m.series["covariance"].assign(cov.data(), cov.data() + cov.size());
      break;
    }
    case ExperimentKind::GeneralizationDepth: {
      for (const char* name : {"v_source", "v_target", "gap", "kl_shift", "shift_term", "complexity_term", "group_term",
                               "bound_total", "d_eff", "d_eff_ref", "dim", "dims_ratio", "dims_ratio_ref",
                               "effective_state_dim"})
        set_mean(m, runs, name);
      double se2 = 0.0;
      for (double s : collect(runs, "gap_stderr")) se2 += s * s;
      m.set("gap_stderr", std::sqrt(se2) / ns);
      m.set("gap_seed_stderr", stderr_of_mean(collect(runs, "gap")));
      m.set("holds", m.at("gap") <= m.at("bound_total") + 3.0 * m.at("gap_stderr") ? 1.0 : 0.0);
      break;
    }
    case ExperimentKind::AlignmentDynamics: {
      // Seed-averaged alpha_hat per checkpoint. The standard error of each
      // point is the between-seed spread, which includes both training and
      // evaluation noise; with one seed the jackknife error is used instead.
      const auto& t0 = runs.front()->metrics.series.at("checkpoint_t");
      const std::size_t n_ck = t0.size();
      std::vector<double> mean_a(n_ck), se_a(n_ck), jack(n_ck);
      for (std::size_t i = 0; i < n_ck; ++i) {
        std::vector<double> a;
        double j2 = 0.0;
        for (const auto* r : runs) {
          a.push_back(r->metrics.series.at("alpha_hat").at(i));
          j2 += sqr(r->metrics.series.at("alpha_stderr").at(i));
        }
        mean_a[i] = mean(a);
        jack[i] = std::sqrt(j2) / ns;
        se_a[i] = runs.size() > 1 ? stderr_of_mean(a) : jack[i];
      }
      int violations = 0;
      for (std::size_t i = 1; i < n_ck; ++i)
        if (!(mean_a[i] >= mean_a[i - 1] - std::sqrt(sqr(se_a[i]) + sqr(se_a[i - 1])))) ++violations;
      m.set("alpha_hat_initial", mean_a.front());
      m.set("alpha_hat_final", mean_a.back());
      m.set("monotone_violations", violations);
      m.series["checkpoint_t"] = t0;
      m.series["alpha_hat"] = mean_a;
      m.series["alpha_stderr"] = se_a;
      m.series["alpha_jackknife_stderr"] = jack;
      break;
    }
    case ExperimentKind::BetaSweep:
      for (const char* name :
           {"final_objective", "final_objective_logged", "proxy", "truth", "overopt_gap", "kl_final"})
        set_mean(m, runs, name);
      m.set("overopt_gap_stderr", stderr_of_mean(collect(runs, "overopt_gap")));
      m.set("final_objective_stderr", stderr_of_mean(collect(runs, "final_objective")));
      break;
  }
  m.set("n_seeds", ns);
  return m;
}

// Checks that `name` does not increase along cells sorted by grid value.
double count_increases(const std::vector<CellOutcome>& cells, const std::string& name) {
  int bad = 0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const auto a = cells[i - 1].metrics.get(name), b = cells[i].metrics.get(name);
    if (!a || !b || !(*b <= *a)) ++bad;
  }
  return bad;
}

Metrics aggregate_overall(ExperimentKind kind, const std::vector<CellOutcome>& cells,
                          const std::vector<SeedOutcome>& runs) {
  Metrics m;
  if (cells.empty()) return m;
  switch (kind) {
    case ExperimentKind::ConvergenceK: {
      std::vector<double> g;
      for (const auto& c : cells)
        if (auto v = c.metrics.get("gamma_hat"); v && std::isfinite(*v)) g.push_back(*v);
      m.set("gamma_hat_mean", mean(g));
      // Variance against K over every (cell, seed) pair.
      std::vector<double> x, y;
      for (const auto& r : runs)
        if (r.ok)
          if (auto v = r.metrics.get("grad_variance"); v && std::isfinite(*v)) {
            x.push_back(r.cell_value);
            y.push_back(*v);
          }
      bool fitted = false;
      if (x.size() >= 3 && *std::min_element(x.begin(), x.end()) < *std::max_element(x.begin(), x.end())) {
        const auto fit = ols(x, y);
        m.set("variance_slope", fit.slope);
        m.set("variance_slope_stderr", fit.slope_stderr);
        m.set("variance_intercept", fit.intercept);
        m.set("variance_r2", fit.r2);
        fitted = true;
      }
      if (!fitted) {
        m.set("variance_slope", kNaN);
        m.set("variance_r2", kNaN);
      }
      break;
    }
    case ExperimentKind::GroupSize: {
      const auto& lo = cells.front().metrics;
      for (const auto& c : cells)
        m.set("rms_ratio_G" + format_value(c.value) + "_over_G" + format_value(cells.front().value),
              c.metrics.at("grad_norm_at_T") / lo.at("grad_norm_at_T"));
      break;
    }
    case ExperimentKind::Decomposition: {
      m.set("gap_increases", count_increases(cells, "empirical_gap"));
      double held = 0.0;
      for (const auto& c : cells) held += c.metrics.at("holds");
      m.set("cells_within_bound", held);
      break;
    }
    case ExperimentKind::GeneralizationDepth: {
      m.set("gap_increases", count_increases(cells, "gap"));
      m.set("dims_ratio_increases", count_increases(cells, "dims_ratio"));
      double held = 0.0;
      for (const auto& c : cells) held += c.metrics.at("holds");
      m.set("cells_within_bound", held);
      break;
    }
    case ExperimentKind::AlignmentDynamics: {
      double v = 0.0;
      for (const auto& c : cells) v += c.metrics.at("monotone_violations");
      m.set("monotone_violations", v);
      break;
    }
    case ExperimentKind::BetaSweep:
      m.set("objective_increases", count_increases(cells, "final_objective"));
      m.set("overopt_gap_increases", count_increases(cells, "overopt_gap"));
      break;
    case ExperimentKind::BoundCheck: {
      double held = 0.0;
      for (const auto& c : cells) held += c.metrics.at("holds");
      m.set("cells_within_bound", held);
      break;
    }
  }
  m.set("n_cells", static_cast<double>(cells.size()));
  return m;
}

std::string runs_csv(const std::string& field, const std::vector<SeedOutcome>& runs) {
  std::vector<std::string> names;
  for (const auto& r : runs)
    for (const auto& [k, v] : r.metrics.values)
      if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
  std::ostringstream os;
  os << grid_column(field) << ",seed,status";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (const auto& r : runs) {
    os << format_value(r.cell_value) << ',' << r.seed << ',' << (r.ok ? "ok" : "failed");
    for (const auto& n : names) {
      const auto v = r.metrics.get(n);
      os << ',' << (v ? format_double(*v) : "");
    }
    os << '\n';
  }
  return os.str();
}

// Per-cell columns, leading with the fixed headline ones for each experiment.
std::vector<std::string> summary_columns(ExperimentKind kind, const std::vector<CellOutcome>& cells) {
  std::vector<std::string> lead;
  switch (kind) {
    case ExperimentKind::ConvergenceK:
    case ExperimentKind::GroupSize:
    case ExperimentKind::BoundCheck:
      lead = {"gamma_hat", "gamma_stderr", "grad_norm_at_T", "effective_sigma2", "iters_to_eps"};
      break;
    case ExperimentKind::Decomposition:
      lead = {"empirical_gap", "bound_rhs", "tightness"};
      break;
    case ExperimentKind::GeneralizationDepth:
      lead = {"gap", "bound_total", "d_eff", "dims_ratio"};
      break;
    case ExperimentKind::AlignmentDynamics:
      lead = {"alpha_hat_initial", "alpha_hat_final"};
      break;
    case ExperimentKind::BetaSweep:
      lead = {"final_objective", "overopt_gap"};
      break;
  }
  for (const auto& c : cells)
    for (const auto& [k, v] : c.metrics.values)
      if (std::find(lead.begin(), lead.end(), k) == lead.end()) lead.push_back(k);
  return lead;
}

std::string summary_csv(ExperimentKind kind, const std::string& field, const std::vector<CellOutcome>& cells) {
  const auto cols = summary_columns(kind, cells);
  std::ostringstream os;
  os << grid_column(field);
  for (const auto& c : cols) os << ',' << c;
  os << '\n';
  for (const auto& c : cells) {
    os << format_value(c.value);
    for (const auto& n : cols) {
      const auto v = c.metrics.get(n);
      os << ',' << (v ? format_double(*v) : "");
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace

void Metrics::set(const std::string& name, double value) {
  for (auto& [k, v] : values)
    if (k == name) {
      v = value;
      return;
    }
  values.emplace_back(name, value);
}

std::optional<double> Metrics::get(const std::string& name) const {
  for (const auto& [k, v] : values)
    if (k == name) return v;
  return std::nullopt;
}

double Metrics::at(const std::string& name) const {
  const auto v = get(name);
  if (!v) throw LabError("missing metric '" + name + "'");
  return *v;
}

int ExperimentResult::n_failed() const {
  return static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const SeedOutcome& r) { return !r.ok; }));
}

const CellOutcome* ExperimentResult::cell(double value) const {
  for (const auto& c : cells)
    if (c.value == value) return &c;
  return nullptr;
}

std::string grid_column(const std::string& field) {
  if (field == "k") return "K";
  if (field == "group_size") return "G";
  if (field == "alpha_target") return "alpha";
  if (field == "d_max") return "D_max";
  if (field == "kl_coef") return "beta";
  return "cell";
}

std::int64_t seed_offset_from_env() {
  const char* raw = std::getenv("TAMDP_LAB_SEED_OFFSET");
  if (!raw || !*raw) return 0;
  const std::string text(raw);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || used == 0)
    throw ConfigError("TAMDP_LAB_SEED_OFFSET", "must be an integer, got '" + text + "'");
  return v;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  if (const auto diags = validate_config(config); !diags.empty())
    throw ConfigError(diags.front().field, "invalid configuration\n" + format_diagnostics(diags));
  if (options.jobs < 1) throw ConfigError("jobs", "must be >= 1");

  ExperimentResult result;
  result.kind = config.experiment;
  result.root = fs::path(options.out_dir.value_or(config.out_dir)) / to_string(config.experiment);

  // Cells in ascending grid order so monotonicity checks read left to right.
  std::vector<double> values = config.grid.values;
  if (config.grid.field.empty() || values.empty()) values = {kNaN};
  std::stable_sort(values.begin(), values.end(), [](double a, double b) { return a < b; });
  values.erase(std::unique(values.begin(), values.end(),
                           [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }),
               values.end());

  std::vector<Job> jobs;
  for (std::size_t ci = 0; ci < values.size(); ++ci) {
    const double v = values[ci];
    // With no grid field cell_config only fills in the reward weights.
    const ExperimentConfig cc = cell_config(config, std::isnan(v) ? 0.0 : v);
    for (auto s : config.seeds) {
      Job j;
      j.cell_index = ci;
      j.value = v;
      j.seed = s + static_cast<std::uint64_t>(options.seed_offset);
      j.config = cc;
      j.dir = result.root / ("cell-" + format_value(v)) / ("seed-" + std::to_string(j.seed));
      jobs.push_back(std::move(j));
    }
  }

  result.runs.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      const auto& job = jobs[i];
      SeedOutcome out;
      out.cell_value = job.value;
      out.seed = job.seed;
      try {
        out.metrics = run_job(config.experiment, job);
        out.ok = true;
      } catch (const std::exception& e) {
        out.error = e.what();
      }
      result.runs[i] = std::move(out);
      const int d = done.fetch_add(1) + 1;
      if (options.on_progress) {
        std::lock_guard lock(progress_mutex);
        options.on_progress(result.runs[i], d, static_cast<int>(jobs.size()));
      }
    }
  };
  const int n_threads = std::min<int>(options.jobs, static_cast<int>(jobs.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t ci = 0; ci < values.size(); ++ci) {
    std::vector<const SeedOutcome*> ok;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].cell_index == ci && result.runs[i].ok) ok.push_back(&result.runs[i]);
    CellOutcome cell;
    cell.value = values[ci];
    cell.n_ok = static_cast<int>(ok.size());
    try {
      cell.metrics = aggregate_cell(config.experiment, ok, cell_config(config, std::isnan(cell.value) ? 0.0 : cell.value));
    } catch (const LabError&) {
      cell.metrics.set("aggregation_failed", 1.0);
    }
    result.cells.push_back(std::move(cell));
  }
  std::vector<CellOutcome> complete;
  for (const auto& c : result.cells)
    if (c.n_ok > 0) complete.push_back(c);
  result.overall = aggregate_overall(config.experiment, complete, result.runs);

  const auto& field = config.grid.field;
  write_file_atomic(result.root / "config.txt", to_config_text(config));
  write_file_atomic(result.root / "runs.csv", runs_csv(field, result.runs));
  write_file_atomic(result.root / "summary.csv", summary_csv(config.experiment, field, result.cells));

  json cells = json::array();
  for (const auto& c : result.cells)
    cells.push_back({{"value", number_or_null(c.value)}, {"n_ok", c.n_ok}, {"metrics", metrics_json(c.metrics, true)}});
  json report = {{"inputs", inputs_json(config)},
                 {"seed_offset", options.seed_offset},
                 {"cells", cells},
                 {"overall", metrics_json(result.overall, false)},
                 {"n_failed", result.n_failed()}};
  write_file_atomic(result.root / "report.json", report.dump(2) + "\n");

  const auto manifest = result.root / "failures.json";
  if (result.n_failed() > 0) {
    json failures = json::array();
    for (const auto& r : result.runs)
      if (!r.ok) failures.push_back({{"cell_value", number_or_null(r.cell_value)}, {"seed", r.seed}, {"error", r.error}});
    write_file_atomic(manifest, json{{"failures", failures}}.dump(2) + "\n");
  } else {
    std::error_code ec;
    fs::remove(manifest, ec);
  }
  return result;
}

}  // namespace tamdp

#include "tamdp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tamdp/errors.hpp"

namespace tamdp {

namespace {

double sqr(double x) { return x * x; }

void check_distribution(std::span<const double> p, const char* what) {
  double total = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw NumericError(std::string(what) + " has a negative or non-finite entry");
    total += x;
  }
  if (p.empty() || std::abs(total - 1.0) > 1e-9) throw NumericError(std::string(what) + " must sum to 1");
}

double min_eigenvalue(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace

LinearFit ols(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("ols inputs differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw NumericError("ols needs at least 3 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += sqr(x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += sqr(y[i] - my);
  }
  if (sxx <= 0.0) throw NumericError("ols needs non-constant x");
  LinearFit fit;
  fit.n = n;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) sse += sqr(y[i] - fit.intercept - fit.slope * x[i]);
  fit.slope_stderr = std::sqrt(std::max(sse, 0.0) / static_cast<double>(n - 2) / sxx);
  fit.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  return fit;
}

RateFit fit_rate_exponent(std::span<const double> grad_norms) {
  const std::size_t n = grad_norms.size();
  if (n < 50) throw NumericError("rate fit needs at least 50 points");
  for (double g : grad_norms)
    if (!(g > 0.0) || !std::isfinite(g)) throw NumericError("rate fit needs strictly positive finite values");

  // Window [first, n] in 1-based t, sampled at up to 200 geometrically spaced points.
  const auto first = static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(n))) + 1;
  const double lo = std::log(static_cast<double>(first)), hi = std::log(static_cast<double>(n));
  constexpr int kPoints = 200;
  std::vector<std::size_t> ts;
  for (int j = 0; j < kPoints; ++j) {
    const auto t = static_cast<std::size_t>(std::llround(std::exp(lo + (hi - lo) * j / (kPoints - 1))));
    if (ts.empty() || t != ts.back()) ts.push_back(std::clamp(t, first, n));
  }
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  std::vector<double> x, y;
  for (auto t : ts) {
    x.push_back(std::log(static_cast<double>(t)));
    y.push_back(std::log(grad_norms[t - 1]));
  }
  const auto fit = ols(x, y);
  return {-fit.slope, fit.slope_stderr, ts.size()};
}

std::vector<double> pooled_rms(std::span<const std::vector<double>> series, int window) {
  if (series.empty()) throw DimensionError("pooled_rms needs at least one series");
  if (window < 1) throw NumericError("rms window must be >= 1");
  const std::size_t n = series.front().size();
  for (const auto& s : series)
    if (s.size() != n) throw DimensionError("pooled_rms series differ in length");
  // Prefix sums of the seed-summed squares make every window O(1).
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double sq = 0.0;
    for (const auto& s : series) sq += s[t] * s[t];
    prefix[t + 1] = prefix[t] + sq;
  }
  const auto half = static_cast<std::size_t>(window / 2);
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t a = t >= half ? t - half : 0, b = std::min(n, t + half + 1);
    out[t] = std::sqrt((prefix[b] - prefix[a]) / static_cast<double>((b - a) * series.size()));
  }
  return out;
}

std::vector<double> median_filter(std::span<const double> series, int window) {
  if (window < 1) throw NumericError("median window must be >= 1");
  const int half = window / 2;
  const int n = static_cast<int>(series.size());
  std::vector<double> out(series.size()), buf;
  for (int i = 0; i < n; ++i) {
    const int a = std::max(0, i - half), b = std::min(n, i + half + 1);
    buf.assign(series.begin() + a, series.begin() + b);
    const auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
    std::nth_element(buf.begin(), mid, buf.end());
    double med = *mid;
    if (buf.size() % 2 == 0) med = 0.5 * (med + *std::max_element(buf.begin(), mid));
    out[static_cast<std::size_t>(i)] = med;
  }
  return out;
}

std::optional<int> iters_to_threshold(std::span<const double> grad_norms, double eps, int window) {
  const auto smooth = median_filter(grad_norms, window);
  for (std::size_t i = 0; i < smooth.size(); ++i)
    if (smooth[i] <= eps) return static_cast<int>(i) + 1;
  return std::nullopt;
}

double convergence_bound(double j_gap, double lipschitz, double sigma_base2, double sigma_comp2, int k, int group_size,
                         double beta, double r_max, int iters) {
  if (iters < 1) throw NumericError("T must be >= 1");
  if (group_size < 1) throw NumericError("G must be >= 1");
  for (double v : {j_gap, lipschitz, sigma_base2, sigma_comp2, beta, r_max})
    if (!(v >= 0.0)) throw NumericError("convergence bound inputs must be non-negative");
  const double rt = std::sqrt(static_cast<double>(iters));
  return 2.0 * lipschitz * j_gap / rt + lipschitz * (sigma_base2 + k * sigma_comp2) / (group_size * rt) +
         2.0 * beta * r_max * r_max / rt;
}

double sample_complexity(double lipschitz, double sigma_base2, double sigma_comp2, int k, int group_size, double eps) {
  if (!(eps > 0.0)) throw NumericError("eps must be > 0");
  if (group_size < 1) throw NumericError("G must be >= 1");
  const double g = static_cast<double>(group_size);
  return sqr(lipschitz) * sqr(sigma_base2 + k * sigma_comp2) / (g * g * std::pow(eps, 4));
}

ConvergenceReport convergence_report(const RunLog& log, double j_gap, double sigma_base2, double sigma_comp2,
                                     double threshold) {
  const auto norms = log.grad_norms();
  if (norms.empty()) throw NumericError("run log has no records");
  ConvergenceReport rep;
  const auto fit = fit_rate_exponent(norms);
  rep.gamma_hat = fit.gamma_hat;
  rep.gamma_stderr = fit.stderr;
  rep.grad_norm_at_T = norms.back();
  const auto& c = log.config;
  const int k = log.reward_spec.k;
  rep.bound_rhs = convergence_bound(j_gap, c.lipschitz_estimate, sigma_base2, sigma_comp2, k, c.group_size, c.kl_coef,
                                    log.reward_spec.r_max(), c.iters);
  rep.effective_sigma2 = sigma_base2 + k * sigma_comp2;
  rep.threshold = threshold;
  rep.iters_to_threshold = iters_to_threshold(norms, threshold);
  return rep;
}

double decomposition_bound(const Eigen::MatrixXd& covariances, std::span<const double> weights, int group_size,
                           double sigma_norm2) {
  const auto k = covariances.rows();
  if (covariances.cols() != k || static_cast<std::size_t>(k) != weights.size())
    throw DimensionError("covariance matrix must be K x K with K weights");
  if (group_size < 1) throw NumericError("G must be >= 1");
  if (!(sigma_norm2 >= 0.0)) throw NumericError("sigma_norm2 must be non-negative");
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j)
      if (std::abs(covariances(i, j) - covariances(j, i)) > 1e-12 * (1.0 + std::abs(covariances(i, j))))
        throw NumericError("covariance matrix is not symmetric");
  double cross = 0.0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j)
      cross += weights[static_cast<std::size_t>(i)] * weights[static_cast<std::size_t>(j)] * std::abs(covariances(i, j));
  const double kd = static_cast<double>(k), g = static_cast<double>(group_size);
  return kd * (kd - 1.0) / (2.0 * g) * cross + (kd - 1.0) / g * sigma_norm2;
}

double estimate_sigma_norm2(const GroupBatch& batch, std::span<const double> weights, double norm_eps) {
  const auto g = static_cast<int>(batch.component_rewards.rows());
  const auto k = batch.component_rewards.cols();
  if (g < 2) throw DimensionError("sigma_norm2 needs a group of at least 2");
  if (batch.composite_rewards.size() != g) throw DimensionError("composite and component reward counts differ");
  if (static_cast<std::size_t>(k) != weights.size()) throw DimensionError("weights length does not match components");
  const auto gs = static_cast<std::size_t>(g);
  const auto joint = group_advantages(std::span<const double>(batch.composite_rewards.data(), gs), norm_eps);
  double best = 0.0;
  std::vector<double> col(gs);
  for (Eigen::Index c = 0; c < k; ++c) {
    for (int i = 0; i < g; ++i) col[static_cast<std::size_t>(i)] = batch.component_rewards(i, c);
    const Eigen::VectorXd diff = group_advantages(col, norm_eps) - joint;
    const double var = (diff.array() - diff.mean()).square().sum() / (g - 1);
    best = std::max(best, var);
  }
  return best;
}

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 2) throw NumericError("covariance needs at least 2 samples");
  const Eigen::MatrixXd centered = samples.rowwise() - samples.colwise().mean();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(samples.rows() - 1);
  return 0.5 * (cov + cov.transpose());
}

DecompositionReport measure_decomposition_gap(const TaMdp& env, const RewardSpec& reward_spec, const GrpoConfig& config,
                                              std::span<const std::uint64_t> seeds,
                                              const DecompositionOptions& options) {
  if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  reward_spec.validate();
  const RewardModel rewards(env, reward_spec);
  const auto ref = PolicyParams::uniform(env);
  const auto& w = reward_spec.weights;

  DecompositionReport rep;
  rep.covariances = Eigen::MatrixXd::Zero(reward_spec.k, reward_spec.k);
  double var_sum = 0.0;
  Eigen::MatrixXd pooled;
  for (auto seed : seeds) {
    GrpoConfig joint_cfg = config, dec_cfg = config;
    joint_cfg.mode = GrpoMode::Joint;
    dec_cfg.mode = GrpoMode::Decomposed;

    double norm_sum = 0.0;
    std::size_t norm_count = 0;
    TrainOptions joint_opts;
    joint_opts.prompt_dist = options.prompt_dist;
    joint_opts.on_batches = [&](int, std::span<const GroupBatch> batches) {
      for (const auto& b : batches) {
        norm_sum += estimate_sigma_norm2(b, w, config.norm_eps);
        ++norm_count;
      }
    };
    TrainOptions dec_opts;
    dec_opts.prompt_dist = options.prompt_dist;
    const auto joint = grpo_train(env, rewards, joint_cfg, ref, seed, joint_opts);
    const auto dec = grpo_train(env, rewards, dec_cfg, ref, seed, dec_opts);

    const std::uint64_t eval_seed = derive_seed(seed, {0x6a70});
    const auto ej = evaluate_policy(env, joint.policy, rewards, options.prompt_dist, options.n_eval, eval_seed);
    const auto ed = evaluate_policy(env, dec.policy, rewards, options.prompt_dist, options.n_eval, eval_seed);
    const double jj = ej.mean_composite - config.kl_coef * kl_to_ref(joint.policy, ref, ej.visitation);
    const double jd = ed.mean_composite - config.kl_coef * kl_to_ref(dec.policy, ref, ed.visitation);
    rep.j_joint += jj;
    rep.j_decomposed += jd;
    var_sum += sqr(ej.stderr_composite) + sqr(ed.stderr_composite);
    rep.covariances += sample_covariance(ej.components);
    rep.sigma_norm2 += norm_count > 0 ? norm_sum / static_cast<double>(norm_count) : 0.0;
    rep.joint_logs.push_back(joint.log);
    rep.decomposed_logs.push_back(dec.log);
    if (pooled.size() == 0) {
      pooled = ej.components;
    } else {
      Eigen::MatrixXd next(pooled.rows() + ej.components.rows(), pooled.cols());
      next << pooled, ej.components;
      pooled = std::move(next);
    }
  }
  const double ns = static_cast<double>(seeds.size());
  rep.n_seeds = seeds.size();
  rep.j_joint /= ns;
  rep.j_decomposed /= ns;
  rep.empirical_gap = rep.j_joint - rep.j_decomposed;
  rep.gap_stderr = std::sqrt(var_sum) / ns;
  rep.covariances /= ns;
  rep.sigma_norm2 /= ns;
  rep.bound_rhs = decomposition_bound(rep.covariances, w, config.group_size, rep.sigma_norm2);
  rep.alpha_hat = estimate_alignment(pooled, w).alpha_hat;
  if (rep.empirical_gap > 0.0) rep.tightness = rep.bound_rhs / rep.empirical_gap;
  return rep;
}

double effective_dimension(const FisherPair& fishers) {
  const auto& hs = fishers.h_source;
  const auto& ht = fishers.h_target;
  if (hs.rows() != hs.cols() || ht.rows() != ht.cols() || hs.rows() != ht.rows())
    throw DimensionError("Fisher matrices must be square and equally sized");
  if (!(fishers.ridge >= 0.0)) throw NumericError("ridge must be non-negative");
  const Eigen::Index d = hs.rows();
  if ((hs - hs.transpose()).cwiseAbs().maxCoeff() > 1e-8 || (ht - ht.transpose()).cwiseAbs().maxCoeff() > 1e-8)
    throw NumericError("Fisher matrices must be symmetric");

  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < d; ++i)
    if (hs.row(i).cwiseAbs().maxCoeff() > 0.0 || ht.row(i).cwiseAbs().maxCoeff() > 0.0) active.push_back(i);
  if (active.empty()) return 0.0;
  const auto m = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd a(m, m), b(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      a(i, j) = hs(active[static_cast<std::size_t>(i)], active[static_cast<std::size_t>(j)]);
      b(i, j) = ht(active[static_cast<std::size_t>(i)], active[static_cast<std::size_t>(j)]);
    }
  a.diagonal().array() += fishers.ridge;

  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-14))
    throw SingularityError("source Fisher matrix plus ridge is not invertible", min_eigenvalue(a));
  const double trace = llt.solve(b).trace();
  if (!std::isfinite(trace)) throw SingularityError("effective dimension solve produced a non-finite trace", min_eigenvalue(a));
  return trace;
}

GeneralizationTerms generalization_bound(double r_max, double kl_shift, double n, double d_eff, double delta,
                                         int d_max, int group_size) {
  if (!(delta > 0.0 && delta < 1.0)) throw NumericError("delta must lie in (0, 1)");
  if (!(n >= 1.0)) throw NumericError("n must be >= 1");
  if (group_size < 1) throw NumericError("G must be >= 1");
  if (!(r_max >= 0.0) || !(kl_shift >= 0.0) || !(d_eff >= 0.0) || d_max < 0)
    throw NumericError("bound inputs must be non-negative");
  GeneralizationTerms t;
  t.shift = std::isinf(kl_shift) ? std::numeric_limits<double>::infinity() : r_max * std::sqrt(2.0 * kl_shift / n);
  t.complexity = r_max * d_max * std::sqrt(d_eff * std::log(n / delta) / n);
  t.group = 2.0 * r_max * d_max / std::sqrt(static_cast<double>(group_size));
  t.total = t.shift + t.complexity + t.group;
  return t;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("distributions differ in length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<double> make_tilted_distribution(std::span<const double> source, double kl_target) {
  check_distribution(source, "source distribution");
  if (!(kl_target >= 0.0) || !std::isfinite(kl_target)) throw NumericError("kl_target must be finite and >= 0");
  std::vector<double> out(source.begin(), source.end());
  if (kl_target == 0.0) return out;

  const std::size_t n = source.size();
  std::size_t top = 0;
  for (std::size_t s = 0; s < n; ++s)
    if (source[s] > 0.0) top = s;
  const double kl_max = -std::log(source[top]);
  if (!(kl_target < kl_max)) throw NumericError("kl_target is not reachable by tilting this source");

  const double scale = n > 1 ? 1.0 / static_cast<double>(n - 1) : 1.0;
  auto tilt = [&](double lambda, std::vector<double>& t) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < n; ++s)
      if (source[s] > 0.0) m = std::max(m, std::log(source[s]) + lambda * scale * static_cast<double>(s));
    double z = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      t[s] = source[s] > 0.0 ? std::exp(std::log(source[s]) + lambda * scale * static_cast<double>(s) - m) : 0.0;
      z += t[s];
    }
    for (double& x : t) x /= z;
    return kl_divergence(t, source);
  };

  double lo = 0.0, hi = 1.0;
  while (tilt(hi, out) < kl_target) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e12) throw NumericError("kl_target is not reachable by tilting this source");
  }
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double kl = tilt(mid, out);
    if (std::abs(kl - kl_target) <= 1e-10) return out;
    (kl < kl_target ? lo : hi) = mid;
    if (hi - lo <= 1e-15 * hi) break;
  }
  tilt(0.5 * (lo + hi), out);
  return out;
}

FisherPair fisher_pair(const PolicyParams& policy, const TaMdp& env, std::span<const double> source,
                       std::span<const double> target, const FisherOptions& options, std::uint64_t seed) {
  check_compatible(policy, env);
  const auto n_gen = static_cast<std::size_t>(env.spec().n_gen);
  if (source.size() != n_gen || target.size() != n_gen)
    throw DimensionError("prompt distributions must cover the generation states");
  if (options.per_prompt < 1) throw NumericError("per_prompt must be >= 1");
  FisherAccumulator hs(policy.dim()), ht(policy.dim());
  const double m = options.per_prompt;
  for (std::size_t s = 0; s < n_gen; ++s) {
    if (source[s] <= 0.0 && target[s] <= 0.0) continue;
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(s)});
    for (int i = 0; i < options.per_prompt; ++i) {
      const auto traj = sample_trajectory(env, policy, static_cast<int>(s), rng);
      const auto score = sparse_score(policy, env, traj);
      if (source[s] > 0.0) hs.add(score, source[s] / m);
      if (target[s] > 0.0) ht.add(score, target[s] / m);
    }
  }
  return {hs.finish(0.0), ht.finish(0.0), options.ridge};
}

GeneralizationReport measure_generalization_gap(const PolicyParams& policy, const PolicyParams& ref_policy,
                                                const TaMdp& env, const RewardModel& rewards,
                                                std::span<const double> source, std::span<const double> target,
                                                const GeneralizationOptions& options, std::uint64_t seed) {
  check_distribution(source, "source distribution");
  check_distribution(target, "target distribution");
  GeneralizationReport rep;
  rep.n = options.n_train_prompts;
  rep.delta = options.delta;
  rep.dim = static_cast<int>(policy.dim());

  const auto vs = evaluate_policy(env, policy, rewards, source, options.n_rollouts, derive_seed(seed, {1}));
  const auto vt = evaluate_policy(env, policy, rewards, target, options.n_rollouts, derive_seed(seed, {2}));
  rep.v_source = vs.mean_composite;
  rep.v_target = vt.mean_composite;
  rep.v_source_stderr = vs.stderr_composite;
  rep.v_target_stderr = vt.stderr_composite;
  rep.gap = std::abs(rep.v_target - rep.v_source);
  rep.gap_stderr = std::hypot(vs.stderr_composite, vt.stderr_composite);

  rep.kl_shift = kl_divergence(target, source);
  rep.kl_infinite = std::isinf(rep.kl_shift);

  if (!options.skip_fisher && !rep.kl_infinite) {
    const auto fisher_seed = derive_seed(seed, {3});
    rep.d_eff = effective_dimension(fisher_pair(policy, env, source, target, options.fisher, fisher_seed));
    rep.d_eff_ref = effective_dimension(fisher_pair(ref_policy, env, source, target, options.fisher, fisher_seed));
    rep.dims_ratio = rep.d_eff / rep.dim;
    rep.dims_ratio_ref = rep.d_eff_ref / rep.dim;
  }
  rep.terms = generalization_bound(rewards.spec().r_max(), rep.kl_shift, rep.n, rep.d_eff, rep.delta,
                                   env.spec().d_max, options.group_size);
  return rep;
}

}  // namespace tamdp

// Acceptance suite: one PASS/FAIL line per criterion.
//
//   tamdp_acceptance [criterion ...]
//
// With no arguments every criterion runs. Experiment outputs go to
// $TAMDP_ACCEPTANCE_OUT (default: <tmp>/tamdp-acceptance). Exit status is 0
// only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tamdp/analysis.hpp"
#include "tamdp/config.hpp"
#include "tamdp/experiments.hpp"
#include "tamdp/io.hpp"
#include "tamdp/optim.hpp"

namespace fs = std::filesystem;
using namespace tamdp;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, x);
  return buf;
}

fs::path out_root() {
  if (const char* e = std::getenv("TAMDP_ACCEPTANCE_OUT"); e && *e) return e;
  return fs::temp_directory_path() / "tamdp-acceptance";
}

struct Timed {
  ExperimentResult result;
  double seconds = 0.0;
};

// Each config runs at most once per process.
const Timed& experiment(const std::string& name) {
  static std::map<std::string, Timed> cache;
  if (auto it = cache.find(name); it != cache.end()) return it->second;
  const auto config = load_config((fs::path(TAMDP_CONFIG_DIR) / (name + ".conf")).string());
  RunOptions opt;
  opt.out_dir = out_root().string();
  const auto t0 = Clock::now();
  Timed t;
  t.result = run_experiment(config, opt);
  t.seconds = seconds_since(t0);
  return cache.emplace(name, std::move(t)).first->second;
}

double cell_metric(const ExperimentResult& r, double v, const std::string& name) {
  const auto* c = r.cell(v);
  if (!c) throw LabError("missing cell " + fmt(v) + " in " + r.root.string());
  return c->metrics.at(name);
}

// Lists values along cells and counts steps where the value rises.
int rises(const ExperimentResult& r, const std::vector<double>& grid, const std::string& name, std::string& listing) {
  int bad = 0;
  double prev = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double v = cell_metric(r, grid[i], name);
    listing += (i ? " " : "") + fmt(v);
    if (i > 0 && !(v <= prev)) ++bad;
    prev = v;
  }
  return bad;
}

std::string failures_note(const ExperimentResult& r) {
  return r.n_failed() ? "; " + std::to_string(r.n_failed()) + " job(s) failed" : "";
}

Verdict rate_exponent() {
  const auto& t = experiment("convergence-k");
  Verdict v{true, "gamma_hat"};
  double sum = 0.0;
  for (double k : {1.0, 2.0, 4.0}) {
    const double g = cell_metric(t.result, k, "gamma_hat");
    v.pass &= g >= 0.35 && g <= 0.65;
    v.detail += " K=" + fmt(k) + ":" + fmt(g);
    sum += g;
  }
  const double mean = sum / 3.0;
  v.pass &= mean >= 0.40 && mean <= 0.60;
  v.pass &= t.seconds <= 900.0;
  v.pass &= t.result.n_failed() == 0;
  v.detail += "; mean " + fmt(mean) + " in [0.40, 0.60]; " + fmt(t.seconds, 3) + " s <= 900 s" + failures_note(t.result);
  return v;
}

Verdict variance_linearity() {
  const auto& t = experiment("convergence-k");
  const double slope = t.result.overall.at("variance_slope"), r2 = t.result.overall.at("variance_r2");
  Verdict v;
  v.pass = slope > 0.0 && r2 >= 0.8 && t.result.n_failed() == 0;
  v.detail = "slope " + fmt(slope) + " > 0, R^2 " + fmt(r2) + " >= 0.8 over K=1..4;";
  for (double k : {1.0, 2.0, 3.0, 4.0}) v.detail += " " + fmt(cell_metric(t.result, k, "effective_sigma2"));
  v.detail += "; shares the convergence-k run (" + fmt(t.seconds, 3) + " s)";
  return v;
}

Verdict group_size() {
  const auto& t = experiment("group-size");
  const double ratio = cell_metric(t.result, 16, "grad_norm_at_T") / cell_metric(t.result, 4, "grad_norm_at_T");
  Verdict v;
  v.pass = ratio >= 0.35 && ratio <= 0.75 && t.seconds <= 900.0 && t.result.n_failed() == 0;
  v.detail = "||g||_T G16/G4 = " + fmt(ratio) + " in [0.35, 0.75]; " + fmt(t.seconds, 3) + " s <= 900 s" +
             failures_note(t.result);
  return v;
}

Verdict decomposition() {
  const auto& t = experiment("decomposition");
  const std::vector<double> grid{-0.4, 0.0, 0.4, 0.8};
  std::string gaps;
  const int up = rises(t.result, grid, "empirical_gap", gaps);
  int outside = 0;
  std::string tight;
  for (double a : grid) {
    const double gap = cell_metric(t.result, a, "empirical_gap"), bound = cell_metric(t.result, a, "bound_rhs");
    const double se = cell_metric(t.result, a, "gap_stderr");
    outside += !(gap <= bound + 3.0 * se);
    tight += " " + fmt(bound / gap, 3);
  }
  Verdict v;
  v.pass = up == 0 && outside == 0 && t.seconds <= 1800.0 && t.result.n_failed() == 0;
  v.detail = "gap over alpha {-0.4,0,0.4,0.8}: " + gaps + " (" + std::to_string(up) + " rise(s)); bound/gap" + tight +
             "; " + std::to_string(outside) + " cell(s) above bound + 3 SE; " + fmt(t.seconds, 3) + " s" +
             failures_note(t.result);
  return v;
}

Verdict generalization() {
  const auto& t = experiment("generalization-depth");
  const std::vector<double> grid{0, 1, 2, 3};
  std::string gaps, ratios;
  const int gap_up = rises(t.result, grid, "gap", gaps);
  const int ratio_up = rises(t.result, grid, "dims_ratio", ratios);
  int outside = 0;
  for (double d : grid) outside += !(cell_metric(t.result, d, "gap") <= cell_metric(t.result, d, "bound_total"));
  Verdict v;
  v.pass = gap_up == 0 && ratio_up == 0 && outside == 0 && t.seconds <= 1800.0 && t.result.n_failed() == 0;
  v.detail = "gap over D_max 0..3: " + gaps + " (" + std::to_string(gap_up) + " rise(s)); d_eff/d: " + ratios + " (" +
             std::to_string(ratio_up) + " rise(s)); " + std::to_string(outside) + " cell(s) above the bound; " +
             fmt(t.seconds, 3) + " s" + failures_note(t.result);
  return v;
}

Verdict alignment() {
  const auto& t = experiment("alignment-dynamics");
  const auto& c = t.result.cells.front().metrics;
  const auto& a = c.series.at("alpha_hat");
  const auto& se = c.series.at("alpha_stderr");
  int bad = 0;
  std::string listing;
  for (std::size_t i = 0; i < a.size(); ++i) {
    listing += (i ? " " : "") + fmt(a[i], 3);
    if (i > 0 && !(a[i] >= a[i - 1] - std::sqrt(se[i] * se[i] + se[i - 1] * se[i - 1]))) ++bad;
  }
  Verdict v;
  v.pass = bad == 0 && t.result.n_failed() == 0 && c.at("n_seeds") >= 3;
  v.detail = "alpha_hat every 500 iters: " + listing + "; " + std::to_string(bad) + " drop(s) beyond 1 SE; " +
             fmt(t.seconds, 3) + " s" + failures_note(t.result);
  return v;
}

Verdict beta_sweep() {
  const auto& t = experiment("beta-sweep");
  const std::vector<double> grid{0.001, 0.01, 0.1};
  std::string obj, gap;
  const int obj_up = rises(t.result, grid, "final_objective", obj);
  const int gap_up = rises(t.result, grid, "overopt_gap", gap);
  Verdict v;
  v.pass = obj_up == 0 && gap_up == 0 && t.result.n_failed() == 0;
  v.detail = "objective over beta: " + obj + " (" + std::to_string(obj_up) + " rise(s)); overopt gap: " + gap + " (" +
             std::to_string(gap_up) + " rise(s)); " + fmt(t.seconds, 3) + " s" + failures_note(t.result);
  return v;
}

// Exact checks: closed-form examples, finite differences, invariances and
// homogeneity laws.
Verdict exact_suite() {
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  int n = 0;
  auto check = [&](bool ok, const std::string& what) {
    ++n;
    if (!ok) failed.push_back(what);
  };
  auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

  check(near(convergence_bound(1, 1, 1, 1, 2, 4, 0.01, 2, 100), 0.2830, 1e-12), "convergence_bound 0.2830");
  check(convergence_bound(0, 0, 0, 0, 0, 1, 0, 0, 100) == 0.0, "convergence_bound zero");
  check(near(sample_complexity(1, 1, 1, 1, 1, 1), 4.0, 1e-12), "sample_complexity 4");
  Eigen::MatrixXd cov(2, 2);
  cov << 0.3, 0.1, 0.1, 0.2;
  const std::vector<double> w11{1.0, 1.0};
  check(near(decomposition_bound(cov, w11, 16, 0.05), 0.009375, 1e-15), "decomposition_bound 0.009375");
  check(decomposition_bound(Eigen::MatrixXd::Zero(2, 2), w11, 16, 0.0) == 0.0, "decomposition_bound zero");
  const Eigen::MatrixXd hs = Eigen::Vector2d(1.0, 2.0).asDiagonal(), ht = Eigen::Vector2d(2.0, 2.0).asDiagonal();
  check(near(effective_dimension({hs, ht, 0.0}), 3.0, 1e-8), "effective_dimension diagonal");
  check(effective_dimension({hs, Eigen::MatrixXd::Zero(2, 2), 0.0}) == 0.0, "effective_dimension zero target");
  const auto gb = generalization_bound(1.0, 0.5, 100, 4, 0.1, 2, 16);
  check(near(gb.shift, 0.1, 1e-12) && near(gb.complexity, 2.0 * std::sqrt(4.0 * std::log(1000.0) / 100.0), 1e-12) &&
            near(gb.group, 1.0, 1e-12),
        "generalization_bound terms");
  const auto gz = generalization_bound(1.0, 0.0, 100, 4, 0.1, 0, 16);
  check(gz.total == 0.0, "generalization_bound zero");
  PolicyParams kp(std::vector<int>{2}), kr(std::vector<int>{2});
  kr.theta()[0] = std::log(3.0);
  const std::vector<double> point{1.0};
  check(near(kl_to_ref(kp, kr, point), 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25), 1e-10), "two-point KL");
  const std::vector<double> r10{1.0, 0.0}, r31{3.0, 1.0}, flat{0.5, 0.5, 0.5};
  const auto a10 = group_advantages(r10, 0.0), a31 = group_advantages(r31, 0.0);
  check(a10[0] == 1.0 && a10[1] == -1.0 && a31[0] == 1.0 && a31[1] == -1.0, "group_advantages (1,-1)");
  check(group_advantages(flat, 1e-4).isZero(0.0), "group_advantages zero variance");
  const std::vector<double> rat2{2.0}, adv1{1.0}, rat05{0.5}, advm1{-1.0};
  check(clipped_surrogate(rat2, adv1, 0.2) == 1.2 && clipped_surrogate(rat05, advm1, 0.2) == -0.8, "clip arithmetic");
  const std::vector<double> w12{1.0, 2.0}, r105{1.0, 0.5};
  check(composite(r105, w12) == 2.0, "composite 2.0");
  TaMdpSpec es;
  es.n_gen = 100;
  es.n_ret = 20;
  es.d_max = 3;
  check(effective_state_dim(es, 3) == 160 && effective_state_dim(es, 0) == 100, "effective_state_dim");
  Eigen::MatrixXd same(50, 2);
  for (int i = 0; i < 50; ++i) same(i, 0) = same(i, 1) = std::sin(i * 0.7);
  check(near(*estimate_alignment(same, w11).alpha_hat, 0.25, 1e-12), "alpha_hat identical components");
  std::vector<double> pl(5000);
  for (int t = 1; t <= 5000; ++t) pl[t - 1] = 3.0 / std::sqrt(static_cast<double>(t));
  check(near(fit_rate_exponent(pl).gamma_hat, 0.5, 1e-6), "rate exponent exact power law");

  Rng rng(2024);
  std::normal_distribution<double> nd;
  // Finite differences of log_prob on random tool-augmented instances.
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TaMdpSpec s;
    s.n_gen = 8;
    s.n_tool = 3;
    s.n_ret = 4;
    s.n_vocab = 5;
    s.n_tools = 2;
    s.horizon = 8;
    s.env_seed = seed;
    const auto env = build_env(s);
    auto p = PolicyParams::uniform(env);
    for (Eigen::Index i = 0; i < p.dim(); ++i) p.theta()[i] = nd(rng);
    for (int rep = 0; rep < 5; ++rep) {
      const auto traj = sample_trajectory(env, p, sample_categorical(env.initial_dist(), rng), rng);
      const auto g = grad_log_prob(p, env, traj);
      double err = 0.0;
      for (Eigen::Index i = 0; i < p.dim(); ++i) {
        auto up = p, dn = p;
        up.theta()[i] += 1e-5;
        dn.theta()[i] -= 1e-5;
        err = std::max(err, std::abs((log_prob(up, env, traj) - log_prob(dn, env, traj)) / 2e-5 - g[i]));
      }
      check(err <= 1e-5 * (1.0 + g.lpNorm<Eigen::Infinity>()), "finite differences seed " + std::to_string(seed));
    }
  }
  // Positive-affine invariance of group advantages.
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> r(8), t(8);
    for (double& x : r) x = nd(rng);
    const double a = std::exp(nd(rng)), b = 5.0 * nd(rng);
    for (int i = 0; i < 8; ++i) t[i] = a * r[i] + b;
    check((group_advantages(r, 0.0) - group_advantages(t, 0.0)).lpNorm<Eigen::Infinity>() <= 1e-9, "affine invariance");
  }
  // effective_dimension(H, H) = d.
  for (int d : {2, 5, 9}) {
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = nd(rng);
    const Eigen::MatrixXd h = m * m.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
    check(near(effective_dimension({h, h, 0.0}), d, 1e-8), "effective_dimension identity d=" + std::to_string(d));
  }
  // Homogeneity laws.
  for (int rep = 0; rep < 50; ++rep) {
    const double j = std::abs(nd(rng)), l = std::abs(nd(rng)) + 0.1, sb = std::abs(nd(rng)), sc = std::abs(nd(rng));
    const int k = 1 + rep % 4, g = 2 + rep, tt = 50 + rep;
    const double e = 0.1 + std::abs(nd(rng));
    check(near(convergence_bound(j, l, sb, sc, k, g, 0.01, 1, 2 * tt) / convergence_bound(j, l, sb, sc, k, g, 0.01, 1, tt),
               1.0 / std::sqrt(2.0), 1e-12),
          "1/sqrt(T) law");
    check(near(sample_complexity(l, sb, sc, k, 4 * g, e) / sample_complexity(l, sb, sc, k, g, e), 1.0 / 16.0, 1e-12),
          "G^-2 law");
    check(near(sample_complexity(l, sb, sc, k, g, e / 2) / sample_complexity(l, sb, sc, k, g, e), 16.0, 1e-12),
          "eps^-4 law");
    const std::vector<double> wk(static_cast<std::size_t>(k), 1.0);
    Eigen::MatrixXd c = Eigen::MatrixXd::Constant(k, k, 0.1 + std::abs(nd(rng)));
    const double d1 = decomposition_bound(c, wk, g, sb);
    check(k == 1 || near(decomposition_bound(c, wk, 2 * g, sb) / d1, 0.5, 1e-12), "1/G decomposition law");
    check(near(generalization_bound(1, sb, 100, 3, 0.05, 2, 4 * g).group / generalization_bound(1, sb, 100, 3, 0.05, 2, g).group,
               0.5, 1e-12),
          "1/sqrt(G) group law");
  }

  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = failed.empty() && secs <= 120.0;
  v.detail = std::to_string(n - static_cast<int>(failed.size())) + "/" + std::to_string(n) + " checks in " +
             fmt(secs, 3) + " s <= 120 s; full example set lives in tamdp_unit_tests";
  for (const auto& f : failed) v.detail += "; FAILED " + f;
  return v;
}

Verdict micro_oracle() {
  const auto env = build_env(oracle::micro_spec());
  auto p = PolicyParams::uniform(env);
  Rng init(13);
  std::normal_distribution<double> nd(0.0, 0.7);
  for (Eigen::Index i = 0; i < p.dim(); ++i) p.theta()[i] = nd(init);
  const RewardModel rewards(env, RewardSpec::uniform(2, 2.0));
  const std::vector<double> dist(env.initial_dist().begin(), env.initial_dist().end());
  GrpoConfig cfg;
  cfg.kl_coef = 0.0;
  const auto exact = oracle::exact_gradients(env, p, rewards, dist, cfg.norm_eps);

  Verdict v{true, ""};
  for (auto mode : {GrpoMode::Joint, GrpoMode::Plain}) {
    cfg.mode = mode;
    // Joint mode targets the exact expectation of its own estimator; the
    // mean-baseline estimator targets (1 - 1/G) times the policy gradient.
    const Eigen::VectorXd target = mode == GrpoMode::Joint ? exact.joint_pair : 0.5 * exact.policy_gradient;
    const int n = 500;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(p.dim()), sum2 = sum;
    for (int r = 0; r < n; ++r) {
      Rng rng = make_rng(99, {static_cast<std::uint64_t>(r)});
      const std::vector<GroupBatch> b{sample_group(env, p, rewards, sample_categorical(dist, rng), 2, rng)};
      const auto g = grpo_gradient(p, p, p, env, b, cfg, rewards.spec().weights).gradient;
      sum += g;
      sum2 += g.cwiseProduct(g);
    }
    const Eigen::VectorXd mean = sum / n;
    const Eigen::VectorXd se = ((sum2 / n - mean.cwiseProduct(mean)) / (n - 1.0)).cwiseMax(0.0).cwiseSqrt();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p.dim(); ++i) {
      const double z = se[i] > 0 ? std::abs(mean[i] - target[i]) / se[i] : (mean[i] == target[i] ? 0.0 : INFINITY);
      worst = std::max(worst, z);
    }
    v.pass &= worst <= 3.0;
    v.detail += (v.detail.empty() ? "" : "; ") + to_string(mode) + " max |mean - exact| / SE = " + fmt(worst, 3);
  }
  v.detail += " over " + std::to_string(p.dim()) + " coordinates, 500 groups of 2";
  return v;
}

// The real-benchmark table is out of reach; the bound calculator is the only
// piece that accepts its inputs (F1 scale r_max = 100, n = 20 training
// samples, D_max = 3, d_eff/d = 0.01).
Verdict real_benchmark_note() {
  Verdict v;
  const double d = 1000.0;
  const auto terms = generalization_bound(100.0, 0.1, 20.0, 0.01 * d, 0.05, 3, 8);
  const bool finite = std::isfinite(terms.total) && terms.shift >= 0 && terms.complexity >= 0 && terms.group >= 0;
  const double g_needed = std::pow(2.0 * 100.0 * 3.0 / 4.1, 2.0);
  bool documented = false;
  try {
    const auto readme = read_file(fs::path(TAMDP_CONFIG_DIR).parent_path() / "README.md");
    documented = readme.find("not reproducible") != std::string::npos &&
                 readme.find("generalization_bound") != std::string::npos;
  } catch (const LabError&) {
  }
  v.pass = finite && documented;
  v.detail = std::string("README note ") + (documented ? "present" : "MISSING") +
             "; generalization_bound(r_max=100, n=20, D_max=3, d_eff/d=0.01; unpublished d=1000, KL=0.1, G=8 assumed) = " + fmt(terms.total) +
             " F1 points; the group term alone stays above 4.1 unless G >= " + fmt(g_needed, 5);
  return v;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "rate exponent", rate_exponent},
      {2, "variance-K linearity", variance_linearity},
      {3, "group-size law", group_size},
      {4, "decomposition gap", decomposition},
      {5, "depth-generalization trend", generalization},
      {6, "alignment dynamics", alignment},
      {7, "beta-sweep trade-off", beta_sweep},
      {8, "exact-arithmetic suite", exact_suite},
      {9, "micro-instance oracle", micro_oracle},
      {10, "real-benchmark non-reproducibility", real_benchmark_note},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %2d %s  %s: %s\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

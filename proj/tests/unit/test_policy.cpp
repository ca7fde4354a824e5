#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tamdp/errors.hpp"
#include "tamdp/policy.hpp"

using namespace tamdp;

namespace {

TaMdp vocab_env(int n_gen, int n_vocab, int horizon = 5, std::uint64_t seed = 1) {
  TaMdpSpec s;
  s.n_gen = n_gen;
  s.n_tool = 0;
  s.n_ret = 0;
  s.n_tools = 0;
  s.d_max = 0;
  s.n_vocab = n_vocab;
  s.horizon = horizon;
  s.branch = std::min(2, n_gen);
  s.env_seed = seed;
  return build_env(s);
}

TaMdp tool_env(std::uint64_t seed) {
  TaMdpSpec s;
  s.n_gen = 8;
  s.n_tool = 3;
  s.n_ret = 4;
  s.n_vocab = 5;
  s.n_tools = 2;
  s.d_max = 2;
  s.horizon = 8;
  s.env_seed = seed;
  return build_env(s);
}

void randomize(PolicyParams& p, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (Eigen::Index i = 0; i < p.dim(); ++i) p.theta()[i] = nd(rng);
}

int open_prompt(const TaMdp& env) {
  for (int s = 0; s < env.spec().n_gen; ++s)
    if (!env.terminal(s)) return s;
  return 0;
}

}  // namespace

TEST(LogProb, UniformFourActions) {
  const auto env = vocab_env(4, 4);
  const auto p = PolicyParams::uniform(env);
  Trajectory t;
  t.steps = {{open_prompt(env), 2, false}};
  EXPECT_NEAR(log_prob(p, env, t), std::log(0.25), 1e-15);
  EXPECT_EQ(log_prob(p, env, Trajectory{}), 0.0);
}

TEST(LogProb, ThreeStepsMatchPerStepProduct) {
  const auto env = vocab_env(6, 5);
  auto p = PolicyParams::uniform(env);
  // Row r gets logits (0.3 r, -0.5, 1.1, 0.2 r, -1.0).
  for (int r = 0; r < p.rows(); ++r) {
    const double v[5] = {0.3 * r, -0.5, 1.1, 0.2 * r, -1.0};
    for (int a = 0; a < 5; ++a) p.theta()[p.offset(r) + a] = v[a];
  }
  Trajectory t;
  t.steps = {{0, 1, false}, {3, 2, false}, {5, 0, false}};
  double prod = 1.0;
  for (const auto& s : t.steps) prod *= oracle::softmax(p, env.policy_row(s.state), 5)[s.action];
  EXPECT_NEAR(log_prob(p, env, t), std::log(prod), 1e-12);
}

TEST(GradLogProb, UniformTwoActions) {
  const auto env = vocab_env(3, 2);
  const auto p = PolicyParams::uniform(env);
  Trajectory t;
  const int s = open_prompt(env);
  t.steps = {{s, 0, false}};
  const auto g = grad_log_prob(p, env, t);
  const int r = env.policy_row(s);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (i == p.offset(r)) EXPECT_DOUBLE_EQ(g[i], 0.5);
    else if (i == p.offset(r) + 1) EXPECT_DOUBLE_EQ(g[i], -0.5);
    else EXPECT_EQ(g[i], 0.0);
  }
  EXPECT_TRUE(grad_log_prob(p, env, Trajectory{}).isZero(0.0));
}

TEST(GradLogProb, MatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto env = tool_env(seed);
    auto p = PolicyParams::uniform(env);
    randomize(p, seed);
    Rng rng(seed + 100);
    for (int n = 0; n < 10; ++n) {
      const auto t = sample_trajectory(env, p, sample_categorical(env.initial_dist(), rng), rng);
      const auto g = grad_log_prob(p, env, t);
      const double h = 1e-5;
      double err = 0.0;
      for (Eigen::Index i = 0; i < p.dim(); ++i) {
        auto up = p, dn = p;
        up.theta()[i] += h;
        dn.theta()[i] -= h;
        const double fd = (log_prob(up, env, t) - log_prob(dn, env, t)) / (2 * h);
        err = std::max(err, std::abs(fd - g[i]));
      }
      EXPECT_LE(err, 1e-5 * (1.0 + g.lpNorm<Eigen::Infinity>()));
    }
  }
}

TEST(GradLogProb, AddScoreAndSparseScoreAgree) {
  const auto env = tool_env(9);
  auto p = PolicyParams::uniform(env);
  randomize(p, 9);
  Rng rng(4);
  const auto t = sample_trajectory(env, p, open_prompt(env), rng);
  const auto g = grad_log_prob(p, env, t);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(p.dim());
  add_score(p, env, t, 2.0, acc);
  EXPECT_LE((acc - 2.0 * g).lpNorm<Eigen::Infinity>(), 1e-14);
  Eigen::VectorXd dense = Eigen::VectorXd::Zero(p.dim());
  for (const auto& [i, v] : sparse_score(p, env, t)) dense[i] += v;
  EXPECT_LE((dense - g).lpNorm<Eigen::Infinity>(), 1e-14);
}

TEST(KlToRef, IdenticalIsZeroAndRandomIsNonNegative) {
  const auto env = tool_env(2);
  auto p = PolicyParams::uniform(env);
  randomize(p, 2);
  std::vector<double> vis(static_cast<std::size_t>(p.rows()), 1.0 / p.rows());
  EXPECT_EQ(kl_to_ref(p, p, vis), 0.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto q = PolicyParams::uniform(env);
    randomize(q, 50 + s, 2.0);
    EXPECT_GE(kl_to_ref(p, q, vis), 0.0);
  }
}

TEST(KlToRef, TwoPointClosedForm) {
  PolicyParams p(std::vector<int>{2, 2}), ref(std::vector<int>{2, 2});
  ref.theta()[0] = std::log(3.0);
  const std::vector<double> vis{1.0, 0.0};
  const double expect = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  EXPECT_NEAR(kl_to_ref(p, ref, vis), expect, 1e-10);
  EXPECT_NEAR(expect, 0.14384, 1e-5);

  // Two enumerable states with their own logits.
  p.theta() << 0.2, -0.4, 1.0, 0.5;
  ref.theta() << -0.3, 0.1, 0.0, 0.0;
  const std::vector<double> v2{0.3, 0.7};
  double closed = 0.0;
  for (int r = 0; r < 2; ++r) {
    const auto pp = oracle::softmax(p, r, 2), qq = oracle::softmax(ref, r, 2);
    double kl = 0.0;
    for (int a = 0; a < 2; ++a) kl += pp[a] * std::log(pp[a] / qq[a]);
    closed += v2[r] * kl;
  }
  EXPECT_NEAR(kl_to_ref(p, ref, v2), closed, 1e-10);
}

TEST(KlGradient, MatchesCentralDifferences) {
  const auto env = tool_env(3);
  auto p = PolicyParams::uniform(env), ref = PolicyParams::uniform(env);
  randomize(p, 3);
  randomize(ref, 4);
  std::vector<double> vis(static_cast<std::size_t>(p.rows()));
  for (std::size_t i = 0; i < vis.size(); ++i) vis[i] = static_cast<double>(i + 1);
  double z = 0.0;
  for (double v : vis) z += v;
  for (double& v : vis) v /= z;
  const auto g = kl_gradient(p, ref, vis);
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < p.dim(); ++i) {
    auto up = p, dn = p;
    up.theta()[i] += h;
    dn.theta()[i] -= h;
    const double fd = (kl_to_ref(up, ref, vis) - kl_to_ref(dn, ref, vis)) / (2 * h);
    EXPECT_NEAR(fd, g[i], 1e-5 * (1.0 + g.lpNorm<Eigen::Infinity>()));
  }
}

TEST(Softmax, RowShiftInvariance) {
  const auto env = tool_env(5);
  auto p = PolicyParams::uniform(env), ref = PolicyParams::uniform(env);
  randomize(p, 5);
  randomize(ref, 6);
  Rng rng(8);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 20; ++i) trajs.push_back(sample_trajectory(env, p, sample_categorical(env.initial_dist(), rng), rng));
  const auto vis = row_visitation(env, trajs);
  auto shifted = p;
  for (int r = 0; r < p.rows(); ++r) shifted.row(r).array() += 3.7 * (r + 1);
  EXPECT_NEAR(kl_to_ref(p, ref, vis), kl_to_ref(shifted, ref, vis), 1e-10);
  for (const auto& t : trajs) {
    EXPECT_NEAR(log_prob(p, env, t), log_prob(shifted, env, t), 1e-10);
    EXPECT_LE((grad_log_prob(p, env, t) - grad_log_prob(shifted, env, t)).lpNorm<Eigen::Infinity>(), 1e-10);
  }
}

TEST(FisherMatrix, SingleSampleIsOuterProductPlusRidge) {
  const auto env = tool_env(7);
  auto p = PolicyParams::uniform(env);
  randomize(p, 7);
  const std::vector<double> dist(env.initial_dist().begin(), env.initial_dist().end());
  Rng a(31), b(31);
  const auto h = fisher_matrix(p, env, dist, 1, a, 1e-3);
  const int prompt = sample_categorical(dist, b);
  const auto t = sample_trajectory(env, p, prompt, b);
  const auto s = grad_log_prob(p, env, t);
  const Eigen::MatrixXd expect = s * s.transpose() + 1e-3 * Eigen::MatrixXd::Identity(p.dim(), p.dim());
  EXPECT_LE((h - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FisherMatrix, DeterministicPolicyGivesRidge) {
  const auto env = tool_env(8);
  auto p = PolicyParams::uniform(env);
  for (int r = 0; r < p.rows(); ++r) p.theta()[p.offset(r)] = 1e3;
  const std::vector<double> dist(env.initial_dist().begin(), env.initial_dist().end());
  Rng rng(1);
  const auto h = fisher_matrix(p, env, dist, 200, rng, 1e-6);
  EXPECT_LE((h - 1e-6 * Eigen::MatrixXd::Identity(p.dim(), p.dim())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FisherMatrix, MatchesEnumeratedExpectation) {
  const auto env = vocab_env(2, 2, 3, 5);
  auto p = PolicyParams::uniform(env);
  p.theta() << 0.4, -0.2, -0.3, 0.6;
  const std::vector<double> dist(env.initial_dist().begin(), env.initial_dist().end());
  const Eigen::Index d = p.dim();
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(d, d), second = Eigen::MatrixXd::Zero(d, d);
  for (int s = 0; s < 2; ++s) {
    if (dist[s] == 0.0) continue;
    for (const auto& path : oracle::enumerate(env, p, s)) {
      const Eigen::MatrixXd o = path.score * path.score.transpose();
      mean += dist[s] * path.prob * o;
      second += dist[s] * path.prob * o.cwiseProduct(o);
    }
  }
  const int n = 100000;
  Rng rng(77);
  const auto h = fisher_matrix(p, env, dist, n, rng, 0.0);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double se = std::sqrt(std::max(0.0, second(i, j) - mean(i, j) * mean(i, j)) / n);
      EXPECT_LE(std::abs(h(i, j) - mean(i, j)), 3.0 * se + 1e-12) << i << "," << j;
    }
  }
}

TEST(FisherMatrix, IsPositiveSemidefinite) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto env = tool_env(seed);
    auto p = PolicyParams::uniform(env);
    randomize(p, seed, 1.5);
    const std::vector<double> dist(env.initial_dist().begin(), env.initial_dist().end());
    Rng rng(seed);
    const auto h = fisher_matrix(p, env, dist, 50, rng, 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
    FisherPair{h, h, 0.0}.validate();
  }
}

TEST(ApplyUpdate, Examples) {
  const auto env = tool_env(1);
  auto p = PolicyParams::uniform(env);
  randomize(p, 1);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(p.dim());
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(p.dim());
  EXPECT_EQ(apply_update(p, zero, 0.5).theta(), p.theta());
  EXPECT_EQ(apply_update(p, ones, 0.0).theta(), p.theta());
  const auto q = apply_update(p, ones, 0.1);
  for (Eigen::Index i = 0; i < p.dim(); ++i) EXPECT_EQ(q.theta()[i], p.theta()[i] + 0.1);
  Eigen::VectorXd bad = ones;
  bad[0] = std::nan("");
  EXPECT_THROW(apply_update(p, bad, 0.1), NumericError);
  EXPECT_THROW(apply_update(p, Eigen::VectorXd::Ones(3), 0.1), DimensionError);
}

TEST(PolicyCsv, RoundTrips) {
  const auto env = tool_env(2);
  auto p = PolicyParams::uniform(env);
  randomize(p, 2);
  const auto q = policy_from_csv(policy_to_csv(p, env), env);
  EXPECT_EQ(q.theta(), p.theta());
}

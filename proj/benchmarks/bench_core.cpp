#include <random>

#include <benchmark/benchmark.h>

#include "tamdp/analysis.hpp"
#include "tamdp/optim.hpp"

using namespace tamdp;

namespace {

TaMdp desk_env() {
  TaMdpSpec s;  // desk defaults: 100 generation states, 8 tokens, 2 tools, horizon 20
  s.env_seed = 1;
  return build_env(s);
}

PolicyParams random_policy(const TaMdp& env, std::uint64_t seed) {
  auto p = PolicyParams::uniform(env);
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (Eigen::Index i = 0; i < p.dim(); ++i) p.theta()[i] = nd(rng);
  return p;
}

void BM_SampleTrajectory(benchmark::State& state) {
  const auto env = desk_env();
  const auto p = random_policy(env, 1);
  Rng rng(2);
  for (auto _ : state) {
    auto t = sample_trajectory(env, p, sample_categorical(env.initial_dist(), rng), rng);
    benchmark::DoNotOptimize(t.terminal_state);
  }
}
BENCHMARK(BM_SampleTrajectory);

void BM_GrpoGradient(benchmark::State& state) {
  const auto env = desk_env();
  const auto p = random_policy(env, 3);
  const RewardModel rewards(env, RewardSpec::uniform(static_cast<int>(state.range(1)), 1.0, 0.3, 1));
  GrpoConfig cfg;
  cfg.mode = GrpoMode::Decomposed;
  Rng rng(4);
  const std::vector<GroupBatch> batches{sample_group(env, p, rewards, 1, static_cast<int>(state.range(0)), rng)};
  for (auto _ : state) {
    auto g = grpo_gradient(p, p, p, env, batches, cfg, rewards.spec().weights);
    benchmark::DoNotOptimize(g.gradient.data());
  }
}
BENCHMARK(BM_GrpoGradient)->Args({4, 2})->Args({16, 2})->Args({16, 4});

void BM_TrainIteration(benchmark::State& state) {
  const auto env = desk_env();
  const RewardModel rewards(env, RewardSpec::uniform(2, 1.0));
  GrpoConfig cfg;
  cfg.iters = 50;
  const auto ref = PolicyParams::uniform(env);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    auto r = grpo_train(env, rewards, cfg, ref, ++seed);
    benchmark::DoNotOptimize(r.policy.theta().data());
  }
  state.SetItemsProcessed(state.iterations() * cfg.iters);
}
BENCHMARK(BM_TrainIteration)->Unit(benchmark::kMillisecond);

void BM_FisherPairAndEffectiveDimension(benchmark::State& state) {
  TaMdpSpec s;
  s.n_gen = 30;
  s.n_ret = 10;
  s.n_tool = 5;
  s.env_seed = 2;
  const auto env = build_env(s);
  const auto p = random_policy(env, 5);
  const std::vector<double> src(env.initial_dist().begin(), env.initial_dist().end());
  const auto tgt = make_tilted_distribution(src, 0.2);
  FisherOptions opt;
  opt.per_prompt = 8;
  for (auto _ : state) {
    const auto pair = fisher_pair(p, env, src, tgt, opt, 7);
    benchmark::DoNotOptimize(effective_dimension(pair));
  }
}
BENCHMARK(BM_FisherPairAndEffectiveDimension)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();

#include <algorithm>

#include <gtest/gtest.h>

#include "tamdp/config.hpp"
#include "tamdp/errors.hpp"

using namespace tamdp;

namespace {

const char* kValid = R"(
experiment = decomposition
seeds = 1, 2
env.n_gen = 20
rewards.k = 2
rewards.weights = 0.5, 0.5   # trailing comment
optim.iters = 100
grid.field = alpha_target
grid.values = -0.4, 0, 0.4
)";

bool has_field(const std::vector<Diagnostic>& d, const std::string& field) {
  return std::any_of(d.begin(), d.end(), [&](const Diagnostic& x) { return x.field == field; });
}

ExperimentConfig parse_ok(const std::string& text) {
  std::vector<Diagnostic> d;
  auto c = parse_config(text, d);
  EXPECT_TRUE(d.empty()) << format_diagnostics(d);
  return c;
}

}  // namespace

TEST(Config, ValidConfigHasNoDiagnostics) {
  const auto c = parse_ok(kValid);
  EXPECT_TRUE(validate_config(c).empty()) << format_diagnostics(validate_config(c));
  EXPECT_EQ(c.experiment, ExperimentKind::Decomposition);
  EXPECT_EQ(c.env.n_gen, 20);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.grid.values.size(), 3u);
}

TEST(Config, InfeasibleAlphaIsReported) {
  auto c = parse_ok(R"(
experiment = decomposition
seeds = 1
rewards.k = 3
rewards.weights = 1, 1, 1
rewards.alpha_target = -0.9
)");
  const auto d = validate_config(c);
  EXPECT_TRUE(has_field(d, "rewards.alpha_target")) << format_diagnostics(d);
}

TEST(Config, InfeasibleGridAlphaIsReported) {
  auto c = parse_ok(R"(
experiment = decomposition
seeds = 1
rewards.k = 3
rewards.r_max = 1
grid.field = alpha_target
grid.values = 0, -0.9
)");
  const auto d = validate_config(c);
  const bool found = std::any_of(d.begin(), d.end(), [](const Diagnostic& x) {
    return x.field.find("rewards.alpha_target") == 0;
  });
  EXPECT_TRUE(found) << format_diagnostics(d);
}

TEST(Config, MissingWeightsNamesFieldPath) {
  auto c = parse_ok("experiment = decomposition\nseeds = 1\nrewards.k = 2\n");
  EXPECT_TRUE(has_field(validate_config(c), "rewards.weights"));
}

TEST(Config, WeightSourcesAreExclusive) {
  auto c = parse_ok("experiment = decomposition\nseeds = 1\nrewards.r_max = 1\nrewards.component_weight = 1\n");
  EXPECT_FALSE(validate_config(c).empty());
  c = parse_ok("experiment = convergence-k\nseeds = 1\nrewards.component_weight = 0.5\ngrid.field = k\ngrid.values = 1, 3\n");
  EXPECT_TRUE(validate_config(c).empty()) << format_diagnostics(validate_config(c));
  const auto r = cell_rewards(c, 3, 0.0);
  EXPECT_EQ(r.weights, (std::vector<double>{0.5, 0.5, 0.5}));
  EXPECT_DOUBLE_EQ(r.r_max(), 1.5);
}

TEST(Config, UnknownDuplicateAndMalformedKeysAreCollected) {
  std::vector<Diagnostic> d;
  parse_config("experiment = decomposition\nenv.n_gen = 10\nenv.n_gen = 11\nenv.bogus = 1\nnot a pair\noptim.iters = x\n", d);
  EXPECT_TRUE(has_field(d, "env.bogus"));
  EXPECT_TRUE(has_field(d, "optim.iters"));
  EXPECT_GE(d.size(), 4u);
}

TEST(Config, GridMustMatchExperiment) {
  auto c = parse_ok("experiment = decomposition\nseeds = 1\nrewards.r_max = 1\ngrid.field = k\ngrid.values = 1, 2\n");
  EXPECT_TRUE(has_field(validate_config(c), "grid.field"));
}

TEST(Config, TextRoundTrip) {
  auto c = parse_ok(kValid);
  const auto again = parse_ok(to_config_text(c));
  EXPECT_EQ(to_config_text(again), to_config_text(c));
}

TEST(Config, CellConfigAppliesGridValue) {
  auto c = parse_ok(kValid);
  const auto cell = cell_config(c, 0.4);
  EXPECT_DOUBLE_EQ(cell.rewards.alpha_target, 0.4);
  EXPECT_DOUBLE_EQ(c.rewards.alpha_target, 0.0);
}

TEST(Config, LoadMissingFileThrows) {
  EXPECT_THROW(load_config("/nonexistent/config.conf"), LabError);
}

// tamdp-lab: config-driven experiment runner.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "tamdp/config.hpp"
#include "tamdp/errors.hpp"
#include "tamdp/experiments.hpp"
#include "tamdp/io.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

// Parses and validates, printing every diagnostic. Returns false on any.
bool load(const std::string& path, tamdp::ExperimentConfig& config) {
  std::vector<tamdp::Diagnostic> diags;
  try {
    config = tamdp::parse_config(tamdp::read_file(path), diags);
  } catch (const tamdp::LabError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return false;
  }
  for (auto& d : tamdp::validate_config(config)) diags.push_back(std::move(d));
  if (diags.empty()) return true;
  std::fprintf(stderr, "%s", tamdp::format_diagnostics(diags).c_str());
  return false;
}

int cmd_validate(const std::string& path) {
  tamdp::ExperimentConfig config;
  if (!load(path, config)) return kConfigError;
  std::printf("%s: ok (%s)\n", path.c_str(), tamdp::to_string(config.experiment).c_str());
  return kOk;
}

int cmd_run(const std::string& path, const std::string& out, int jobs) {
  tamdp::ExperimentConfig config;
  tamdp::RunOptions options;
  if (!load(path, config)) return kConfigError;
  try {
    options.seed_offset = tamdp::seed_offset_from_env();
  } catch (const tamdp::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kConfigError;
  }
  if (!out.empty()) options.out_dir = out;
  options.jobs = jobs;
  options.on_progress = [](const tamdp::SeedOutcome& r, int done, int total) {
    if (r.ok)
      std::fprintf(stderr, "[%d/%d] cell %g seed %llu done\n", done, total, r.cell_value,
                   static_cast<unsigned long long>(r.seed));
    else
      std::fprintf(stderr, "[%d/%d] cell %g seed %llu FAILED: %s\n", done, total, r.cell_value,
                   static_cast<unsigned long long>(r.seed), r.error.c_str());
  };
  try {
    const auto result = tamdp::run_experiment(config, options);
    std::printf("wrote %s\n", result.root.string().c_str());
    if (result.n_failed() > 0) {
      std::fprintf(stderr, "%d job(s) failed; see %s\n", result.n_failed(),
                   (result.root / "failures.json").string().c_str());
      return kRuntimeError;
    }
  } catch (const tamdp::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tool-augmented MDP lab for GRPO with composite verifiable rewards"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int jobs = 1;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Output directory (overrides out_dir)");
  run->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config file and report every violation");
  validate->add_option("--config", validate_path, "Config file")->required();

  app.add_subcommand("version", "Print the version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  if (*run) return cmd_run(config_path, out_dir, jobs);
  if (*validate) return cmd_validate(validate_path);
  std::printf("tamdp-lab %s\n", TAMDP_VERSION);
  return kOk;
}

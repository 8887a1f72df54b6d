#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlminv/pipeline.hpp"

namespace pl = vlminv::pipeline;

namespace {

struct CommonFlags {
  std::string config;
  std::string root;
};

struct GridFlags {
  std::vector<std::string> strategies;
  std::vector<std::string> losses;
  std::vector<int> targets;
  std::vector<std::uint64_t> seeds;
  std::optional<int> jobs;
  std::optional<long> steps;
  std::optional<double> step_size;
  std::optional<int> pool_size;
  std::optional<int> candidates;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--root", f.root, "Run root (default: $VLMINV_RUN_ROOT or ./runs)");
}

void add_grid(CLI::App* cmd, GridFlags& g) {
  cmd->add_option("--strategy", g.strategies, "tmi, tmi-c, smi, smi-aw or all (repeatable)")->delimiter(',');
  cmd->add_option("--loss", g.losses, "ce, mml, lom or all (repeatable)")->delimiter(',');
  cmd->add_option("--targets", g.targets, "Private identity ids (default: all)")->delimiter(',');
  cmd->add_option("--seeds", g.seeds, "Master seeds")->delimiter(',');
  cmd->add_option("--jobs", g.jobs, "Parallel runs");
  cmd->add_option("--steps", g.steps, "Update budget N");
  cmd->add_option("--step-size", g.step_size, "Step size beta");
  cmd->add_option("--pool-size", g.pool_size, "Initial-selection pool P");
  cmd->add_option("--candidates", g.candidates, "Candidates kept after initial selection n");
}

pl::RunConfig load_config(const CommonFlags& f) {
  return f.config.empty() ? pl::RunConfig{} : pl::RunConfig::load(f.config);
}

pl::AttackGrid apply(pl::AttackGrid grid, const GridFlags& g) {
  if (!g.strategies.empty()) {
    grid.strategies.clear();
    for (const auto& s : g.strategies) {
      if (s == "all")
        grid.strategies.assign(std::begin(vlminv::kAllStrategies), std::end(vlminv::kAllStrategies));
      else
        grid.strategies.push_back(vlminv::parse_strategy(s));
    }
  }
  if (!g.losses.empty()) {
    grid.losses.clear();
    for (const auto& l : g.losses) {
      if (l == "all")
        grid.losses.assign(std::begin(vlminv::kAllLosses), std::end(vlminv::kAllLosses));
      else
        grid.losses.push_back(vlminv::parse_loss(l));
    }
  }
  if (!g.targets.empty()) grid.targets = g.targets;
  if (!g.seeds.empty()) grid.seeds = g.seeds;
  if (g.jobs) grid.jobs = *g.jobs;
  if (g.steps) grid.attack.steps = *g.steps;
  if (g.step_size) grid.attack.step_size = *g.step_size;
  if (g.pool_size) grid.attack.pool_size = *g.pool_size;
  if (g.candidates) grid.attack.candidates = *g.candidates;
  return grid;
}

std::optional<std::string> root_flag(const CommonFlags& f) {
  return f.root.empty() ? std::nullopt : std::optional<std::string>(f.root);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-inversion attacks on a toy vision-language model"};
  app.require_subcommand(1);

  CommonFlags build_flags, attack_flags, eval_flags, report_flags, replay_flags;
  GridFlags attack_grid, eval_grid, report_grid;
  bool overwrite = false, emit_config = false;
  std::string replay_dir;

  auto* build = app.add_subcommand("build", "Generate the dataset and train the toy models");
  add_common(build, build_flags);
  build->add_flag("--overwrite", overwrite, "Replace checkpoints that fail their hash check");
  build->add_flag("--emit-config", emit_config, "Print the effective configuration and exit");

  auto* attack = app.add_subcommand("attack", "Run the attack grid");
  add_common(attack, attack_flags);
  add_grid(attack, attack_grid);

  auto* evaluate = app.add_subcommand("evaluate", "Score completed runs and write reports/");
  add_common(evaluate, eval_flags);
  add_grid(evaluate, eval_grid);

  auto* report = app.add_subcommand("report", "Rebuild reports/ from existing run metrics");
  add_common(report, report_flags);
  add_grid(report, report_grid);

  auto* replay = app.add_subcommand("replay", "Re-execute one run and byte-compare its outputs");
  add_common(replay, replay_flags);
  replay->add_option("run_dir", replay_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*build) {
      const auto config = load_config(build_flags);
      if (emit_config) {
        std::cout << config.to_json().dump(2) << "\n";
        return 0;
      }
      const auto out = pl::cmd_build(pl::resolve_run_root(root_flag(build_flags)), config.build, overwrite, std::cout);
      for (const auto& w : out.warnings) std::cerr << w << "\n";
      return 0;
    }
    if (*attack) {
      const auto grid = apply(load_config(attack_flags).grid, attack_grid);
      const auto summary = pl::cmd_attack(pl::resolve_run_root(root_flag(attack_flags)), grid, std::cout);
      if (summary.failed() > 0) {
        std::cerr << summary.failed() << " of " << summary.runs.size() << " runs failed\n";
        return 1;
      }
      return 0;
    }
    if (*evaluate) {
      const auto grid = apply(load_config(eval_flags).grid, eval_grid);
      pl::cmd_evaluate(pl::resolve_run_root(root_flag(eval_flags)), grid, std::cout);
      return 0;
    }
    if (*report) {
      const auto grid = apply(load_config(report_flags).grid, report_grid);
      pl::cmd_report(pl::resolve_run_root(root_flag(report_flags)), grid, std::cout);
      return 0;
    }
    const auto out = pl::cmd_replay(pl::resolve_run_root(root_flag(replay_flags)), replay_dir, std::cout);
    return out.identical ? 0 : 1;
  } catch (const vlminv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vlminv::ContractViolation& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

#pragma once

#include <map>
#include <ostream>
#include <string>

#include "vlminv/pipeline.hpp"

namespace vlminv::testing {

/// The 16-identity toy benchmark: every strategy with the LOM loss, N = 70,
/// beta = 0.05, p_thres = 0.999, ten seeds, one random start per run.
inline pipeline::AttackGrid benchmark_grid() {
  pipeline::AttackGrid grid;
  grid.losses = {LossKind::kLogitMax};
  grid.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  grid.attack.steps = 70;
  grid.attack.step_size = 0.05;
  grid.attack.confidence_threshold = 0.999;
  grid.attack.pool_size = 1;
  grid.attack.candidates = 1;
  return grid;
}

/// Builds (or reuses) the default toy stack under `root`, runs the benchmark
/// grid (resuming finished runs) and returns its cells keyed by strategy.
inline std::map<std::string, CellMetrics> run_benchmark(const std::filesystem::path& root, std::ostream& log) {
  pipeline::cmd_build(root, pipeline::BuildConfig{}, false, log);
  const auto grid = benchmark_grid();
  const auto summary = pipeline::cmd_attack(root, grid, log);
  if (summary.failed() > 0) throw NumericError(std::to_string(summary.failed()) + " benchmark runs failed");
  const auto report = pipeline::cmd_evaluate(root, grid, log);
  std::map<std::string, CellMetrics> cells;
  for (const auto& c : report.cells) cells[c.strategy] = c;
  return cells;
}

}  // namespace vlminv::testing

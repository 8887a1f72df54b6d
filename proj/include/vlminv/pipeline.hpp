#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/evaluation.hpp"
#include "vlminv/losses.hpp"
#include "vlminv/selection.hpp"
#include "vlminv/strategies.hpp"
#include "vlminv/toy/dataset.hpp"
#include "vlminv/toy/generator.hpp"
#include "vlminv/toy/vlm.hpp"

namespace vlminv::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kRunRootEnv = "VLMINV_RUN_ROOT";

struct BuildConfig {
  toy::DatasetConfig dataset;
  toy::ToyVlmConfig vlm;
  toy::VlmTrainOptions vlm_train;
  toy::ToyGeneratorConfig generator;
  toy::GeneratorTrainOptions generator_train;
  ClassifierTrainOptions classifier;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static BuildConfig from_json(const nlohmann::json& j);
};

struct AttackGrid {
  std::vector<Strategy> strategies{std::begin(kAllStrategies), std::end(kAllStrategies)};
  std::vector<LossKind> losses{LossKind::kLogitMax};
  std::vector<int> targets;  // private identity ids; empty means all
  std::vector<std::uint64_t> seeds{0};
  AttackConfig attack;  // strategy, loss and seed are overridden per run
  AugmentationConfig augmentation;
  long anchor_count = 2000;
  std::uint64_t anchor_seed = 0;
  bool normalize_match = false;
  int jobs = 1;

  nlohmann::json to_json() const;
  static AttackGrid from_json(const nlohmann::json& j);
};

struct RunConfig {
  BuildConfig build;
  AttackGrid grid;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const fs::path& path);
};

/// Flag value, else $VLMINV_RUN_ROOT, else "./runs".
fs::path resolve_run_root(const std::optional<std::string>& flag);

/// Everything `build` produces, loaded and verified.
struct Artifacts {
  BuildConfig config;
  toy::Dataset dataset;
  std::unique_ptr<toy::ToyVlm> vlm;
  std::unique_ptr<toy::ToyGenerator> generator;
  std::unique_ptr<EvalClassifier> classifier;
  std::string build_hash;  // hash over every stage's checkpoint hashes
};

struct BuildOutcome {
  std::vector<std::string> trained;  // stages (re)built this call
  std::vector<std::string> reused;
  std::vector<std::string> warnings;
};

/// Builds or reuses each stage (dataset, toy_vlm, toy_generator,
/// eval_classifier). A stage is reused when its config hash and checkpoint
/// hash both match build_state.json; a checkpoint whose bytes no longer match
/// its recorded hash is refused unless `overwrite`.
BuildOutcome cmd_build(const fs::path& root, const BuildConfig& config, bool overwrite, std::ostream& log);

/// Loads a finished build; throws ConfigError naming the expected path when
/// anything is missing or corrupt.
Artifacts load_artifacts(const fs::path& root);

/// Anchor for `model`, cached under build/ keyed by fingerprint, count and seed.
RegAnchor ensure_anchor(const fs::path& root, const Artifacts& artifacts, long count, std::uint64_t seed);

struct RunKey {
  Strategy strategy = Strategy::kSmiAw;
  LossKind loss = LossKind::kLogitMax;
  int target = 0;
  std::uint64_t seed = 0;

  std::string label() const;  // "<strategy>/<loss>/<target>/<seed>"
  fs::path dir(const fs::path& root) const;
};

std::vector<RunKey> expand_grid(const AttackGrid& grid, const toy::Dataset& dataset);

/// Seed-complete snapshot written to <run>/config.json.
nlohmann::json run_snapshot(const RunKey& key, const AttackGrid& grid, const Artifacts& artifacts);

/// Hash of everything that defines a (strategy, loss) cell apart from targets and seeds.
std::string cell_config_hash(Strategy strategy, LossKind loss, const AttackGrid& grid, const std::string& build_hash);

struct RunOutcome {
  RunKey key;
  bool skipped = false;
  bool failed = false;
  std::string error;
};

/// Executes one run into `dir` from its snapshot: initial selection,
/// per-candidate inversion, final selection. result.json is written last.
RunOutcome execute_run(const fs::path& root, const fs::path& dir, const nlohmann::json& snapshot,
                       const Artifacts& artifacts);

struct AttackSummary {
  std::vector<RunOutcome> runs;
  int failed() const;
};

AttackSummary cmd_attack(const fs::path& root, const AttackGrid& grid, std::ostream& log);

/// Writes <run>/metrics.json from the run's result.json and returns its verdicts.
std::vector<TargetVerdict> evaluate_run(const fs::path& dir, const Artifacts& artifacts);

/// Evaluates every completed run of the grid, then writes reports/.
EvaluationReport cmd_evaluate(const fs::path& root, const AttackGrid& grid, std::ostream& log);

/// Rebuilds reports/ from existing run metrics without re-evaluating.
EvaluationReport cmd_report(const fs::path& root, const AttackGrid& grid, std::ostream& log);

struct ReplayOutcome {
  bool identical = false;
  std::vector<std::string> differences;
};

/// Re-executes the run in `dir` from its snapshot into a scratch directory and
/// byte-compares trace.csv, result.json and metrics.json.
ReplayOutcome cmd_replay(const fs::path& root, const fs::path& dir, std::ostream& log);

}  // namespace vlminv::pipeline

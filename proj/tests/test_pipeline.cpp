#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/pipeline.hpp"

using namespace vlminv;
using namespace vlminv::pipeline;

namespace {

const char* kSmallConfig = R"({
  "build": {
    "dataset": {"num_public_identities": 20, "public_per_identity": 4, "per_identity": 8},
    "toy_vlm": {"epochs": 3},
    "toy_generator": {"epochs": 2, "holdout_from_sample": 3},
    "eval_classifier": {"epochs": 2}
  },
  "attack": {
    "attack": {"steps": 6, "pool_size": 4, "candidates": 2, "augmentations": 2},
    "anchor_count": 40
  }
})";

RunConfig small_config() { return RunConfig::from_json(nlohmann::json::parse(kSmallConfig)); }

fs::path fresh_root(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vlminv_pipeline_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string snapshot_tree(const fs::path& dir) {
  std::ostringstream out;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out << fs::relative(f, dir).string() << " " << sha256_file(f) << "\n";
  return out.str();
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(VLMINV_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_root("shared"));
    std::ostringstream log;
    cmd_build(*root_, small_config().build, false, log);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};

fs::path* Pipeline::root_ = nullptr;

}  // namespace

TEST(Build, WritesCheckpointsAndReusesThem) {
  const auto root = fresh_root("build");
  std::ostringstream log;
  const auto first = cmd_build(root, small_config().build, false, log);
  EXPECT_EQ(first.trained.size(), 4u);
  for (const char* f : {"manifest.tsv", "toy_vlm.json", "toy_generator.json", "eval_classifier.json", "build_log.txt",
                        "build_state.json"})
    EXPECT_TRUE(fs::exists(root / "build" / f)) << f;
  const auto before = snapshot_tree(root / "build");

  const auto second = cmd_build(root, small_config().build, false, log);
  EXPECT_TRUE(second.trained.empty());
  EXPECT_EQ(second.reused.size(), 4u);
  EXPECT_EQ(snapshot_tree(root / "build"), before);

  auto edited = small_config();
  edited.build.classifier.epochs = 3;
  EXPECT_EQ(cmd_build(root, edited.build, false, log).trained, std::vector<std::string>{"eval_classifier"});

  edited.build.dataset.seed = 99;
  EXPECT_EQ(cmd_build(root, edited.build, false, log).trained.size(), 4u);
  fs::remove_all(root);
}

TEST(Build, CorruptCheckpointNeedsOverwrite) {
  const auto root = fresh_root("corrupt");
  std::ostringstream log;
  cmd_build(root, small_config().build, false, log);
  {
    std::ofstream f(root / "build" / "toy_generator.json", std::ios::app);
    f << " ";
  }
  EXPECT_THROW(cmd_build(root, small_config().build, false, log), ConfigError);
  EXPECT_THROW(load_artifacts(root), ConfigError);
  const auto out = cmd_build(root, small_config().build, true, log);
  EXPECT_EQ(out.trained, std::vector<std::string>{"toy_generator"});
  EXPECT_NO_THROW(load_artifacts(root));
  fs::remove_all(root);
}

TEST(Build, MissingBuildFailsFastWithPath) {
  const auto root = fresh_root("missing");
  std::ostringstream log;
  try {
    cmd_attack(root, small_config().grid, log);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find((root / "build" / "build_state.json").string()), std::string::npos);
  }
}

TEST(Config, UnknownKeysRejectedAndDefaultsRoundTrip) {
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"build": {"datset": {}}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"attack": {"attack": {"stepz": 3}}})")), ConfigError);
  const RunConfig defaults;
  EXPECT_EQ(RunConfig::from_json(defaults.to_json()).to_json(), defaults.to_json());
  EXPECT_EQ(small_config().grid.attack.steps, 6);
}

TEST(Config, RunRootResolution) {
  ::unsetenv(kRunRootEnv);
  EXPECT_EQ(resolve_run_root(std::nullopt), fs::path("runs"));
  ::setenv(kRunRootEnv, "/tmp/elsewhere", 1);
  EXPECT_EQ(resolve_run_root(std::nullopt), fs::path("/tmp/elsewhere"));
  EXPECT_EQ(resolve_run_root(std::string("mine")), fs::path("mine"));
  ::unsetenv(kRunRootEnv);
}

TEST_F(Pipeline, OneRunDirectoryPerTarget) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kSmiAw};
  grid.losses = {LossKind::kLogitMax};
  std::ostringstream log;
  const auto summary = cmd_attack(*root_, grid, log);
  EXPECT_EQ(summary.runs.size(), 16u);
  EXPECT_EQ(summary.failed(), 0);
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(*root_ / "attacks" / "smi-aw" / "lom")) {
    EXPECT_TRUE(fs::exists(e.path() / "0" / "trace.csv"));
    EXPECT_TRUE(fs::exists(e.path() / "0" / "config.json"));
    EXPECT_TRUE(fs::exists(e.path() / "0" / "result.json"));
    ++dirs;
  }
  EXPECT_EQ(dirs, 16);
}

TEST_F(Pipeline, FullGridHasTwelveCells) {
  auto grid = small_config().grid;
  grid.losses = {std::begin(kAllLosses), std::end(kAllLosses)};
  grid.targets = {2};
  std::ostringstream log;
  const auto summary = cmd_attack(*root_, grid, log);
  EXPECT_EQ(summary.runs.size(), 12u);
  const auto report = cmd_evaluate(*root_, grid, log);
  EXPECT_EQ(report.cells.size(), 12u);
  for (const auto& c : report.cells) EXPECT_FALSE(c.missing);
}

TEST_F(Pipeline, ResumeMatchesUninterruptedRun) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kTmi, Strategy::kSmi};
  grid.targets = {0, 1};
  grid.seeds = {0, 1};
  std::ostringstream log;
  cmd_attack(*root_, grid, log);
  const auto before = snapshot_tree(*root_ / "attacks");

  // simulate an interruption part-way through one run
  const RunKey key{Strategy::kSmi, LossKind::kLogitMax, 1, 1};
  fs::remove(key.dir(*root_) / "result.json");
  write_file_atomic(key.dir(*root_) / "trace.csv", "partial");

  const auto resumed = cmd_attack(*root_, grid, log);
  int skipped = 0;
  for (const auto& r : resumed.runs) skipped += r.skipped ? 1 : 0;
  EXPECT_EQ(skipped, 7);
  EXPECT_EQ(snapshot_tree(*root_ / "attacks"), before);
}

TEST_F(Pipeline, ParallelRunsMatchSerialRuns) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kTmiC};
  grid.targets = {3, 4, 5};
  std::ostringstream log;
  fs::remove_all(*root_ / "attacks" / "tmi-c");
  cmd_attack(*root_, grid, log);
  const auto serial = snapshot_tree(*root_ / "attacks" / "tmi-c");
  fs::remove_all(*root_ / "attacks" / "tmi-c");
  grid.jobs = 3;
  cmd_attack(*root_, grid, log);
  EXPECT_EQ(snapshot_tree(*root_ / "attacks" / "tmi-c"), serial);
}

TEST_F(Pipeline, ChangedConfigIsRerun) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kSmi};
  grid.targets = {6};
  std::ostringstream log;
  cmd_attack(*root_, grid, log);
  EXPECT_TRUE(cmd_attack(*root_, grid, log).runs[0].skipped);
  grid.attack.step_size = 0.01;
  EXPECT_FALSE(cmd_attack(*root_, grid, log).runs[0].skipped);
}

TEST_F(Pipeline, EvaluateIsDeterministicAndFlagsGaps) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kSmiAw};
  grid.targets = {7};
  std::ostringstream log;
  cmd_attack(*root_, grid, log);
  cmd_evaluate(*root_, grid, log);
  const auto first = snapshot_tree(*root_ / "reports");
  cmd_evaluate(*root_, grid, log);
  EXPECT_EQ(snapshot_tree(*root_ / "reports"), first);
  cmd_report(*root_, grid, log);
  EXPECT_EQ(snapshot_tree(*root_ / "reports"), first);

  grid.targets = {7, 8};
  grid.strategies = {Strategy::kSmiAw, Strategy::kTmi};
  grid.seeds = {5};
  const auto partial = cmd_evaluate(*root_, grid, log);
  EXPECT_EQ(partial.missing_runs.size(), 4u);
  for (const auto& c : partial.cells) EXPECT_TRUE(c.missing);
}

TEST_F(Pipeline, ReplayIsByteIdentical) {
  auto grid = small_config().grid;
  grid.strategies = {Strategy::kSmiAw};
  grid.targets = {9};
  std::ostringstream log;
  cmd_attack(*root_, grid, log);
  cmd_evaluate(*root_, grid, log);
  const RunKey key{Strategy::kSmiAw, LossKind::kLogitMax, 9, 0};
  EXPECT_TRUE(cmd_replay(*root_, key.dir(*root_), log).identical);

  const auto trace = key.dir(*root_) / "trace.csv";
  const auto original = read_file(trace);
  write_file_atomic(trace, original + "0\n");
  const auto out = cmd_replay(*root_, key.dir(*root_), log);
  EXPECT_FALSE(out.identical);
  EXPECT_EQ(out.differences, std::vector<std::string>{"trace.csv"});
  write_file_atomic(trace, original);
}

TEST_F(Pipeline, CliExitStatus) {
  const auto cfg = *root_ / "small.json";
  write_file_atomic(cfg, kSmallConfig);
  const std::string common = " --root " + root_->string() + " --config " + cfg.string() + " --targets 10";
  EXPECT_EQ(run_cli("attack --strategy smi --steps 1" + common), 0);
  // names have at least two tokens, so one step cannot cover every token
  EXPECT_EQ(run_cli("attack --strategy tmi --steps 1" + common), 1);
  EXPECT_EQ(run_cli("attack --strategy nope" + common), 2);
  EXPECT_EQ(run_cli("build --emit-config --config " + cfg.string()), 0);
  EXPECT_EQ(run_cli("frobnicate"), 2);
}

TEST(Cli, EmitConfigMatchesDefaults) {
  const auto out = fs::temp_directory_path() / "vlminv_emit.json";
  const int status = std::system((std::string(VLMINV_CLI) + " build --emit-config > " + out.string()).c_str());
  ASSERT_EQ(status, 0);
  EXPECT_EQ(RunConfig::load(out).to_json(), RunConfig{}.to_json());
  fs::remove(out);
}

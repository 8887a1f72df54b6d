#include "vlminv/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv::pipeline {

using nlohmann::json;

namespace {

template <typename T>
void read_key(const json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* known) { return k == known; }))
      throw ConfigError("unknown config key '" + section + "." + k + "'");
  }
}

json shape_json(const ImageShape& s) { return {{"height", s.height}, {"width", s.width}, {"channels", s.channels}}; }

ImageShape shape_from(const json& j) {
  reject_unknown(j, {"height", "width", "channels"}, "image_shape");
  return {j.at("height").get<int>(), j.at("width").get<int>(), j.at("channels").get<int>()};
}

json dataset_json(const toy::DatasetConfig& c) {
  return {{"num_identities", c.num_identities},
          {"num_public_identities", c.num_public_identities},
          {"per_identity", c.per_identity},
          {"public_per_identity", c.public_per_identity},
          {"seed", c.seed},
          {"image_shape", shape_json(c.image_shape)},
          {"prompt", c.prompt},
          {"min_name_tokens", c.min_name_tokens},
          {"max_name_tokens", c.max_name_tokens}};
}

toy::DatasetConfig dataset_from(const json& j) {
  reject_unknown(j,
                 {"num_identities", "num_public_identities", "per_identity", "public_per_identity", "seed",
                  "image_shape", "prompt", "min_name_tokens", "max_name_tokens"},
                 "build.dataset");
  toy::DatasetConfig c;
  read_key(j, "num_identities", c.num_identities);
  read_key(j, "num_public_identities", c.num_public_identities);
  read_key(j, "per_identity", c.per_identity);
  read_key(j, "public_per_identity", c.public_per_identity);
  read_key(j, "seed", c.seed);
  if (j.contains("image_shape")) c.image_shape = shape_from(j.at("image_shape"));
  read_key(j, "prompt", c.prompt);
  read_key(j, "min_name_tokens", c.min_name_tokens);
  read_key(j, "max_name_tokens", c.max_name_tokens);
  return c;
}

json vlm_json(const toy::ToyVlmConfig& c, const toy::VlmTrainOptions& t) {
  return {{"patch", c.patch},
          {"model_dim", c.model_dim},
          {"mlp_dim", c.mlp_dim},
          {"max_prompt", c.max_prompt},
          {"max_context", c.max_context},
          {"logit_scale", c.logit_scale},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"seed", t.seed},
          {"accuracy_threshold", t.accuracy_threshold},
          {"pixel_noise", t.pixel_noise}};
}

void vlm_from(const json& j, toy::ToyVlmConfig& c, toy::VlmTrainOptions& t) {
  reject_unknown(j,
                 {"patch", "model_dim", "mlp_dim", "max_prompt", "max_context", "logit_scale", "epochs", "batch_size",
                  "learning_rate", "seed", "accuracy_threshold", "pixel_noise"},
                 "build.toy_vlm");
  read_key(j, "patch", c.patch);
  read_key(j, "model_dim", c.model_dim);
  read_key(j, "mlp_dim", c.mlp_dim);
  read_key(j, "max_prompt", c.max_prompt);
  read_key(j, "max_context", c.max_context);
  read_key(j, "logit_scale", c.logit_scale);
  read_key(j, "epochs", t.epochs);
  read_key(j, "batch_size", t.batch_size);
  read_key(j, "learning_rate", t.learning_rate);
  read_key(j, "seed", t.seed);
  read_key(j, "accuracy_threshold", t.accuracy_threshold);
  read_key(j, "pixel_noise", t.pixel_noise);
}

json generator_json(const toy::ToyGeneratorConfig& c, const toy::GeneratorTrainOptions& t) {
  return {{"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"encoder_hidden", c.encoder_hidden},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"pixel_sigma", t.pixel_sigma},
          {"seed", t.seed},
          {"holdout_from_sample", t.holdout_from_sample}};
}

void generator_from(const json& j, toy::ToyGeneratorConfig& c, toy::GeneratorTrainOptions& t) {
  reject_unknown(j,
                 {"latent_dim", "hidden", "encoder_hidden", "epochs", "batch_size", "learning_rate", "pixel_sigma",
                  "seed", "holdout_from_sample"},
                 "build.toy_generator");
  read_key(j, "latent_dim", c.latent_dim);
  read_key(j, "hidden", c.hidden);
  read_key(j, "encoder_hidden", c.encoder_hidden);
  read_key(j, "epochs", t.epochs);
  read_key(j, "batch_size", t.batch_size);
  read_key(j, "learning_rate", t.learning_rate);
  read_key(j, "pixel_sigma", t.pixel_sigma);
  read_key(j, "seed", t.seed);
  read_key(j, "holdout_from_sample", t.holdout_from_sample);
}

json classifier_json(const ClassifierTrainOptions& c) {
  return {{"hidden", c.hidden},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"pixel_noise", c.pixel_noise},
          {"blur_probability", c.blur_probability},
          {"seed", c.seed}};
}

ClassifierTrainOptions classifier_from(const json& j) {
  reject_unknown(j, {"hidden", "epochs", "batch_size", "learning_rate", "pixel_noise", "blur_probability", "seed"},
                 "build.eval_classifier");
  ClassifierTrainOptions c;
  read_key(j, "hidden", c.hidden);
  read_key(j, "epochs", c.epochs);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "learning_rate", c.learning_rate);
  read_key(j, "pixel_noise", c.pixel_noise);
  read_key(j, "blur_probability", c.blur_probability);
  read_key(j, "seed", c.seed);
  return c;
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("missing file: " + path.string());
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

fs::path build_dir(const fs::path& root) { return root / "build"; }

struct Stage {
  std::string name;
  std::string hash;  // hash of the inputs that determine the stage
  std::vector<std::string> files;
};

std::vector<Stage> build_stages(const BuildConfig& c) {
  const json ds = dataset_json(c.dataset);
  return {
      {"dataset", hash_json({{"dataset", ds}}), {"manifest.tsv"}},
      {"toy_vlm", hash_json({{"dataset", ds}, {"toy_vlm", vlm_json(c.vlm, c.vlm_train)}}), {"toy_vlm.json"}},
      {"toy_generator",
       hash_json({{"dataset", ds}, {"toy_generator", generator_json(c.generator, c.generator_train)}}),
       {"toy_generator.json"}},
      {"eval_classifier", hash_json({{"dataset", ds}, {"eval_classifier", classifier_json(c.classifier)}}),
       {"eval_classifier.json"}},
  };
}

// Recorded file hashes of a stage, or empty when the stage must be rebuilt.
// Throws when a checkpoint exists but no longer matches its record.
bool stage_reusable(const fs::path& dir, const Stage& stage, const json& state, bool overwrite) {
  if (!state.contains("stages") || !state["stages"].contains(stage.name)) return false;
  const auto& rec = state["stages"][stage.name];
  if (rec.value("hash", "") != stage.hash) return false;
  for (const auto& f : stage.files) {
    const fs::path path = dir / f;
    if (!fs::exists(path)) return false;
    const std::string want = rec.at("files").value(f, "");
    if (sha256_file(path) != want) {
      if (overwrite) return false;
      throw ConfigError("checkpoint " + path.string() +
                        " does not match its recorded hash; rerun build with --overwrite to replace it");
    }
  }
  return true;
}

std::string combined_build_hash(const json& state) {
  json files = json::object();
  for (const auto& [name, rec] : state.at("stages").items()) files[name] = rec.at("files");
  return hash_json(files);
}

void append_log(const fs::path& dir, const std::vector<std::string>& lines, std::ostream& log) {
  std::ofstream out(dir / "build_log.txt", std::ios::app);
  for (const auto& l : lines) {
    out << l << "\n";
    log << l << "\n";
  }
}

std::vector<std::string> strategy_names(const std::vector<Strategy>& v) {
  std::vector<std::string> out;
  for (auto s : v) out.push_back(to_string(s));
  return out;
}

std::vector<std::string> loss_names(const std::vector<LossKind>& v) {
  std::vector<std::string> out;
  for (auto l : v) out.push_back(to_string(l));
  return out;
}

}  // namespace

json BuildConfig::to_json() const {
  return {{"dataset", dataset_json(dataset)},
          {"toy_vlm", vlm_json(vlm, vlm_train)},
          {"toy_generator", generator_json(generator, generator_train)},
          {"eval_classifier", classifier_json(classifier)}};
}

BuildConfig BuildConfig::from_json(const json& j) {
  reject_unknown(j, {"dataset", "toy_vlm", "toy_generator", "eval_classifier"}, "build");
  BuildConfig c;
  if (j.contains("dataset")) c.dataset = dataset_from(j.at("dataset"));
  if (j.contains("toy_vlm")) vlm_from(j.at("toy_vlm"), c.vlm, c.vlm_train);
  if (j.contains("toy_generator")) generator_from(j.at("toy_generator"), c.generator, c.generator_train);
  if (j.contains("eval_classifier")) c.classifier = classifier_from(j.at("eval_classifier"));
  c.vlm.image_shape = c.dataset.image_shape;
  c.generator.output_shape = c.dataset.image_shape;
  return c;
}

json AttackGrid::to_json() const {
  json a = attack.to_json();
  a.erase("strategy");
  a.erase("loss");
  a.erase("seed");
  return {{"strategies", strategy_names(strategies)},
          {"losses", loss_names(losses)},
          {"targets", targets},
          {"seeds", seeds},
          {"attack", a},
          {"augmentation", augmentation.to_json()},
          {"anchor_count", anchor_count},
          {"anchor_seed", anchor_seed},
          {"normalize_match", normalize_match},
          {"jobs", jobs}};
}

AttackGrid AttackGrid::from_json(const json& j) {
  reject_unknown(j,
                 {"strategies", "losses", "targets", "seeds", "attack", "augmentation", "anchor_count", "anchor_seed",
                  "normalize_match", "jobs"},
                 "attack");
  AttackGrid g;
  if (j.contains("strategies")) {
    g.strategies.clear();
    for (const auto& s : j.at("strategies")) g.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  if (j.contains("losses")) {
    g.losses.clear();
    for (const auto& l : j.at("losses")) g.losses.push_back(parse_loss(l.get<std::string>()));
  }
  read_key(j, "targets", g.targets);
  read_key(j, "seeds", g.seeds);
  if (j.contains("attack")) {
    reject_unknown(j.at("attack"),
                   {"steps", "step_size", "confidence_threshold", "lambda", "pool_size", "candidates", "augmentations",
                    "max_new_tokens", "momentum", "free_running_confidence", "resample_anchor"},
                   "attack.attack");
    g.attack = AttackConfig::from_json(j.at("attack"));
  }
  if (j.contains("augmentation")) g.augmentation = AugmentationConfig::from_json(j.at("augmentation"));
  read_key(j, "anchor_count", g.anchor_count);
  read_key(j, "anchor_seed", g.anchor_seed);
  read_key(j, "normalize_match", g.normalize_match);
  read_key(j, "jobs", g.jobs);
  return g;
}

json RunConfig::to_json() const { return {{"build", build.to_json()}, {"attack", grid.to_json()}}; }

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"build", "attack"}, "config");
  RunConfig c;
  if (j.contains("build")) c.build = BuildConfig::from_json(j.at("build"));
  if (j.contains("attack")) c.grid = AttackGrid::from_json(j.at("attack"));
  return c;
}

RunConfig RunConfig::load(const fs::path& path) { return from_json(read_json(path)); }

fs::path resolve_run_root(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv(kRunRootEnv); env && *env) return env;
  return "runs";
}

BuildOutcome cmd_build(const fs::path& root, const BuildConfig& config, bool overwrite, std::ostream& log) {
  const fs::path dir = build_dir(root);
  fs::create_directories(dir);
  const fs::path state_path = dir / "build_state.json";
  json state = fs::exists(state_path) ? read_json(state_path) : json::object();
  if (!state.contains("stages")) state["stages"] = json::object();

  BuildOutcome outcome;
  const auto dataset = toy::build_dataset(config.dataset);
  const auto stages = build_stages(config);
  // Check every stage first so a corrupt checkpoint aborts before any training.
  std::vector<bool> reuse;
  for (const auto& stage : stages) reuse.push_back(stage_reusable(dir, stage, state, overwrite));

  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& stage = stages[i];
    if (reuse[i]) {
      outcome.reused.push_back(stage.name);
      log << "build: " << stage.name << " up to date\n";
      continue;
    }
    log << "build: training " << stage.name << "\n";
    toy::TrainLog train_log;
    if (stage.name == "dataset") {
      toy::write_dataset(dataset, dir);
      train_log.lines.push_back("dataset: " + std::to_string(dataset.private_split.size()) + " private, " +
                                std::to_string(dataset.public_split.size()) + " public triples");
    } else if (stage.name == "toy_vlm") {
      const auto model = toy::train_toy_vlm(dataset.private_split, dataset, config.vlm, config.vlm_train, &train_log);
      write_file_atomic(dir / "toy_vlm.json", model.to_json().dump());
    } else if (stage.name == "toy_generator") {
      const auto gen =
          toy::train_toy_generator(dataset.public_split, config.generator, config.generator_train, &train_log);
      write_file_atomic(dir / "toy_generator.json", gen.to_json().dump());
    } else {
      const auto clf = train_eval_classifier(dataset.private_split, config.classifier, &train_log);
      write_file_atomic(dir / "eval_classifier.json", clf.to_json().dump());
    }
    append_log(dir, train_log.lines, log);
    for (const auto& l : train_log.lines)
      if (l.rfind("WARNING", 0) == 0) outcome.warnings.push_back(l);
    json files = json::object();
    for (const auto& f : stage.files) files[f] = sha256_file(dir / f);
    state["stages"][stage.name] = {{"hash", stage.hash}, {"files", files}};
    state["config"] = config.to_json();
    write_json(state_path, state);
    outcome.trained.push_back(stage.name);
  }
  state["config"] = config.to_json();
  write_json(state_path, state);
  return outcome;
}

Artifacts load_artifacts(const fs::path& root) {
  const fs::path dir = build_dir(root);
  const fs::path state_path = dir / "build_state.json";
  if (!fs::exists(state_path)) throw ConfigError("no build found: expected " + state_path.string() + " (run build)");
  const json state = read_json(state_path);
  Artifacts a;
  a.config = BuildConfig::from_json(state.at("config"));
  for (const auto& stage : build_stages(a.config)) {
    if (!state.at("stages").contains(stage.name) || state["stages"][stage.name].value("hash", "") != stage.hash)
      throw ConfigError("build stage '" + stage.name + "' is out of date under " + dir.string() + " (run build)");
    for (const auto& f : stage.files) {
      const fs::path path = dir / f;
      if (!fs::exists(path)) throw ConfigError("missing checkpoint: " + path.string());
      if (sha256_file(path) != state["stages"][stage.name]["files"].value(f, ""))
        throw ConfigError("checkpoint " + path.string() + " does not match its recorded hash");
    }
  }
  a.dataset = toy::build_dataset(a.config.dataset);
  a.vlm = std::make_unique<toy::ToyVlm>(toy::ToyVlm::from_json(read_json(dir / "toy_vlm.json")));
  a.generator = std::make_unique<toy::ToyGenerator>(toy::ToyGenerator::from_json(read_json(dir / "toy_generator.json")));
  a.classifier = std::make_unique<EvalClassifier>(EvalClassifier::from_json(read_json(dir / "eval_classifier.json")));
  a.build_hash = combined_build_hash(state);
  return a;
}

RegAnchor ensure_anchor(const fs::path& root, const Artifacts& artifacts, long count, std::uint64_t seed) {
  const fs::path path = build_dir(root) / ("reg_anchor_" + std::to_string(count) + "_" + std::to_string(seed) + ".json");
  const auto fingerprint = artifacts.vlm->fingerprint();
  if (fs::exists(path)) {
    auto a = RegAnchor::from_json(read_json(path));
    if (a.model_fingerprint == fingerprint && a.seed == seed) return a;
  }
  const auto& pub = artifacts.dataset.public_split;
  if (static_cast<long>(pub.size()) < count) {
    throw ConfigError("anchor needs " + std::to_string(count) + " public images but only " +
                      std::to_string(pub.size()) + " exist");
  }
  std::vector<const ImageTensor*> images;
  for (const auto& t : pub) images.push_back(&t.image);
  auto anchor = estimate_reg_anchor(*artifacts.vlm, artifacts.dataset.prompt_tokens(), images, count, seed);
  write_file_atomic(path, anchor.to_json().dump());
  return anchor;
}

std::string RunKey::label() const {
  return to_string(strategy) + "/" + to_string(loss) + "/" + std::to_string(target) + "/" + std::to_string(seed);
}

fs::path RunKey::dir(const fs::path& root) const {
  return root / "attacks" / to_string(strategy) / to_string(loss) / std::to_string(target) / std::to_string(seed);
}

std::vector<RunKey> expand_grid(const AttackGrid& grid, const toy::Dataset& dataset) {
  std::vector<int> targets = grid.targets;
  if (targets.empty())
    for (const auto& id : dataset.private_identities) targets.push_back(id.identity_id);
  for (int t : targets) {
    if (t < 0 || t >= dataset.config.num_identities)
      throw ConfigError("target " + std::to_string(t) + " is not a private identity");
  }
  if (grid.seeds.empty()) throw ConfigError("at least one seed is required");
  std::vector<RunKey> keys;
  for (auto s : grid.strategies)
    for (auto l : grid.losses)
      for (int t : targets)
        for (auto seed : grid.seeds) keys.push_back({s, l, t, seed});
  return keys;
}

namespace {

AttackConfig run_attack_config(const RunKey& key, const AttackGrid& grid) {
  AttackConfig c = grid.attack;
  c.strategy = key.strategy;
  c.loss = key.loss;
  c.seed = derive_seed(key.seed, "run", static_cast<std::uint64_t>(key.target));
  return c;
}

}  // namespace

json run_snapshot(const RunKey& key, const AttackGrid& grid, const Artifacts& artifacts) {
  const auto& id = artifacts.dataset.identity(key.target);
  return {{"strategy", to_string(key.strategy)},
          {"loss", to_string(key.loss)},
          {"target", key.target},
          {"seed", key.seed},
          {"answer", id.name},
          {"prompt", artifacts.dataset.config.prompt},
          {"attack", run_attack_config(key, grid).to_json()},
          {"augmentation", grid.augmentation.to_json()},
          {"anchor_count", grid.anchor_count},
          {"anchor_seed", grid.anchor_seed},
          {"normalize_match", grid.normalize_match},
          {"cell_config_hash", cell_config_hash(key.strategy, key.loss, grid, artifacts.build_hash)},
          {"build_hash", artifacts.build_hash}};
}

std::string cell_config_hash(Strategy strategy, LossKind loss, const AttackGrid& grid, const std::string& build_hash) {
  json a = grid.attack.to_json();
  a["strategy"] = to_string(strategy);
  a["loss"] = to_string(loss);
  a.erase("seed");
  return hash_json({{"attack", a},
                    {"augmentation", grid.augmentation.to_json()},
                    {"anchor_count", grid.anchor_count},
                    {"anchor_seed", grid.anchor_seed},
                    {"normalize_match", grid.normalize_match},
                    {"build_hash", build_hash}})
      .substr(0, 16);
}

RunOutcome execute_run(const fs::path& root, const fs::path& dir, const json& snapshot, const Artifacts& artifacts) {
  RunOutcome outcome;
  outcome.key = {parse_strategy(snapshot.at("strategy").get<std::string>()),
                 parse_loss(snapshot.at("loss").get<std::string>()), snapshot.at("target").get<int>(),
                 snapshot.at("seed").get<std::uint64_t>()};
  if (snapshot.at("build_hash") != artifacts.build_hash)
    throw ConfigError("run " + dir.string() + " was made against a different build");

  fs::create_directories(dir);
  const std::string snapshot_text = snapshot.dump(2) + "\n";
  const std::string run_hash = sha256_hex(snapshot_text);
  const fs::path result_path = dir / "result.json";
  if (fs::exists(result_path)) {
    try {
      if (read_json(result_path).value("run_hash", "") == run_hash) {
        outcome.skipped = true;
        return outcome;
      }
    } catch (const ConfigError&) {
      // unreadable result: rerun
    }
    fs::remove(result_path);
  }
  fs::remove(dir / "metrics.json");
  write_file_atomic(dir / "config.json", snapshot_text);

  const AttackConfig config = AttackConfig::from_json(snapshot.at("attack"));
  config.validate();
  const auto aug = AugmentationConfig::from_json(snapshot.at("augmentation"));
  const auto prompt = artifacts.dataset.prompt_tokens();
  const auto answer = artifacts.dataset.answer_tokens(snapshot.at("answer").get<std::string>());
  AttackTarget target{*artifacts.vlm, *artifacts.generator, prompt, answer};

  std::optional<RegAnchor> anchor;
  if (config.loss == LossKind::kLogitMax)
    anchor = ensure_anchor(root, artifacts, snapshot.at("anchor_count").get<long>(),
                           snapshot.at("anchor_seed").get<std::uint64_t>());
  const IdentityLoss loss{config.loss, config.lambda, anchor ? &*anchor : nullptr, nullptr};

  const auto init = initial_select(target, loss, config.pool_size, config.candidates, config.seed);
  std::vector<InversionResult> results;
  json candidates = json::array();
  std::string trace = trace_csv_header();
  for (std::size_t c = 0; c < init.size(); ++c) {
    InversionOptions options;
    options.anchor = anchor ? &*anchor : nullptr;
    options.candidate_id = static_cast<int>(c);
    json cand{{"candidate_id", c}, {"pool_index", init[c].pool_index}, {"initial_loss", init[c].loss}};
    try {
      auto r = run_inversion(target, config, init[c].latent, options);
      trace += trace_csv_rows(r);
      cand["updates"] = r.updates;
      cand["dropped_steps"] = r.dropped_steps;
      cand["final_aggregate"] = r.trace.empty() ? 0.0 : r.trace.back().aggregate;
      cand["final_match"] = r.trace.empty() ? false : r.trace.back().match;
      cand["latent"] = vector_to_json(r.final_latent.values);
      results.push_back(std::move(r));
    } catch (const InversionAborted& e) {
      cand["error"] = e.what();
      cand["aborted_at_step"] = e.record().step;
    }
    candidates.push_back(cand);
  }
  write_file_atomic(dir / "trace.csv", trace);
  if (results.empty()) {
    outcome.failed = true;
    outcome.error = "every candidate aborted";
    write_json(dir / "failure.json", {{"run_hash", run_hash}, {"error", outcome.error}, {"candidates", candidates}});
    return outcome;
  }

  const auto selection = final_select(target, loss, results, config.augmentations, aug, config.seed);
  json ranked = json::array(), selected = json::array();
  for (const auto& s : selection.ranked) ranked.push_back({{"candidate_id", s.candidate_id}, {"mean_loss", s.mean_loss}});
  for (const auto& s : selection.selected) {
    selected.push_back(s.candidate_id);
    const auto it = std::find_if(results.begin(), results.end(),
                                 [&](const InversionResult& r) { return r.candidate_id == s.candidate_id; });
    write_png(dir / ("final_" + std::to_string(s.candidate_id) + ".png"), to_raster(it->image, 4));
  }
  std::vector<Real> curve(static_cast<std::size_t>(config.steps), 0.0);
  std::vector<int> counts(curve.size(), 0);
  for (const auto& r : results)
    for (const auto& rec : r.trace) {
      const auto k = static_cast<std::size_t>(rec.step - 1);
      if (k < curve.size()) {
        curve[k] += rec.aggregate;
        ++counts[k];
      }
    }
  json mean_curve = json::array();
  for (std::size_t k = 0; k < curve.size(); ++k)
    if (counts[k] > 0) mean_curve.push_back(curve[k] / counts[k]);

  fs::remove(dir / "failure.json");
  write_json(result_path, {{"run_hash", run_hash},
                           {"candidates", candidates},
                           {"ranked", ranked},
                           {"selected", selected},
                           {"mean_aggregate", mean_curve}});
  return outcome;
}

int AttackSummary::failed() const {
  return static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.failed; }));
}

AttackSummary cmd_attack(const fs::path& root, const AttackGrid& grid, std::ostream& log) {
  const Artifacts artifacts = load_artifacts(root);
  grid.attack.validate();
  const auto keys = expand_grid(grid, artifacts.dataset);
  // Anchors are shared between runs; estimate them before the pool starts.
  if (std::find(grid.losses.begin(), grid.losses.end(), LossKind::kLogitMax) != grid.losses.end())
    ensure_anchor(root, artifacts, grid.anchor_count, grid.anchor_seed);

  AttackSummary summary;
  summary.runs.resize(keys.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      const auto& key = keys[i];
      RunOutcome out;
      try {
        out = execute_run(root, key.dir(root), run_snapshot(key, grid, artifacts), artifacts);
      } catch (const std::exception& e) {
        out.key = key;
        out.failed = true;
        out.error = e.what();
      }
      std::lock_guard lock(log_mutex);
      log << "attack " << key.label() << ": "
          << (out.failed ? "FAILED (" + out.error + ")" : out.skipped ? "up to date" : "done") << "\n";
      summary.runs[i] = std::move(out);
    }
  };
  const int jobs = std::max(1, std::min<int>(grid.jobs, static_cast<int>(keys.size())));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return summary;
}

std::vector<TargetVerdict> evaluate_run(const fs::path& dir, const Artifacts& artifacts) {
  const json snapshot = read_json(dir / "config.json");
  const json result = read_json(dir / "result.json");
  const AttackConfig config = AttackConfig::from_json(snapshot.at("attack"));
  const int target_id = snapshot.at("target").get<int>();
  const std::string answer = snapshot.at("answer").get<std::string>();
  const bool normalize = snapshot.at("normalize_match").get<bool>();
  const auto prompt = artifacts.dataset.prompt_tokens();
  const Index decode_len =
      std::max<Index>(config.max_new_tokens, artifacts.dataset.answer_tokens(answer).size());

  std::vector<const ImageTensor*> privates;
  for (const auto& t : artifacts.dataset.private_split)
    if (t.identity_id == target_id) privates.push_back(&t.image);
  const FeatureExtractor extractor = [&](const ImageTensor& im) { return artifacts.classifier->features(im); };

  std::map<int, Vector> latents;
  for (const auto& c : result.at("candidates"))
    if (c.contains("latent")) latents[c.at("candidate_id").get<int>()] = vector_from_json(c.at("latent"));

  std::vector<TargetVerdict> verdicts;
  for (const auto& sel : result.at("selected")) {
    TargetVerdict v;
    v.strategy = snapshot.at("strategy").get<std::string>();
    v.loss = snapshot.at("loss").get<std::string>();
    v.target = target_id;
    v.seed = snapshot.at("seed").get<std::uint64_t>();
    v.candidate_id = sel.get<int>();
    const ImageTensor image = decode_latent(*artifacts.generator, {latents.at(v.candidate_id), 0});
    v.match = answer_matches(*artifacts.vlm, prompt, image, answer, decode_len, normalize);
    if (artifacts.classifier->knows(target_id)) {
      const auto ranked = artifacts.classifier->ranked_labels(image);
      v.rank = static_cast<int>(std::find(ranked.begin(), ranked.end(), target_id) - ranked.begin()) + 1;
    } else {
      v.error = "label unknown to the evaluation classifier";
    }
    if (privates.empty()) {
      v.error = "no private images for this label";
    } else {
      v.delta_eval = feature_distance(extractor, image, privates);
    }
    verdicts.push_back(std::move(v));
  }
  const auto cell = aggregate_cell(snapshot.at("strategy").get<std::string>(), snapshot.at("loss").get<std::string>(),
                                   snapshot.at("cell_config_hash").get<std::string>(), verdicts);
  json vj = json::array();
  for (const auto& v : verdicts) {
    vj.push_back({{"candidate_id", v.candidate_id},
                  {"match", v.match},
                  {"rank", v.rank ? json(*v.rank) : json(nullptr)},
                  {"delta_eval", v.delta_eval ? json(*v.delta_eval) : json(nullptr)},
                  {"delta_face", nullptr},
                  {"error", v.error}});
  }
  json metrics = cell.to_json();
  metrics["target"] = target_id;
  metrics["seed"] = snapshot.at("seed");
  metrics["verdicts"] = vj;
  write_json(dir / "metrics.json", metrics);
  return verdicts;
}

namespace {

std::vector<TargetVerdict> verdicts_from_metrics(const json& snapshot, const json& metrics) {
  std::vector<TargetVerdict> out;
  for (const auto& v : metrics.at("verdicts")) {
    TargetVerdict t;
    t.strategy = snapshot.at("strategy").get<std::string>();
    t.loss = snapshot.at("loss").get<std::string>();
    t.target = snapshot.at("target").get<int>();
    t.seed = snapshot.at("seed").get<std::uint64_t>();
    t.candidate_id = v.at("candidate_id").get<int>();
    t.match = v.at("match").get<bool>();
    if (!v.at("rank").is_null()) t.rank = v.at("rank").get<int>();
    if (!v.at("delta_eval").is_null()) t.delta_eval = v.at("delta_eval").get<Real>();
    if (!v.at("delta_face").is_null()) t.delta_face = v.at("delta_face").get<Real>();
    t.error = v.at("error").get<std::string>();
    out.push_back(std::move(t));
  }
  return out;
}

// Shared by evaluate and report: `evaluate` decides whether runs are (re)scored.
EvaluationReport assemble_report(const fs::path& root, const AttackGrid& grid, const Artifacts& artifacts,
                                 bool evaluate, std::ostream& log) {
  const auto keys = expand_grid(grid, artifacts.dataset);
  EvaluationReport report;
  std::map<std::pair<std::string, std::string>, std::vector<std::vector<Real>>> curves;
  for (const auto& key : keys) {
    const fs::path dir = key.dir(root);
    if (!fs::exists(dir / "result.json") || !fs::exists(dir / "config.json")) {
      report.missing_runs.push_back(key.label());
      continue;
    }
    const json snapshot = read_json(dir / "config.json");
    std::vector<TargetVerdict> verdicts;
    if (evaluate) {
      verdicts = evaluate_run(dir, artifacts);
    } else if (fs::exists(dir / "metrics.json")) {
      verdicts = verdicts_from_metrics(snapshot, read_json(dir / "metrics.json"));
    } else {
      report.missing_runs.push_back(key.label());
      continue;
    }
    report.verdicts.insert(report.verdicts.end(), verdicts.begin(), verdicts.end());
    const json result = read_json(dir / "result.json");
    curves[{to_string(key.strategy), to_string(key.loss)}].push_back(
        result.at("mean_aggregate").get<std::vector<Real>>());
  }
  for (auto s : grid.strategies)
    for (auto l : grid.losses) {
      report.cells.push_back(aggregate_cell(to_string(s), to_string(l),
                                            cell_config_hash(s, l, grid, artifacts.build_hash), report.verdicts));
      const auto it = curves.find({to_string(s), to_string(l)});
      if (it == curves.end()) continue;
      LossCurve curve{to_string(s), to_string(l), {}};
      std::size_t len = 0;
      for (const auto& c : it->second) len = std::max(len, c.size());
      for (std::size_t k = 0; k < len; ++k) {
        Real sum = 0;
        int n = 0;
        for (const auto& c : it->second)
          if (k < c.size()) {
            sum += c[k];
            ++n;
          }
        curve.mean_aggregate.push_back(sum / n);
      }
      report.curves.push_back(std::move(curve));
    }
  build_report(report, root / "reports");
  log << summary_table(report);
  if (!report.missing_runs.empty()) log << report.missing_runs.size() << " requested runs have no results\n";
  return report;
}

}  // namespace

EvaluationReport cmd_evaluate(const fs::path& root, const AttackGrid& grid, std::ostream& log) {
  const Artifacts artifacts = load_artifacts(root);
  return assemble_report(root, grid, artifacts, true, log);
}

EvaluationReport cmd_report(const fs::path& root, const AttackGrid& grid, std::ostream& log) {
  const Artifacts artifacts = load_artifacts(root);
  return assemble_report(root, grid, artifacts, false, log);
}

ReplayOutcome cmd_replay(const fs::path& root, const fs::path& dir, std::ostream& log) {
  const Artifacts artifacts = load_artifacts(root);
  const json snapshot = read_json(dir / "config.json");
  if (!fs::exists(dir / "result.json")) throw ConfigError("run " + dir.string() + " has no result.json to replay");

  const fs::path scratch = root / "replay" / sha256_hex(fs::absolute(dir).string()).substr(0, 16);
  fs::remove_all(scratch);
  const auto out = execute_run(root, scratch, snapshot, artifacts);
  if (out.failed) throw NumericError("replay failed: " + out.error);
  evaluate_run(scratch, artifacts);

  ReplayOutcome outcome;
  for (const char* name : {"config.json", "trace.csv", "result.json", "metrics.json"}) {
    if (!fs::exists(dir / name)) {
      if (std::string(name) == "metrics.json") {
        log << "replay: original has no metrics.json (run evaluate first); skipped\n";
        continue;
      }
      outcome.differences.push_back(std::string(name) + " missing from original");
      continue;
    }
    if (read_file(dir / name) != read_file(scratch / name)) outcome.differences.push_back(name);
  }
  outcome.identical = outcome.differences.empty();
  log << "replay " << dir.string() << ": " << (outcome.identical ? "byte-identical" : "DIFFERS") << "\n";
  for (const auto& d : outcome.differences) log << "  differs: " << d << "\n";
  fs::remove_all(scratch);
  return outcome;
}

}  // namespace vlminv::pipeline

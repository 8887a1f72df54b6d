#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"
#include "vlminv/strategies.hpp"
#include "vlminv/toy/dataset.hpp"
#include "vlminv/toy/vlm.hpp"

namespace vlminv {

/// Identity classifier trained on the private split. It plays the role of
/// the independent evaluation network and is never consulted by an attack.
class EvalClassifier {
 public:
  EvalClassifier(ImageShape shape, std::vector<int> labels, Matrix w1, Matrix b1, Matrix w2, Matrix b2);

  Vector logits(const ImageTensor& image) const;
  /// Hidden (penultimate) activations.
  Vector features(const ImageTensor& image) const;
  /// Identity ids ranked by score, best first.
  std::vector<int> ranked_labels(const ImageTensor& image) const;
  bool knows(int identity_id) const;

  const std::vector<int>& labels() const { return labels_; }
  Index feature_dim() const { return w1_.rows(); }
  std::string fingerprint() const;

  nlohmann::json to_json() const;
  static EvalClassifier from_json(const nlohmann::json& j);

  // training access
  std::vector<nn::ParamRef> refs();

 private:
  ImageShape shape_;
  std::vector<int> labels_;  // class index -> identity id
  Matrix w1_, b1_, w2_, b2_;
};

struct ClassifierTrainOptions {
  int hidden = 64;
  int epochs = 40;
  int batch_size = 32;
  Real learning_rate = 2e-3;
  Real pixel_noise = 0.05;  // Gaussian input noise during training
  Real blur_probability = 0.5;  // chance of a box blur (radius 1 or 2) per sample
  std::uint64_t seed = 3;
};

EvalClassifier train_eval_classifier(const std::vector<toy::Triple>& private_split,
                                     const ClassifierTrainOptions& options, toy::TrainLog* log = nullptr);

Real classifier_accuracy(const EvalClassifier& classifier, const std::vector<toy::Triple>& split);

/// Greedy-decodes `image` and tests whether `answer` is a substring.
bool answer_matches(const TargetModel& model, const TokenSequence& prompt, const ImageTensor& image,
                    const std::string& answer, Index max_len, bool normalize = false);

/// Fraction of reconstructions (results[j].image) whose decoded text contains answers[j].
Real match_rate(const TargetModel& model, const std::vector<InversionResult>& results, const TokenSequence& prompt,
                const std::vector<std::string>& answers, Index max_len, bool normalize = false);

struct AttackAccuracy {
  Real top1 = 0;
  Real top5 = 0;
  int evaluated = 0;
  int excluded = 0;  // labels unknown to the classifier
};

AttackAccuracy attack_accuracy(const EvalClassifier& classifier, const std::vector<const ImageTensor*>& images,
                               const std::vector<int>& labels);

using FeatureExtractor = std::function<Vector(const ImageTensor&)>;

/// Mean l2 distance between the reconstruction's features and those of each
/// private image. Throws ConfigError when `privates` is empty.
Real feature_distance(const FeatureExtractor& extractor, const ImageTensor& reconstruction,
                      const std::vector<const ImageTensor*>& privates);

/// Verdict for one final reconstruction.
struct TargetVerdict {
  std::string strategy;
  std::string loss;
  int target = 0;
  std::uint64_t seed = 0;
  int candidate_id = 0;
  bool match = false;
  std::optional<int> rank;  // 1-based rank of the true label; empty when excluded
  std::optional<Real> delta_eval;
  std::optional<Real> delta_face;
  std::string error;
};

/// Aggregated metrics for one (strategy, loss) cell.
struct CellMetrics {
  std::string strategy;
  std::string loss;
  std::string config_hash;
  bool missing = false;
  Real match_rate = 0;
  Real top1 = 0;
  Real top5 = 0;
  Real delta_eval = 0;
  std::optional<Real> delta_face;
  int n_targets = 0;          // (target, seed) runs
  int n_reconstructions = 0;  // final images evaluated
  int excluded = 0;
  std::optional<Real> attacc_m;  // external judge import, never computed here
  std::optional<Real> attacc_h;  // external user-study import, never computed here

  nlohmann::json to_json() const;
};

/// Metrics of one cell from its verdicts; n_targets counts distinct (target, seed).
CellMetrics aggregate_cell(const std::string& strategy, const std::string& loss, const std::string& config_hash,
                           const std::vector<TargetVerdict>& verdicts);

struct LossCurve {
  std::string strategy;
  std::string loss;
  std::vector<Real> mean_aggregate;  // per step, averaged over traces
};

struct EvaluationReport {
  std::vector<CellMetrics> cells;  // one per requested grid cell, missing ones flagged
  std::vector<TargetVerdict> verdicts;
  std::vector<LossCurve> curves;
  std::vector<std::string> missing_runs;  // requested (strategy, loss, target, seed) runs without results

  nlohmann::json to_json() const;
};

/// Writes metrics.json, per_target.csv, summary.md, match_rate.png and
/// loss_curves_<loss>.png into `dir`. Output is a pure function of `report`.
void build_report(const EvaluationReport& report, const std::filesystem::path& dir);

std::string per_target_csv(const std::vector<TargetVerdict>& verdicts);
std::string summary_table(const EvaluationReport& report);

}  // namespace vlminv

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"
#include "vlminv/losses.hpp"

namespace vlminv {

enum class Strategy { kTmi, kTmiC, kSmi, kSmiAw };

std::string to_string(Strategy s);
/// Accepts "tmi", "tmi-c", "smi", "smi-aw" (case-insensitive, '_' allowed for '-').
Strategy parse_strategy(std::string_view name);
inline constexpr Strategy kAllStrategies[] = {Strategy::kTmi, Strategy::kTmiC, Strategy::kSmi, Strategy::kSmiAw};
inline constexpr LossKind kAllLosses[] = {LossKind::kCrossEntropy, LossKind::kMaxMargin, LossKind::kLogitMax};

struct AttackConfig {
  Strategy strategy = Strategy::kSmiAw;
  LossKind loss = LossKind::kLogitMax;
  long steps = 70;                    // N
  Real step_size = 0.05;              // beta
  Real confidence_threshold = 0.999;  // p_thres
  Real lambda = 1.0;                  // LOM regulariser weight
  int pool_size = 2000;
  int candidates = 16;
  int augmentations = 10;
  std::uint64_t seed = 0;
  int max_new_tokens = 8;
  /// Heavy-ball momentum; 0 keeps the plain update w <- w - beta * grad.
  Real momentum = 0.0;
  /// SMI-AW confidence from free-running decoding instead of teacher forcing.
  bool free_running_confidence = false;
  /// LOM anchor drawn per step from N(mean, diag(variance)) instead of the mean.
  bool resample_anchor = false;

  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Adaptive scheme: weight 1/n on each of the n tokens with
/// probability below `threshold`, zero elsewhere; uniform 1/m when n = 0.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> adaptive_weights(const Eigen::MatrixBase<Derived>& probs,
                                                                             typename Derived::Scalar threshold) {
  using Scalar = typename Derived::Scalar;
  const Index m = probs.size();
  if (m == 0) throw ContractViolation("adaptive weights need at least one token");
  if (!(threshold > Scalar(0) && threshold <= Scalar(1))) {
    throw ContractViolation("confidence threshold must lie in (0, 1]");
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> alpha(m);
  Index low = 0;
  for (Index i = 0; i < m; ++i) low += probs[i] < threshold ? 1 : 0;
  for (Index i = 0; i < m; ++i) {
    if (low == 0) {
      alpha[i] = Scalar(1) / Scalar(m);
    } else {
      alpha[i] = probs[i] < threshold ? Scalar(1) / Scalar(low) : Scalar(0);
    }
  }
  return alpha;
}

std::vector<Real> adaptive_weights(const std::vector<Real>& probs, Real threshold);

/// K = floor(N / m). Throws ConfigError when N < m.
long steps_per_token(long total_steps, long answer_length);

struct StepRecord {
  long step = 0;   // 1-based global update index
  long sweep = 0;  // k (1-based); SMI/SMI-AW use k = step
  long token = 0;  // i (1-based) for TMI/TMI-C, 0 for sequence strategies
  std::vector<Real> token_losses;
  std::vector<Real> token_probs;
  std::vector<Real> alpha;  // sequence strategies only
  Real aggregate = 0;
  Real grad_norm = 0;
  bool match = false;  // greedy decode of the pre-update image contains the answer
};

struct InversionResult {
  LatentVector initial;
  LatentVector final_latent;
  ImageTensor image;
  std::vector<StepRecord> trace;
  AttackConfig config;
  long updates = 0;
  long dropped_steps = 0;  // N - m*K for token strategies
  int candidate_id = 0;
};

/// Raised when a loss or gradient turns non-finite; carries the step.
class InversionAborted : public NumericError {
 public:
  InversionAborted(const std::string& what, StepRecord record)
      : NumericError(what, record.step), record_(std::move(record)) {}
  const StepRecord& record() const { return record_; }

 private:
  StepRecord record_;
};

/// Optional per-run inputs beyond (M, G, t, y, N, beta).
struct InversionOptions {
  const RegAnchor* anchor = nullptr;  // required for LOM
  /// L_prior hook on the latent: returns the prior loss and adds its gradient.
  /// Empty means no prior term.
  std::function<Real(const Vector& latent, Vector& grad)> prior;
  std::function<void(const StepRecord&)> observer;
  bool record_match = true;
  int candidate_id = 0;
};

/// Everything fixed for one attack target.
struct AttackTarget {
  const TargetModel& model;
  const Generator& generator;
  const TokenSequence& prompt;
  const TokenSequence& answer;
};

InversionResult run_tmi(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                        const InversionOptions& options = {});
InversionResult run_tmi_c(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                          const InversionOptions& options = {});
InversionResult run_smi(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                        const InversionOptions& options = {});
InversionResult run_smi_aw(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                           const InversionOptions& options = {});

/// Dispatches on config.strategy.
InversionResult run_inversion(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                              const InversionOptions& options = {});

/// Standard-normal latent drawn from derive_seed(config.seed, "init").
LatentVector random_latent(const Generator& generator, std::uint64_t seed);

/// Per-token losses, probabilities and the latent gradient of a weighted
/// sum of them, all from one teacher-forced pass at `latent`.
struct SequenceEvaluation {
  std::vector<TokenLoss> tokens;
  ImageTensor image;
  bool teacher_forced_argmax_match = false;

  std::vector<Real> losses() const;
  std::vector<Real> probabilities() const;
};

class SequenceObjective {
 public:
  SequenceObjective(const AttackTarget& target, IdentityLoss loss);

  SequenceEvaluation evaluate(const Vector& latent);
  /// Gradient of sum_i weights[i] * loss_i at the latent of the last evaluate().
  Vector gradient(const std::vector<Real>& weights) const;
  /// Does the greedy decode of the last evaluated image contain the answer?
  bool greedy_match(const SequenceEvaluation& eval, int max_new_tokens) const;

  IdentityLoss& loss() { return loss_; }

 private:
  const AttackTarget& target_;
  IdentityLoss loss_;
  std::unique_ptr<GeneratorPass> gen_pass_;
  std::unique_ptr<ModelPass> model_pass_;
  std::vector<StepCotangent> grads_;
};

/// True when `answer` occurs in `text` (exact, case-sensitive unless `normalize`).
bool contains_answer(const std::string& text, const std::string& answer, bool normalize = false);

/// One CSV row per step: step,sweep,token,aggregate,grad_norm,match,token_losses,token_probs,alpha
/// (lists ';'-separated, reals in %.17g). `candidate` is prefixed as first column.
std::string trace_csv_header();
std::string trace_csv_rows(const InversionResult& result);

}  // namespace vlminv

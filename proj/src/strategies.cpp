#include "vlminv/strategies.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kTmi:
      return "tmi";
    case Strategy::kTmiC:
      return "tmi-c";
    case Strategy::kSmi:
      return "smi";
    case Strategy::kSmiAw:
      return "smi-aw";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return c == '_' ? '-' : std::tolower(c); });
  if (s == "tmi") return Strategy::kTmi;
  if (s == "tmi-c") return Strategy::kTmiC;
  if (s == "smi") return Strategy::kSmi;
  if (s == "smi-aw") return Strategy::kSmiAw;
  throw ConfigError("unknown strategy '" + std::string(name) + "' (expected tmi, tmi-c, smi or smi-aw)");
}

void AttackConfig::validate() const {
  if (steps < 1) throw ConfigError("inversion steps N must be at least 1");
  if (!(step_size >= 0)) throw ConfigError("update rate beta must be non-negative");
  if (!(confidence_threshold > 0 && confidence_threshold <= 1)) throw ConfigError("p_thres must lie in (0, 1]");
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (candidates < 1) throw ConfigError("candidate count must be at least 1");
  if (pool_size < candidates) throw ConfigError("pool size must be at least the candidate count");
  if (augmentations < 1) throw ConfigError("augmentation count must be at least 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"strategy", to_string(strategy)},
          {"loss", to_string(loss)},
          {"steps", steps},
          {"step_size", step_size},
          {"confidence_threshold", confidence_threshold},
          {"lambda", lambda},
          {"pool_size", pool_size},
          {"candidates", candidates},
          {"augmentations", augmentations},
          {"seed", seed},
          {"max_new_tokens", max_new_tokens},
          {"momentum", momentum},
          {"free_running_confidence", free_running_confidence},
          {"resample_anchor", resample_anchor}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.strategy = parse_strategy(j.value("strategy", to_string(c.strategy)));
  c.loss = parse_loss(j.value("loss", to_string(c.loss)));
  c.steps = j.value("steps", c.steps);
  c.step_size = j.value("step_size", c.step_size);
  c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
  c.lambda = j.value("lambda", c.lambda);
  c.pool_size = j.value("pool_size", c.pool_size);
  c.candidates = j.value("candidates", c.candidates);
  c.augmentations = j.value("augmentations", c.augmentations);
  c.seed = j.value("seed", c.seed);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.momentum = j.value("momentum", c.momentum);
  c.free_running_confidence = j.value("free_running_confidence", c.free_running_confidence);
  c.resample_anchor = j.value("resample_anchor", c.resample_anchor);
  return c;
}

std::vector<Real> adaptive_weights(const std::vector<Real>& probs, Real threshold) {
  const Eigen::Map<const Vector> p(probs.data(), static_cast<Index>(probs.size()));
  const Vector a = adaptive_weights(p, threshold);
  return {a.data(), a.data() + a.size()};
}

long steps_per_token(long total_steps, long answer_length) {
  if (answer_length < 1) throw ContractViolation("answer must contain at least one token");
  if (total_steps < answer_length) {
    throw ConfigError("token budget below one step per token (N = " + std::to_string(total_steps) +
                      ", m = " + std::to_string(answer_length) + ")");
  }
  return total_steps / answer_length;
}

bool contains_answer(const std::string& text, const std::string& answer, bool normalize) {
  if (!normalize) return text.find(answer) != std::string::npos;
  auto norm = [](const std::string& s) {
    std::string out;
    bool space = false;
    for (unsigned char c : s) {
      if (std::isspace(c)) {
        space = !out.empty();
        continue;
      }
      if (space) out += ' ';
      space = false;
      out += static_cast<char>(std::tolower(c));
    }
    return out;
  };
  return norm(text).find(norm(answer)) != std::string::npos;
}

std::vector<Real> SequenceEvaluation::losses() const {
  std::vector<Real> out;
  for (const auto& t : tokens) out.push_back(t.report.loss);
  return out;
}

std::vector<Real> SequenceEvaluation::probabilities() const {
  std::vector<Real> out;
  for (const auto& t : tokens) out.push_back(t.report.probability);
  return out;
}

SequenceObjective::SequenceObjective(const AttackTarget& target, IdentityLoss loss)
    : target_(target), loss_(loss) {
  if (target_.answer.empty()) throw ContractViolation("target answer must not be empty");
  if (target_.answer.size() - 1 > target_.model.max_context()) {
    throw ContractViolation("target answer longer than the model context");
  }
}

SequenceEvaluation SequenceObjective::evaluate(const Vector& latent) {
  gen_pass_ = target_.generator.forward(latent);
  const auto& answer = target_.answer.ids();
  const std::span<const TokenId> context(answer.data(), answer.size() - 1);
  model_pass_ = target_.model.forward(target_.prompt, gen_pass_->image(), context);
  SequenceEvaluation eval;
  eval.image = gen_pass_->image();
  eval.teacher_forced_argmax_match = true;
  grads_.clear();
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const auto& step = model_pass_->steps()[i];
    eval.tokens.push_back(loss_(step, answer[i], static_cast<Index>(i)));
    grads_.push_back(eval.tokens.back().gradient);
    if (argmax(step.logits) != answer[i]) eval.teacher_forced_argmax_match = false;
  }
  return eval;
}

Vector SequenceObjective::gradient(const std::vector<Real>& weights) const {
  if (!model_pass_) throw ContractViolation("gradient() before evaluate()");
  if (weights.size() != grads_.size()) throw ContractViolation("one weight per answer token required");
  std::vector<StepCotangent> cot(grads_.size());
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (weights[i] == 0.0) continue;
    if (grads_[i].logits.size() > 0) cot[i].logits = weights[i] * grads_[i].logits;
    if (grads_[i].penultimate.size() > 0) cot[i].penultimate = weights[i] * grads_[i].penultimate;
  }
  return gen_pass_->pullback(model_pass_->pullback(cot));
}

bool SequenceObjective::greedy_match(const SequenceEvaluation& eval, int max_new_tokens) const {
  // Every teacher-forced argmax equal to y means greedy decoding reproduces y.
  if (eval.teacher_forced_argmax_match) return true;
  const Index max_len = std::max<Index>(max_new_tokens, target_.answer.size());
  const auto decoded = target_.model.greedy_decode(target_.prompt, eval.image, max_len);
  return contains_answer(target_.model.vocabulary()->decode(decoded), target_.answer.text());
}

LatentVector random_latent(const Generator& generator, std::uint64_t seed) {
  const auto s = derive_seed(seed, "init");
  Rng rng(s);
  return {standard_normal(generator.latent_dim(), rng), s};
}

namespace {

class Runner {
 public:
  Runner(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
         const InversionOptions& options)
      : target_(target),
        config_(config),
        options_(options),
        objective_(target, IdentityLoss{config.loss, config.lambda, options.anchor}),
        anchor_rng_(derive_seed(config.seed, "anchor_resample", static_cast<std::uint64_t>(options.candidate_id))) {
    config_.validate();
    if (init.dim() != target.generator.latent_dim()) throw ContractViolation("initial latent has wrong dimension");
    if (!init.finite()) throw ContractViolation("initial latent is not finite");
    if (config.loss == LossKind::kLogitMax && !options.anchor) {
      throw ContractViolation("logit-maximization loss requires a regularization anchor");
    }
    latent_ = init.values;
    velocity_ = Vector::Zero(latent_.size());
    result_.initial = init;
    result_.config = config;
    result_.candidate_id = options.candidate_id;
  }

  Index answer_length() const { return target_.answer.size(); }

  /// Token strategies pass token > 0 (one-hot weight); sequence strategies
  /// pass token = 0 and a weight rule.
  template <typename WeightRule>
  void step(long sweep, long token, WeightRule&& rule) {
    if (config_.resample_anchor && options_.anchor) {
      std::normal_distribution<Real> normal(0.0, 1.0);
      sampled_anchor_ = options_.anchor->mean;
      for (Index d = 0; d < sampled_anchor_.size(); ++d)
        sampled_anchor_[d] += std::sqrt(options_.anchor->variance[d]) * normal(anchor_rng_);
      objective_.loss().anchor_override = &sampled_anchor_;
    }
    const auto eval = objective_.evaluate(latent_);
    StepRecord rec;
    rec.step = result_.updates + 1;
    rec.sweep = sweep;
    rec.token = token;
    rec.token_losses = eval.losses();
    rec.token_probs = eval.probabilities();
    std::vector<Real> weights(static_cast<std::size_t>(answer_length()), 0.0);
    if (token > 0) {
      weights[static_cast<std::size_t>(token - 1)] = 1.0;
      rec.aggregate = rec.token_losses[static_cast<std::size_t>(token - 1)];
    } else {
      weights = rule(eval);
      rec.alpha = weights;
      rec.aggregate = 0;
      for (std::size_t i = 0; i < weights.size(); ++i) rec.aggregate += weights[i] * rec.token_losses[i];
    }
    Vector grad = objective_.gradient(weights);
    if (options_.prior) rec.aggregate += options_.prior(latent_, grad);
    rec.grad_norm = grad.norm();
    if (options_.record_match) rec.match = objective_.greedy_match(eval, config_.max_new_tokens);
    if (!std::isfinite(rec.aggregate) || !grad.allFinite()) {
      throw InversionAborted("non-finite loss or gradient at step " + std::to_string(rec.step), rec);
    }
    apply_update(grad);
    if (options_.observer) options_.observer(rec);
    result_.trace.push_back(std::move(rec));
  }

  std::vector<Real> adaptive(const SequenceEvaluation& eval) {
    if (!config_.free_running_confidence) return adaptive_weights(eval.probabilities(), config_.confidence_threshold);
    // Confidence of y_i when the model conditions on its own greedy prefix.
    const auto m = static_cast<std::size_t>(answer_length());
    auto predicted = target_.model.greedy_decode(target_.prompt, eval.image, static_cast<Index>(m));
    std::vector<TokenId> context(target_.answer.ids().begin(), target_.answer.ids().end() - 1);
    for (std::size_t i = 0; i < std::min(predicted.size(), context.size()); ++i) context[i] = predicted[i];
    const auto pass = target_.model.forward(target_.prompt, eval.image, context);
    std::vector<Real> probs;
    for (std::size_t i = 0; i < m; ++i)
      probs.push_back(std::exp(log_softmax_at(pass->steps()[i].logits, target_.answer[static_cast<Index>(i)])));
    return adaptive_weights(probs, config_.confidence_threshold);
  }

  InversionResult finish() {
    result_.final_latent = {latent_, result_.initial.rng_seed};
    result_.image = target_.generator.forward(latent_)->image();
    return std::move(result_);
  }

  InversionResult& result() { return result_; }

 private:
  void apply_update(const Vector& grad) {
    if (config_.momentum > 0) {
      velocity_ = config_.momentum * velocity_ + grad;
      latent_ -= config_.step_size * velocity_;
    } else {
      latent_ -= config_.step_size * grad;
    }
    ++result_.updates;
  }

  const AttackTarget& target_;
  AttackConfig config_;
  const InversionOptions& options_;
  SequenceObjective objective_;
  Rng anchor_rng_;
  Vector sampled_anchor_;
  Vector latent_;
  Vector velocity_;
  InversionResult result_;
};

const auto kNoRule = [](const SequenceEvaluation&) { return std::vector<Real>{}; };

}  // namespace

InversionResult run_tmi(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                        const InversionOptions& options) {
  Runner runner(target, config, init, options);
  const long m = runner.answer_length();
  const long k_steps = steps_per_token(config.steps, m);
  runner.result().dropped_steps = config.steps - m * k_steps;
  for (long k = 1; k <= k_steps; ++k)
    for (long i = 1; i <= m; ++i) runner.step(k, i, kNoRule);
  return runner.finish();
}

InversionResult run_tmi_c(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                          const InversionOptions& options) {
  Runner runner(target, config, init, options);
  const long m = runner.answer_length();
  const long k_steps = steps_per_token(config.steps, m);
  runner.result().dropped_steps = config.steps - m * k_steps;
  for (long i = 1; i <= m; ++i)
    for (long k = 1; k <= k_steps; ++k) runner.step(k, i, kNoRule);
  return runner.finish();
}

InversionResult run_smi(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                        const InversionOptions& options) {
  Runner runner(target, config, init, options);
  const auto m = static_cast<std::size_t>(runner.answer_length());
  const auto uniform = [m](const SequenceEvaluation&) {
    return std::vector<Real>(m, 1.0 / static_cast<Real>(m));
  };
  for (long k = 1; k <= config.steps; ++k) runner.step(k, 0, uniform);
  return runner.finish();
}

InversionResult run_smi_aw(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                           const InversionOptions& options) {
  Runner runner(target, config, init, options);
  const auto rule = [&runner](const SequenceEvaluation& eval) { return runner.adaptive(eval); };
  for (long k = 1; k <= config.steps; ++k) runner.step(k, 0, rule);
  return runner.finish();
}

InversionResult run_inversion(const AttackTarget& target, const AttackConfig& config, const LatentVector& init,
                              const InversionOptions& options) {
  switch (config.strategy) {
    case Strategy::kTmi:
      return run_tmi(target, config, init, options);
    case Strategy::kTmiC:
      return run_tmi_c(target, config, init, options);
    case Strategy::kSmi:
      return run_smi(target, config, init, options);
    case Strategy::kSmiAw:
      return run_smi_aw(target, config, init, options);
  }
  throw ContractViolation("unknown strategy");
}

std::string trace_csv_header() {
  return "candidate,step,sweep,token,aggregate,grad_norm,match,token_losses,token_probs,alpha\n";
}

std::string trace_csv_rows(const InversionResult& result) {
  auto join = [](const std::vector<Real>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + format_real(v[i]);
    return s;
  };
  std::ostringstream out;
  for (const auto& r : result.trace) {
    out << result.candidate_id << ',' << r.step << ',' << r.sweep << ',' << r.token << ',' << format_real(r.aggregate)
        << ',' << format_real(r.grad_norm) << ',' << (r.match ? 1 : 0) << ',' << join(r.token_losses) << ','
        << join(r.token_probs) << ',' << join(r.alpha) << '\n';
  }
  return out.str();
}

}  // namespace vlminv

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"

namespace vlminv {

enum class LossKind { kCrossEntropy, kMaxMargin, kLogitMax };

std::string to_string(LossKind kind);
/// Accepts "ce", "mml", "lom" (case-insensitive).
LossKind parse_loss(std::string_view name);

/// Penultimate statistics over public (prompt, image) pairs; `mean` is f_reg.
struct RegAnchor {
  Vector mean;
  Vector variance;  // population convention; diagnostics only
  long count = 0;
  std::string model_fingerprint;
  std::string prompt;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static RegAnchor from_json(const nlohmann::json& j);
};

struct TokenLossReport {
  Real loss = 0;
  Real probability = 0;  // softmax(logits)[y]
  Real target_logit = 0;
  Real runner_up_logit = 0;  // max over k != y
  Index token_index = 0;
};

/// Loss value plus its gradient with respect to the step's logits and
/// penultimate features.
struct TokenLoss {
  TokenLossReport report;
  StepCotangent gradient;
};

namespace detail {

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& logits, Index token_index) {
  if (!logits.allFinite()) {
    throw NumericError("non-finite logits at token " + std::to_string(token_index));
  }
}

template <typename Derived>
void require_target(const Eigen::MatrixBase<Derived>& logits, TokenId target) {
  if (target < 0 || target >= logits.size()) throw ContractViolation("target token outside vocabulary");
}

}  // namespace detail

/// Index of the largest logit other than `target`; lowest index on ties.
template <typename Derived>
Index runner_up(const Eigen::MatrixBase<Derived>& logits, TokenId target) {
  Index best = -1;
  for (Index k = 0; k < logits.size(); ++k) {
    if (k == target) continue;
    if (best < 0 || logits[k] > logits[best]) best = k;
  }
  return best;
}

/// Numerically stable log-softmax at `target`.
template <typename Derived>
typename Derived::Scalar log_softmax_at(const Eigen::MatrixBase<Derived>& logits, TokenId target) {
  using std::exp;
  using std::log;
  const auto mx = logits.maxCoeff();
  return (logits[target] - mx) - log((logits.array() - mx).exp().sum());
}

/// Softmax of `logits`, shifted by the max before exponentiation.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& logits) {
  const auto mx = logits.maxCoeff();
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
TokenLossReport describe(const Eigen::MatrixBase<Derived>& logits, TokenId target, Index token_index) {
  TokenLossReport r;
  r.token_index = token_index;
  r.target_logit = logits[target];
  const Index ru = runner_up(logits, target);
  r.runner_up_logit = ru >= 0 ? Real(logits[ru]) : -std::numeric_limits<Real>::infinity();
  r.probability = std::exp(log_softmax_at(logits, target));
  return r;
}

/// -log P(y | ...) = logsumexp(l) - l_y.
template <typename Derived>
TokenLoss ce_loss(const Eigen::MatrixBase<Derived>& logits, TokenId target, Index token_index = 0) {
  detail::require_target(logits, target);
  detail::require_finite(logits, token_index);
  TokenLoss out;
  out.report = describe(logits, target, token_index);
  out.report.loss = -log_softmax_at(logits, target);
  out.gradient.logits = softmax(logits);
  out.gradient.logits[target] -= 1.0;
  return out;
}

/// -l_y + max_{k != y} l_k.
template <typename Derived>
TokenLoss mml_loss(const Eigen::MatrixBase<Derived>& logits, TokenId target, Index token_index = 0) {
  if (logits.size() < 2) throw ContractViolation("max-margin loss needs at least two classes");
  detail::require_target(logits, target);
  detail::require_finite(logits, token_index);
  TokenLoss out;
  out.report = describe(logits, target, token_index);
  out.report.loss = -out.report.target_logit + out.report.runner_up_logit;
  out.gradient.logits = Vector::Zero(logits.size());
  out.gradient.logits[target] = -1.0;
  out.gradient.logits[runner_up(logits, target)] += 1.0;
  return out;
}

/// -l_y + lambda * ||f - f_reg||^2.
template <typename LogitsDerived, typename FeatDerived, typename AnchorDerived>
TokenLoss lom_loss(const Eigen::MatrixBase<LogitsDerived>& logits, TokenId target,
                   const Eigen::MatrixBase<FeatDerived>& penultimate, const Eigen::MatrixBase<AnchorDerived>& anchor,
                   Real lambda, Index token_index = 0) {
  detail::require_target(logits, target);
  detail::require_finite(logits, token_index);
  if (penultimate.size() != anchor.size()) {
    throw ContractViolation("anchor dimension " + std::to_string(anchor.size()) +
                            " does not match penultimate dimension " + std::to_string(penultimate.size()));
  }
  TokenLoss out;
  out.report = describe(logits, target, token_index);
  const Vector diff = penultimate - anchor;
  out.report.loss = -out.report.target_logit + lambda * diff.squaredNorm();
  out.gradient.logits = Vector::Zero(logits.size());
  out.gradient.logits[target] = -1.0;
  out.gradient.penultimate = 2.0 * lambda * diff;
  return out;
}

TokenLoss ce_loss(const ModelStep& step, TokenId target, Index token_index = 0);
TokenLoss mml_loss(const ModelStep& step, TokenId target, Index token_index = 0);
TokenLoss lom_loss(const ModelStep& step, TokenId target, const RegAnchor& anchor, Real lambda,
                   Index token_index = 0);

/// One of the three identity losses, bound to its parameters.
struct IdentityLoss {
  LossKind kind = LossKind::kLogitMax;
  Real lambda = 1.0;
  const RegAnchor* anchor = nullptr;
  /// When set, replaces anchor->mean (used by the resampled-anchor variant).
  const Vector* anchor_override = nullptr;

  TokenLoss operator()(const ModelStep& step, TokenId target, Index token_index) const;
};

/// Mean and variance of the penultimate features at the first answer
/// position (empty context) over up to `count` public images. If more images
/// are available than requested, a seeded subset is used; if fewer, all are
/// used and the actual count is recorded.
RegAnchor estimate_reg_anchor(const TargetModel& model, const TokenSequence& prompt,
                              std::span<const ImageTensor* const> images, long count, std::uint64_t seed);

/// Population mean/variance of the columns of `features` (D x n).
void column_moments(const Matrix& features, Vector& mean, Vector& variance);

}  // namespace vlminv

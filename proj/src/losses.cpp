#include "vlminv/losses.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include "vlminv/io.hpp"
#include "vlminv/rng.hpp"

namespace vlminv {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCrossEntropy:
      return "ce";
    case LossKind::kMaxMargin:
      return "mml";
    case LossKind::kLogitMax:
      return "lom";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "ce") return LossKind::kCrossEntropy;
  if (s == "mml") return LossKind::kMaxMargin;
  if (s == "lom") return LossKind::kLogitMax;
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected ce, mml or lom)");
}

nlohmann::json RegAnchor::to_json() const {
  return {{"kind", "reg_anchor"},
          {"model_fingerprint", model_fingerprint},
          {"prompt", prompt},
          {"count", count},
          {"seed", seed},
          {"mean", vector_to_json(mean)},
          {"variance", vector_to_json(variance)}};
}

RegAnchor RegAnchor::from_json(const nlohmann::json& j) {
  if (j.at("kind") != "reg_anchor") throw ConfigError("file is not a reg_anchor");
  RegAnchor a;
  a.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  a.prompt = j.at("prompt").get<std::string>();
  a.count = j.at("count").get<long>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.mean = vector_from_json(j.at("mean"));
  a.variance = vector_from_json(j.at("variance"));
  return a;
}

TokenLoss ce_loss(const ModelStep& step, TokenId target, Index token_index) {
  return ce_loss(step.logits, target, token_index);
}

TokenLoss mml_loss(const ModelStep& step, TokenId target, Index token_index) {
  return mml_loss(step.logits, target, token_index);
}

TokenLoss lom_loss(const ModelStep& step, TokenId target, const RegAnchor& anchor, Real lambda, Index token_index) {
  return lom_loss(step.logits, target, step.penultimate, anchor.mean, lambda, token_index);
}

TokenLoss IdentityLoss::operator()(const ModelStep& step, TokenId target, Index token_index) const {
  switch (kind) {
    case LossKind::kCrossEntropy:
      return ce_loss(step.logits, target, token_index);
    case LossKind::kMaxMargin:
      return mml_loss(step.logits, target, token_index);
    case LossKind::kLogitMax: {
      if (!anchor && !anchor_override) throw ContractViolation("logit-maximization loss needs a regularization anchor");
      const Vector& f_reg = anchor_override ? *anchor_override : anchor->mean;
      return lom_loss(step.logits, target, step.penultimate, f_reg, lambda, token_index);
    }
  }
  throw ContractViolation("unknown loss kind");
}

namespace {

// Pairwise summation of columns [begin, end).
Vector pairwise_sum(const Matrix& m, Index begin, Index end) {
  if (end - begin <= 8) {
    Vector s = Vector::Zero(m.rows());
    for (Index j = begin; j < end; ++j) s += m.col(j);
    return s;
  }
  const Index mid = begin + (end - begin) / 2;
  return pairwise_sum(m, begin, mid) + pairwise_sum(m, mid, end);
}

}  // namespace

void column_moments(const Matrix& features, Vector& mean, Vector& variance) {
  const Index n = features.cols();
  if (n == 0) throw ConfigError("cannot take moments of zero samples");
  mean = pairwise_sum(features, 0, n) / static_cast<Real>(n);
  const Matrix centred = features.colwise() - mean;
  variance = pairwise_sum(centred.cwiseAbs2(), 0, n) / static_cast<Real>(n);
}

RegAnchor estimate_reg_anchor(const TargetModel& model, const TokenSequence& prompt,
                              std::span<const ImageTensor* const> images, long count, std::uint64_t seed) {
  if (count <= 0) throw ConfigError("anchor sample count must be positive");
  if (images.empty()) throw ConfigError("anchor estimation needs at least one public image");
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  if (static_cast<long>(images.size()) > count) {
    Rng rng(derive_seed(seed, "reg_anchor"));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(count));
    std::sort(order.begin(), order.end());
  }
  Matrix features(model.penultimate_dim(), static_cast<Index>(order.size()));
  for (std::size_t j = 0; j < order.size(); ++j) {
    auto pass = model.forward(prompt, *images[order[j]], {});
    features.col(static_cast<Index>(j)) = pass->steps().front().penultimate;
  }
  RegAnchor a;
  column_moments(features, a.mean, a.variance);
  a.count = static_cast<long>(order.size());
  a.model_fingerprint = model.fingerprint();
  a.prompt = prompt.text();
  a.seed = seed;
  return a;
}

}  // namespace vlminv

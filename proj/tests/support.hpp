#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vlminv/core.hpp"
#include "vlminv/rng.hpp"
#include "vlminv/toy/dataset.hpp"
#include "vlminv/toy/generator.hpp"
#include "vlminv/toy/vlm.hpp"

namespace vlminv::testing {

inline const std::string kPrompt = "Who is in the image ?";

/// Target model whose steps come from a callback; pullback returns zeros.
class ScriptedModel final : public TargetModel {
 public:
  using StepFn = std::function<ModelStep(const ImageTensor&, std::span<const TokenId>)>;

  ScriptedModel(std::shared_ptr<const Vocabulary> vocab, ImageShape shape, Index dim, StepFn fn)
      : vocab_(std::move(vocab)), shape_(shape), dim_(dim), fn_(std::move(fn)) {}

  const std::shared_ptr<const Vocabulary>& vocabulary() const override { return vocab_; }
  ImageShape input_shape() const override { return shape_; }
  Index penultimate_dim() const override { return dim_; }
  Index max_context() const override { return 16; }
  std::string fingerprint() const override { return "scripted"; }

  std::unique_ptr<ModelPass> forward(const TokenSequence&, const ImageTensor& image,
                                     std::span<const TokenId> context) const override {
    check_image(*this, image);
    auto pass = std::make_unique<Pass>(shape_.numel());
    for (std::size_t j = 0; j <= context.size(); ++j) pass->push(fn_(image, context.first(j)));
    return pass;
  }

 private:
  class Pass final : public ModelPass {
   public:
    explicit Pass(Index n) : n_(n) {}
    void push(ModelStep s) { steps_.push_back(std::move(s)); }
    Vector pullback(std::span<const StepCotangent>) const override { return Vector::Zero(n_); }

   private:
    Index n_;
  };

  std::shared_ptr<const Vocabulary> vocab_;
  ImageShape shape_;
  Index dim_;
  StepFn fn_;
};

/// One-hot logits (scaled by 10) on the next token of `script(image)`, then <eos>.
inline ScriptedModel text_model(std::shared_ptr<const Vocabulary> vocab, ImageShape shape,
                                std::function<std::string(const ImageTensor&)> script) {
  auto v = vocab;
  return ScriptedModel(vocab, shape, 2, [v, script](const ImageTensor& image, std::span<const TokenId> ctx) {
    const auto ids = v->encode(script(image));
    ModelStep s{Vector::Zero(v->size()), Vector::Zero(2)};
    const TokenId next = ctx.size() < ids.size() ? ids[ctx.size()] : Vocabulary::kEos;
    s.logits[next] = 10.0;
    return s;
  });
}

/// Small untrained toy stack: fast enough for exhaustive unit checks.
struct ToyStack {
  std::shared_ptr<const Vocabulary> vocab = toy::toy_vocabulary(kPrompt);
  toy::ToyVlm vlm = toy::ToyVlm::initialize(toy::ToyVlmConfig{}, vocab, 11);
  toy::ToyGenerator generator = toy::ToyGenerator::initialize(toy::ToyGeneratorConfig{}, 12);
  TokenSequence prompt = TokenSequence::encode(kPrompt, vocab);

  /// Answer made of the first `m` syllables, rotated by `offset`.
  TokenSequence answer(int m, int offset = 0) const {
    std::string text;
    const auto& syl = toy::syllables();
    for (int i = 0; i < m; ++i) text += (i ? " " : "") + syl[static_cast<std::size_t>(i + offset) % syl.size()];
    return TokenSequence::encode(text, vocab);
  }

  LatentVector latent(std::uint64_t seed) const {
    Rng rng(derive_seed(seed, "test.latent"));
    return {standard_normal(generator.latent_dim(), rng), seed};
  }
};

inline ImageTensor constant_image(ImageShape shape, Real value) {
  return ImageTensor(shape, Vector::Constant(shape.numel(), value));
}

}  // namespace vlminv::testing

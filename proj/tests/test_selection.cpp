#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"
#include "vlminv/selection.hpp"

using namespace vlminv;
using vlminv::testing::ToyStack;

namespace {

std::vector<ScoredLatent> scored(std::initializer_list<Real> losses) {
  std::vector<ScoredLatent> out;
  Index j = 0;
  for (Real l : losses) out.push_back({{Vector::Constant(1, static_cast<Real>(j)), 0}, l, j++});
  return out;
}

/// Max-margin loss of every token equals the mean pixel value of the image.
vlminv::testing::ScriptedModel mean_pixel_model(const std::shared_ptr<const Vocabulary>& vocab, ImageShape shape,
                                                const TokenSequence& answer) {
  const auto ids = answer.ids();
  return vlminv::testing::ScriptedModel(vocab, shape, 2, [vocab, ids](const ImageTensor& im, std::span<const TokenId> ctx) {
    ModelStep s{Vector::Zero(vocab->size()), Vector::Zero(2)};
    const TokenId y = ctx.size() < ids.size() ? ids[ctx.size()] : Vocabulary::kEos;
    s.logits[y] = -im.pixels.mean();
    return s;
  });
}

InversionResult candidate(int id, ImageTensor image) {
  InversionResult r;
  r.candidate_id = id;
  r.image = std::move(image);
  return r;
}

}  // namespace

TEST(LowestN, Examples) {
  const auto best = lowest_n(scored({3, 1, 4, 1.5, 9}), 2);
  ASSERT_EQ(best.size(), 2u);
  EXPECT_EQ(best[0].loss, 1);
  EXPECT_EQ(best[1].loss, 1.5);
  EXPECT_EQ(best[0].pool_index, 1);

  const auto all = lowest_n(scored({3, 1, 4, 1.5, 9}), 5);
  std::vector<Real> losses;
  for (const auto& s : all) losses.push_back(s.loss);
  EXPECT_EQ(losses, (std::vector<Real>{1, 1.5, 3, 4, 9}));
  EXPECT_THROW(lowest_n(scored({1, 2}), 3), ConfigError);
}

TEST(LowestN, TiesBreakByPoolIndex) {
  const auto best = lowest_n(scored({2, 1, 1, 1}), 2);
  EXPECT_EQ(best[0].pool_index, 1);
  EXPECT_EQ(best[1].pool_index, 2);
}

TEST(InitialSelect, MatchesBruteForceSort) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const IdentityLoss loss{LossKind::kCrossEntropy};
  const std::uint64_t seed = 4;
  const auto picked = initial_select(t, loss, 2000, 16, seed);

  std::vector<std::pair<Real, Index>> all;
  for (Index j = 0; j < 2000; ++j) {
    Rng rng(derive_seed(seed, "pool", static_cast<std::uint64_t>(j)));
    const Vector z = standard_normal(s.generator.latent_dim(), rng);
    all.push_back({sequence_loss(s.vlm, s.prompt, decode_latent(s.generator, {z, 0}), answer, loss), j});
  }
  std::sort(all.begin(), all.end());
  ASSERT_EQ(picked.size(), 16u);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_EQ(picked[k].pool_index, all[k].second);
    EXPECT_EQ(picked[k].loss, all[k].first);
  }
}

TEST(InitialSelect, MoreCandidatesThanPool) {
  ToyStack s;
  const auto answer = s.answer(2);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  EXPECT_THROW(initial_select(t, IdentityLoss{LossKind::kMaxMargin}, 4, 5, 0), ConfigError);
}

TEST(FinalSelect, KeepsLowerMeanLoss) {
  ToyStack s;
  const ImageShape shape{8, 8, 3};
  const auto answer = s.answer(2);
  const auto model = mean_pixel_model(s.vocab, shape, answer);
  const AttackTarget t{model, s.generator, s.prompt, answer};
  const std::vector<InversionResult> cands{candidate(0, vlminv::testing::constant_image(shape, 0.4)),
                                           candidate(1, vlminv::testing::constant_image(shape, 0.9))};
  const auto sel = final_select(t, IdentityLoss{LossKind::kMaxMargin}, cands, 10, AugmentationConfig::identity(), 0);
  ASSERT_EQ(sel.selected.size(), 1u);
  EXPECT_EQ(sel.selected[0].candidate_id, 0);
  EXPECT_NEAR(sel.ranked[0].mean_loss, 0.4, 1e-12);
  EXPECT_NEAR(sel.ranked[1].mean_loss, 0.9, 1e-12);
  const auto augmented = final_select(t, IdentityLoss{LossKind::kMaxMargin}, cands, 10, {}, 0);
  EXPECT_EQ(augmented.selected[0].candidate_id, 0);
}

TEST(FinalSelect, KeepsHalfRoundedUpAndIgnoresOrder) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const IdentityLoss loss{LossKind::kCrossEntropy};
  std::vector<InversionResult> cands;
  for (int c = 0; c < 16; ++c) cands.push_back(candidate(c, decode_latent(s.generator, s.latent(50 + c))));
  const auto sel = final_select(t, loss, cands, 10, {}, 3);
  EXPECT_EQ(sel.selected.size(), 8u);
  EXPECT_EQ(sel.ranked.size(), 16u);

  auto shuffled = cands;
  std::shuffle(shuffled.begin(), shuffled.end(), Rng(1));
  const auto again = final_select(t, loss, shuffled, 10, {}, 3);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(again.selected[k].candidate_id, sel.selected[k].candidate_id);
    EXPECT_EQ(again.selected[k].mean_loss, sel.selected[k].mean_loss);
  }

  cands.resize(5);
  EXPECT_EQ(final_select(t, loss, cands, 2, {}, 3).selected.size(), 3u);
}

TEST(FinalSelect, IdentityAugmentationRanksByPlainLoss) {
  ToyStack s;
  const auto answer = s.answer(2, 3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const IdentityLoss loss{LossKind::kMaxMargin};
  std::vector<InversionResult> cands;
  std::vector<std::pair<Real, int>> plain;
  for (int c = 0; c < 9; ++c) {
    cands.push_back(candidate(c, decode_latent(s.generator, s.latent(70 + c))));
    plain.push_back({sequence_loss(s.vlm, s.prompt, cands.back().image, answer, loss), c});
  }
  std::sort(plain.begin(), plain.end());
  const auto sel = final_select(t, loss, cands, 4, AugmentationConfig::identity(), 0);
  for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_EQ(sel.ranked[k].candidate_id, plain[k].second);
}

TEST(Augment, OutputIsClamped) {
  Rng rng(2);
  AugmentationConfig strong{1.0, 0.5, 0.8, 0.8};
  for (Real v : {0.0, 0.5, 1.0}) {
    const auto out = augment(vlminv::testing::constant_image({8, 8, 3}, v), strong, rng);
    EXPECT_TRUE(out.in_range());
    EXPECT_EQ(out.shape, (ImageShape{8, 8, 3}));
  }
}

TEST(Augment, IdentityLeavesImageUnchanged) {
  vlminv::testing::ToyStack s;
  Rng rng(2);
  const auto image = decode_latent(s.generator, s.latent(1));
  EXPECT_EQ(augment(image, AugmentationConfig::identity(), rng).pixels, image.pixels);
}

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "support.hpp"
#include "vlminv/io.hpp"
#include "vlminv/nn.hpp"

using namespace vlminv;
using vlminv::testing::ToyStack;

namespace {

Real rel_error(const Vector& a, const Vector& b) {
  return (a - b).lpNorm<Eigen::Infinity>() / std::max(a.lpNorm<Eigen::Infinity>(), 1e-12);
}

}  // namespace

TEST(Dataset, DefaultCounts) {
  const auto ds = toy::build_dataset({});
  EXPECT_EQ(ds.private_split.size(), 512u);
  std::set<std::string> answers;
  std::istringstream lines(toy::manifest(ds));
  for (std::string line; std::getline(lines, line);) {
    std::vector<std::string> cols;
    std::istringstream row(line);
    for (std::string c; std::getline(row, c, '\t');) cols.push_back(c);
    ASSERT_EQ(cols.size(), 5u);
    if (cols[4] == "private") answers.insert(cols[2]);
  }
  EXPECT_EQ(answers.size(), 16u);
}

TEST(Dataset, ManifestIsDeterministic) {
  EXPECT_EQ(toy::manifest(toy::build_dataset({})), toy::manifest(toy::build_dataset({})));
  toy::DatasetConfig other;
  other.seed = 8;
  EXPECT_NE(toy::manifest(toy::build_dataset({})), toy::manifest(toy::build_dataset(other)));
}

TEST(Dataset, RejectsEmptyIdentities) {
  toy::DatasetConfig c;
  c.per_identity = 0;
  EXPECT_THROW(toy::build_dataset(c), ConfigError);
}

TEST(Dataset, NamesAreNotTokenPrefixesOfEachOther) {
  const auto ds = toy::build_dataset({});
  for (const auto& a : ds.private_identities)
    for (const auto& b : ds.private_identities)
      if (a.identity_id != b.identity_id) EXPECT_NE(b.name.rfind(a.name + " ", 0), 0u) << a.name << " / " << b.name;
}

TEST(Dataset, PrivateIdentitiesHaveDistinctColourPairs) {
  const auto ds = toy::build_dataset({});
  std::set<std::pair<int, int>> pairs;
  for (const auto& id : ds.private_identities)
    pairs.insert({id.attributes.foreground, id.attributes.background});
  EXPECT_EQ(pairs.size(), ds.private_identities.size());
}

TEST(Dataset, ImagesAreInRange) {
  const auto ds = toy::build_dataset({});
  for (const auto& t : ds.private_split) ASSERT_TRUE(t.image.in_range());
}

TEST(ToyVlm, PixelPullbackMatchesFiniteDifferences) {
  ToyStack s;
  Rng rng(5);
  const auto image = decode_latent(s.generator, s.latent(1));
  const auto answer = s.answer(4);
  const std::vector<TokenId> context(answer.ids().begin(), answer.ids().end() - 1);

  const auto pass = s.vlm.forward(s.prompt, image, context);
  std::vector<StepCotangent> cot;
  for (std::size_t j = 0; j < pass->steps().size(); ++j)
    cot.push_back({standard_normal(s.vocab->size(), rng), standard_normal(s.vlm.penultimate_dim(), rng)});
  const auto objective = [&](const ImageTensor& im) {
    const auto p = s.vlm.forward(s.prompt, im, context);
    Real v = 0;
    for (std::size_t j = 0; j < cot.size(); ++j)
      v += cot[j].logits.dot(p->steps()[j].logits) + cot[j].penultimate.dot(p->steps()[j].penultimate);
    return v;
  };
  const Vector analytic = pass->pullback(cot);
  ASSERT_EQ(analytic.size(), image.pixels.size());

  std::uniform_int_distribution<Index> pick(0, image.pixels.size() - 1);
  Vector a(40), fd(40);
  const Real h = 1e-5;
  for (int k = 0; k < 40; ++k) {
    const Index p = pick(rng);
    ImageTensor plus = image, minus = image;
    plus.pixels[p] += h;
    minus.pixels[p] -= h;
    a[k] = analytic[p];
    fd[k] = (objective(plus) - objective(minus)) / (2 * h);
  }
  EXPECT_LT(rel_error(a, fd), 1e-4);
}

TEST(ToyVlm, WeightGradientsMatchFiniteDifferences) {
  ToyStack s;
  const auto image = decode_latent(s.generator, s.latent(2));
  const auto answer = s.answer(3, 2);
  toy::ToyVlm model = s.vlm;
  toy::ToyVlmWeights grads = model.weights();
  for (auto& r : grads.refs()) r.value->setZero();
  model.accumulate(s.prompt, image, answer, &grads);

  Rng rng(9);
  auto params = model.mutable_weights().refs();
  auto gparams = grads.refs();
  const Real h = 1e-5;
  for (std::size_t r = 0; r < params.size(); ++r) {
    Matrix& w = *params[r].value;
    std::uniform_int_distribution<Index> pick(0, w.size() - 1);
    Vector a(4), fd(4);
    for (int k = 0; k < 4; ++k) {
      const Index i = pick(rng);
      const Real saved = w.data()[i];
      w.data()[i] = saved + h;
      const Real up = model.accumulate(s.prompt, image, answer, nullptr).loss;
      w.data()[i] = saved - h;
      const Real down = model.accumulate(s.prompt, image, answer, nullptr).loss;
      w.data()[i] = saved;
      a[k] = gparams[r].value->data()[i];
      fd[k] = (up - down) / (2 * h);
    }
    // token embeddings of unused tokens have exactly zero gradient
    if (a.lpNorm<Eigen::Infinity>() == 0 && fd.lpNorm<Eigen::Infinity>() < 1e-8) continue;
    EXPECT_LT(rel_error(a, fd), 1e-4) << params[r].name;
  }
}

TEST(ToyVlm, FeaturesAreUnitNorm) {
  ToyStack s;
  const auto image = decode_latent(s.generator, s.latent(4));
  const auto step = target_step(s.vlm, s.prompt, image, s.answer(2));
  EXPECT_NEAR(step.penultimate.norm(), 1.0, 1e-9);
}

TEST(ToyVlm, JsonRoundTripKeepsOutputs) {
  ToyStack s;
  const auto back = toy::ToyVlm::from_json(s.vlm.to_json());
  EXPECT_EQ(back.fingerprint(), s.vlm.fingerprint());
  const auto image = decode_latent(s.generator, s.latent(0));
  EXPECT_EQ(target_step(back, s.prompt, image, s.answer(1)).logits,
            target_step(s.vlm, s.prompt, image, s.answer(1)).logits);
}

TEST(ToyVlm, ShortBudgetWarnsUnderTrained) {
  toy::DatasetConfig dc;
  dc.num_identities = 4;
  dc.per_identity = 2;
  dc.num_public_identities = 1;
  dc.public_per_identity = 1;
  const auto ds = toy::build_dataset(dc);
  toy::VlmTrainOptions opts;
  opts.epochs = 1;
  toy::TrainLog log;
  toy::train_toy_vlm(ds.private_split, ds, {}, opts, &log);
  EXPECT_FALSE(log.reached_threshold);
  bool warned = false;
  for (const auto& l : log.lines) warned |= l.find("UNDER-TRAINED") != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(ToyGenerator, PullbackMatchesFiniteDifferences) {
  ToyStack s;
  Rng rng(3);
  const Vector z = s.latent(6).values;
  const Vector c = standard_normal(s.generator.output_shape().numel(), rng);
  const Vector analytic = s.generator.forward(z)->pullback(c);
  Vector fd(z.size());
  const Real h = 1e-5;
  for (Index k = 0; k < z.size(); ++k) {
    Vector up = z, down = z;
    up[k] += h;
    down[k] -= h;
    fd[k] = (c.dot(s.generator.forward(up)->image().pixels) - c.dot(s.generator.forward(down)->image().pixels)) / (2 * h);
  }
  EXPECT_LT(rel_error(analytic, fd), 1e-4);
}

TEST(ToyGenerator, EmptySplitIsConfigError) {
  EXPECT_THROW(toy::train_toy_generator({}, {}, {}), ConfigError);
}

TEST(ToyGenerator, SameSeedSameCheckpoint) {
  toy::DatasetConfig dc;
  dc.num_public_identities = 8;
  dc.public_per_identity = 4;
  const auto ds = toy::build_dataset(dc);
  toy::GeneratorTrainOptions opts;
  opts.epochs = 2;
  opts.holdout_from_sample = 3;
  const auto a = toy::train_toy_generator(ds.public_split, {}, opts);
  const auto b = toy::train_toy_generator(ds.public_split, {}, opts);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  opts.seed = 99;
  EXPECT_NE(toy::train_toy_generator(ds.public_split, {}, opts).fingerprint(), a.fingerprint());
}

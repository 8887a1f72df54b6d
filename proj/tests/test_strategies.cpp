#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "support.hpp"
#include "vlminv/strategies.hpp"

using namespace vlminv;
using vlminv::testing::ToyStack;

namespace {

RegAnchor toy_anchor(const ToyStack& s) {
  std::vector<ImageTensor> pool;
  for (std::uint64_t k = 100; k < 116; ++k) pool.push_back(decode_latent(s.generator, s.latent(k)));
  std::vector<const ImageTensor*> images;
  for (const auto& im : pool) images.push_back(&im);
  return estimate_reg_anchor(s.vlm, s.prompt, images, 16, 0);
}

AttackConfig config_for(Strategy strategy, LossKind loss, long steps) {
  AttackConfig c;
  c.strategy = strategy;
  c.loss = loss;
  c.steps = steps;
  c.max_new_tokens = 4;
  return c;
}

std::vector<long> token_order(const InversionResult& r) {
  std::vector<long> out;
  for (const auto& rec : r.trace) out.push_back(rec.token);
  return out;
}

}  // namespace

TEST(AdaptiveWeights, Examples) {
  EXPECT_EQ(adaptive_weights({0.9999, 0.5, 0.9999, 0.2}, 0.999), (std::vector<Real>{0, 0.5, 0, 0.5}));
  EXPECT_EQ(adaptive_weights({0.9999, 0.9995, 1.0}, 0.999), (std::vector<Real>(3, 1.0 / 3.0)));
  EXPECT_EQ(adaptive_weights({0.1, 0.2, 0.3, 0.4}, 0.999), (std::vector<Real>(4, 0.25)));
  EXPECT_THROW(adaptive_weights(std::vector<Real>{}, 0.5), ContractViolation);
}

TEST(AdaptiveWeights, WeightedAggregateExample) {
  const auto alpha = adaptive_weights({0.9999, 0.5, 0.9999, 0.2}, 0.999);
  const std::vector<Real> losses{9, 1, 9, 3};
  EXPECT_DOUBLE_EQ(std::inner_product(alpha.begin(), alpha.end(), losses.begin(), 0.0), 2.0);
}

TEST(AdaptiveWeights, RandomisedInvariants) {
  Rng rng(17);
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const int m = len(rng);
    const Real thres = std::max(unit(rng), 1e-9);
    Vector p(m);
    for (int i = 0; i < m; ++i) p[i] = unit(rng) < 0.3 ? 1.0 - 1e-3 * unit(rng) : unit(rng);
    const Vector a = adaptive_weights(p, thres);
    const int low = static_cast<int>((p.array() < thres).count());
    ASSERT_GE(a.minCoeff(), 0.0);
    ASSERT_NEAR(a.sum(), 1.0, 1e-12);
    for (int i = 0; i < m; ++i) {
      if (low == 0) {
        ASSERT_EQ(a[i], 1.0 / m);
      } else {
        ASSERT_EQ(a[i] > 0, p[i] < thres);
      }
    }
  }
}

TEST(StepsPerToken, FloorRule) {
  EXPECT_EQ(steps_per_token(70, 7), 10);
  EXPECT_EQ(steps_per_token(70, 4), 17);
  EXPECT_EQ(steps_per_token(5, 5), 1);
  EXPECT_THROW(steps_per_token(3, 4), ConfigError);
}

TEST(Strategies, ParseAndName) {
  for (auto s : kAllStrategies) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_EQ(parse_strategy("SMI_AW"), Strategy::kSmiAw);
  EXPECT_THROW(parse_strategy("greedy"), ConfigError);
}

TEST(AttackConfig, ValidationAndJson) {
  AttackConfig c;
  c.step_size = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.confidence_threshold = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.step_size = 0;
  EXPECT_NO_THROW(c.validate());
  c.strategy = Strategy::kTmiC;
  c.steps = 33;
  EXPECT_EQ(AttackConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Tmi, InterleavedOrder) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const auto r = run_tmi(t, config_for(Strategy::kTmi, LossKind::kCrossEntropy, 6), s.latent(0));
  EXPECT_EQ(token_order(r), (std::vector<long>{1, 2, 3, 1, 2, 3}));
  EXPECT_EQ(r.updates, 6);
}

TEST(TmiC, BlockOrder) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const auto r = run_tmi_c(t, config_for(Strategy::kTmiC, LossKind::kCrossEntropy, 6), s.latent(0));
  EXPECT_EQ(token_order(r), (std::vector<long>{1, 1, 2, 2, 3, 3}));
}

TEST(Tmi, RemainderIsDropped) {
  ToyStack s;
  const auto answer = s.answer(4);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  for (auto strategy : {Strategy::kTmi, Strategy::kTmiC}) {
    const auto r = run_inversion(t, config_for(strategy, LossKind::kMaxMargin, 70), s.latent(1));
    EXPECT_EQ(r.updates, 68);
    EXPECT_EQ(r.dropped_steps, 2);
  }
}

TEST(Strategies, ZeroStepSizeLeavesLatentUnchanged) {
  ToyStack s;
  const auto answer = s.answer(3);
  const auto anchor = toy_anchor(s);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  InversionOptions opts;
  opts.anchor = &anchor;
  for (auto strategy : kAllStrategies) {
    auto c = config_for(strategy, LossKind::kLogitMax, 6);
    c.step_size = 0;
    const auto init = s.latent(2);
    const auto r = run_inversion(t, c, init, opts);
    EXPECT_EQ(r.final_latent.values, init.values) << to_string(strategy);
  }
}

TEST(TmiC, SingleTokenMatchesTmi) {
  ToyStack s;
  const auto answer = s.answer(1);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const auto a = run_tmi(t, config_for(Strategy::kTmi, LossKind::kCrossEntropy, 9), s.latent(3));
  const auto b = run_tmi_c(t, config_for(Strategy::kTmiC, LossKind::kCrossEntropy, 9), s.latent(3));
  EXPECT_EQ(trace_csv_rows(a), trace_csv_rows(b));
  EXPECT_EQ(a.final_latent.values, b.final_latent.values);
}

TEST(Smi, SingleTokenMatchesTmi) {
  ToyStack s;
  const auto answer = s.answer(1, 4);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const auto a = run_tmi(t, config_for(Strategy::kTmi, LossKind::kMaxMargin, 7), s.latent(4));
  const auto b = run_smi(t, config_for(Strategy::kSmi, LossKind::kMaxMargin, 7), s.latent(4));
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) EXPECT_EQ(a.trace[k].aggregate, b.trace[k].aggregate);
  EXPECT_EQ(a.final_latent.values, b.final_latent.values);
}

TEST(Smi, AggregateIsMeanOfTokenLosses) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  const auto r = run_smi(t, config_for(Strategy::kSmi, LossKind::kCrossEntropy, 5), s.latent(5));
  for (const auto& rec : r.trace) {
    const Real mean = std::accumulate(rec.token_losses.begin(), rec.token_losses.end(), 0.0) / 3.0;
    EXPECT_NEAR(rec.aggregate, mean, 1e-12);
  }
}

TEST(SmiAw, AggregateUsesAdaptiveWeights) {
  ToyStack s;
  const auto answer = s.answer(4);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  auto c = config_for(Strategy::kSmiAw, LossKind::kCrossEntropy, 5);
  c.confidence_threshold = 0.12;
  const auto r = run_smi_aw(t, c, s.latent(6));
  for (const auto& rec : r.trace) {
    EXPECT_EQ(rec.alpha, adaptive_weights(rec.token_probs, c.confidence_threshold));
    Real agg = 0;
    for (std::size_t i = 0; i < rec.alpha.size(); ++i) agg += rec.alpha[i] * rec.token_losses[i];
    EXPECT_NEAR(rec.aggregate, agg, 1e-12);
  }
}

TEST(SmiAw, AllConfidentFallsBackToMean) {
  ToyStack s;
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  auto c = config_for(Strategy::kSmiAw, LossKind::kCrossEntropy, 3);
  c.confidence_threshold = 1e-9;
  const auto r = run_smi_aw(t, c, s.latent(7));
  for (const auto& rec : r.trace) {
    ASSERT_TRUE(std::all_of(rec.token_probs.begin(), rec.token_probs.end(), [](Real p) { return p >= 1e-9; }));
    EXPECT_EQ(rec.alpha, std::vector<Real>(3, 1.0 / 3.0));
    EXPECT_NEAR(rec.aggregate, std::accumulate(rec.token_losses.begin(), rec.token_losses.end(), 0.0) / 3.0, 1e-12);
  }
}

TEST(SmiAw, CoincidesWithSmiWhenEveryTokenIsUnsure) {
  ToyStack s;
  const auto anchor = toy_anchor(s);
  InversionOptions opts;
  opts.anchor = &anchor;
  for (int m = 1; m <= 5; ++m) {
    const auto answer = s.answer(m, m);
    const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
    auto c = config_for(Strategy::kSmi, LossKind::kLogitMax, 1);
    c.confidence_threshold = 1.0;
    const auto a = run_smi(t, c, s.latent(20 + m), opts);
    c.strategy = Strategy::kSmiAw;
    const auto b = run_smi_aw(t, c, s.latent(20 + m), opts);
    for (Real p : b.trace[0].token_probs) ASSERT_LT(p, 1.0);
    EXPECT_NEAR(a.trace[0].aggregate, b.trace[0].aggregate, 1e-12 * std::abs(a.trace[0].aggregate));
    EXPECT_EQ(a.final_latent.values, b.final_latent.values);
  }
}

TEST(Strategies, UpdateCountsAcrossBudgets) {
  ToyStack s;
  Rng rng(23);
  std::uniform_int_distribution<int> len(1, 6);
  for (int trial = 0; trial < 8; ++trial) {
    const int m = len(rng);
    const long n = std::uniform_int_distribution<long>(m, 3 * m + 5)(rng);
    const auto answer = s.answer(m, trial);
    const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
    for (auto strategy : kAllStrategies) {
      long observed = 0;
      InversionOptions opts;
      opts.record_match = false;
      opts.observer = [&](const StepRecord&) { ++observed; };
      const auto r = run_inversion(t, config_for(strategy, LossKind::kMaxMargin, n), s.latent(trial), opts);
      const bool token = strategy == Strategy::kTmi || strategy == Strategy::kTmiC;
      const long expected = token ? m * (n / m) : n;
      EXPECT_EQ(observed, expected);
      EXPECT_EQ(r.updates, expected);
    }
  }
}

TEST(Strategies, LatentGradientMatchesFiniteDifferences) {
  ToyStack s;
  const auto anchor = toy_anchor(s);
  Rng rng(31);
  for (auto kind : kAllLosses) {
    for (int probe = 0; probe < 20; ++probe) {
      const int m = 1 + probe % 5;
      const auto answer = s.answer(m, probe);
      const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
      SequenceObjective obj(t, IdentityLoss{kind, 1.0, &anchor});
      const Vector w = s.latent(1000 + probe).values;
      std::vector<Real> weights(static_cast<std::size_t>(m), 0.0);
      weights[static_cast<std::size_t>(probe % m)] = 1.0;
      obj.evaluate(w);
      const Vector analytic = obj.gradient(weights);
      const auto f = [&](const Vector& z) {
        const auto e = obj.evaluate(z);
        return e.losses()[static_cast<std::size_t>(probe % m)];
      };
      Vector fd(w.size());
      const Real h = 1e-5;
      for (Index k = 0; k < w.size(); ++k) {
        Vector up = w, down = w;
        up[k] += h;
        down[k] -= h;
        fd[k] = (f(up) - f(down)) / (2 * h);
      }
      const Real rel = (analytic - fd).lpNorm<Eigen::Infinity>() / std::max(analytic.lpNorm<Eigen::Infinity>(), 1e-12);
      EXPECT_LT(rel, 1e-4) << to_string(kind) << " probe " << probe;
    }
  }
}

TEST(Strategies, NonFiniteLossAborts) {
  ToyStack s;
  const auto answer = s.answer(2);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  InversionOptions opts;
  int calls = 0;
  opts.prior = [&](const Vector&, Vector&) { return ++calls < 3 ? 0.0 : std::numeric_limits<Real>::quiet_NaN(); };
  try {
    run_smi(t, config_for(Strategy::kSmi, LossKind::kCrossEntropy, 10), s.latent(0), opts);
    FAIL();
  } catch (const InversionAborted& e) {
    EXPECT_EQ(e.record().step, 3);
    EXPECT_EQ(e.step(), 3);
  }
}

TEST(Strategies, EveryStrategyLossPairRuns) {
  ToyStack s;
  const auto anchor = toy_anchor(s);
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  InversionOptions opts;
  opts.anchor = &anchor;
  int cells = 0;
  for (auto strategy : kAllStrategies)
    for (auto loss : kAllLosses) {
      const auto r = run_inversion(t, config_for(strategy, loss, 7), s.latent(9), opts);
      EXPECT_EQ(r.config.strategy, strategy);
      EXPECT_TRUE(r.final_latent.finite());
      EXPECT_TRUE(r.image.in_range());
      EXPECT_FALSE(r.trace.empty());
      ++cells;
    }
  EXPECT_EQ(cells, 12);
}

TEST(Strategies, LogitMaxNeedsAnchor) {
  ToyStack s;
  const auto answer = s.answer(2);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  EXPECT_THROW(run_smi(t, config_for(Strategy::kSmi, LossKind::kLogitMax, 3), s.latent(0)), ContractViolation);
}

TEST(Strategies, BudgetBelowAnswerLengthIsConfigError) {
  ToyStack s;
  const auto answer = s.answer(4);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  EXPECT_THROW(run_tmi(t, config_for(Strategy::kTmi, LossKind::kCrossEntropy, 3), s.latent(0)), ConfigError);
  EXPECT_NO_THROW(run_smi(t, config_for(Strategy::kSmi, LossKind::kCrossEntropy, 3), s.latent(0)));
}

TEST(Strategies, VariantsAreDeterministic) {
  ToyStack s;
  const auto anchor = toy_anchor(s);
  const auto answer = s.answer(3);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  InversionOptions opts;
  opts.anchor = &anchor;
  auto c = config_for(Strategy::kSmiAw, LossKind::kLogitMax, 6);
  c.resample_anchor = true;
  c.free_running_confidence = true;
  c.momentum = 0.5;
  const auto a = run_inversion(t, c, s.latent(8), opts);
  const auto b = run_inversion(t, c, s.latent(8), opts);
  EXPECT_EQ(trace_csv_rows(a), trace_csv_rows(b));
  c.resample_anchor = false;
  EXPECT_NE(trace_csv_rows(run_inversion(t, c, s.latent(8), opts)), trace_csv_rows(a));
}

TEST(Trace, CsvShape) {
  ToyStack s;
  const auto answer = s.answer(2);
  const AttackTarget t{s.vlm, s.generator, s.prompt, answer};
  InversionOptions opts;
  opts.candidate_id = 5;
  const auto r = run_smi_aw(t, config_for(Strategy::kSmiAw, LossKind::kCrossEntropy, 4), s.latent(0), opts);
  std::istringstream rows(trace_csv_rows(r));
  int n = 0;
  for (std::string line; std::getline(rows, line); ++n) {
    EXPECT_EQ(line.rfind("5,", 0), 0u);
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
  }
  EXPECT_EQ(n, 4);
  EXPECT_EQ(trace_csv_header(), "candidate,step,sweep,token,aggregate,grad_norm,match,token_losses,token_probs,alpha\n");
}

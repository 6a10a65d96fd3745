#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "tailreg/errors.hpp"
#include "tailreg/random.hpp"
#include "tailreg/training.hpp"

using namespace tailreg;

namespace {

SyntheticDataset tiny_ds(bool clean = false) {
  auto cfg = dataset_preset("tiny");
  if (clean) {
    cfg.noise_sigma = 0.0;
    cfg.proposal_jitter_sigma = 0.0;
  }
  return generate(cfg);
}

TrainConfig quick(int epochs = 6) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_steps = 10;
  return c;
}

struct GradFixture {
  HeadBank bank;
  std::vector<std::vector<double>> features;
  std::vector<RegressionSample> batch;
};

GradFixture make_fixture(const std::string& variant, std::uint64_t seed) {
  const int C = 7, d = 5;
  Rng rng(seed);
  std::vector<int> map(C);
  std::iota(map.begin(), map.end(), 0);
  const auto spec = HeadSpec::parse(variant);
  if (spec.kind == HeadKind::Agnostic) map.assign(C, 0);
  if (spec.kind == HeadKind::Clustered) map = {0, 0, 0, 1, 1, 2, 2};
  if (spec.kind == HeadKind::Merged) map = {0, 1, 2, 3, 4, 4, 4};
  GradFixture fx;
  fx.bank = init_bank(spec, map, C, d, rng, 0.6);
  auto jitter_bias = [&](AffineHead& h) {
    for (int k = 0; k < 4; ++k) h.bias(k) = rng.normal(0.0, 0.5);
  };
  for (auto& h : fx.bank.heads) jitter_bias(h);
  if (fx.bank.agnostic) jitter_bias(*fx.bank.agnostic);

  const int n = 12;
  fx.features.resize(n);
  for (int i = 0; i < n; ++i) {
    fx.features[i].resize(d);
    for (auto& x : fx.features[i]) x = rng.normal();
  }
  for (int i = 0; i < n; ++i) {
    // Keep every residual coordinate away from the smooth-L1 kink.
    for (;;) {
      RegressionSample s{static_cast<int>(rng.below(C)), fx.features[i],
                         Delta{rng.normal(), rng.normal(), rng.normal(), rng.normal()}};
      const auto p = fx.bank.predict(s.class_id, s.feature).as_array();
      const auto t = s.target.as_array();
      bool near_kink = false;
      for (int k = 0; k < 4; ++k) near_kink |= std::abs(std::abs(p[k] - t[k]) - 1.0) < 1e-3;
      if (!near_kink) {
        fx.batch.push_back(s);
        break;
      }
    }
  }
  return fx;
}

double& param_ref(HeadBank& bank, int which, int r, int c) {
  AffineHead& h = which < bank.head_count() ? bank.heads[which] : *bank.agnostic;
  return c < bank.feature_dim ? h.weight(r, c) : h.bias(r);
}

double grad_ref(BankGradient& g, const HeadBank& bank, int which, int r, int c) {
  AffineHead& h = which < bank.head_count() ? g.heads[which] : *g.agnostic;
  return c < bank.feature_dim ? h.weight(r, c) : h.bias(r);
}

}  // namespace

TEST(SmoothL1, ValuesAndGradient) {
  EXPECT_DOUBLE_EQ(smooth_l1(Delta{0.5, 0, 0, 0}), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(Delta{2.0, 0, 0, 0}), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(Delta{-2.0, 0.5, 0, 0}), 1.625);
  EXPECT_DOUBLE_EQ(smooth_l1(Delta{0.5, 0, 0, 0}, 0.25), 0.375);
  const Delta g = smooth_l1_grad(Delta{0.5, -3, 2, 0});
  EXPECT_EQ(g, (Delta{0.5, -1, 1, 0}));
}

class GradientCheck : public ::testing::TestWithParam<const char*> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifference) {
  auto fx = make_fixture(GetParam(), 21);
  auto g = grad_head(fx.bank, fx.batch);
  const int blocks = fx.bank.head_count() + (fx.bank.agnostic ? 1 : 0);
  Rng pick(5);
  const double h = 1e-5;
  double worst = 0.0;
  for (int probe = 0; probe < 100; ++probe) {
    const int which = static_cast<int>(pick.below(blocks));
    const int r = static_cast<int>(pick.below(4));
    const int c = static_cast<int>(pick.below(fx.bank.feature_dim + 1));
    double& p = param_ref(fx.bank, which, r, c);
    const double saved = p;
    p = saved + h;
    const double up = regression_loss(fx.bank, fx.batch);
    p = saved - h;
    const double down = regression_loss(fx.bank, fx.batch);
    p = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grad_ref(g, fx.bank, which, r, c);
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3});
    worst = std::max(worst, rel);
  }
  EXPECT_LT(worst, 1e-5) << GetParam();
}

INSTANTIATE_TEST_SUITE_P(Variants, GradientCheck,
                         ::testing::Values("specific", "agnostic", "cab:0.35", "cluster:3:num", "merge:r"));

TEST(Gradient, CabRoutingAtEndpoints) {
  auto fx = make_fixture("cab:0", 2);
  auto g = grad_head(fx.bank, fx.batch);
  EXPECT_EQ(g.agnostic->weight.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.agnostic->bias.cwiseAbs().maxCoeff(), 0.0);
  fx.bank.spec.alpha = 1.0;
  g = grad_head(fx.bank, fx.batch);
  for (const auto& hg : g.heads) {
    EXPECT_EQ(hg.weight.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(hg.bias.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_GT(g.agnostic->weight.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradient, EmptyOrMismatchedBatchIsContractError) {
  auto fx = make_fixture("specific", 3);
  EXPECT_THROW(grad_head(fx.bank, std::span<const RegressionSample>{}), ContractError);
  std::vector<double> short_f(2);
  std::vector<RegressionSample> bad{{0, short_f, {}}};
  EXPECT_THROW(regression_loss(fx.bank, bad), ContractError);
}

TEST(Train, Cab0MatchesSpecificBitForBit) {
  const auto ds = tiny_ds();
  const auto a = train(ds, HeadSpec::parse("specific"), quick());
  const auto b = train(ds, HeadSpec::parse("cab:0"), quick());
  EXPECT_EQ(ledger_csv(a.ledger), ledger_csv(b.ledger));
  for (int c = 0; c < ds.num_classes(); ++c)
    EXPECT_EQ(a.bank.effective_weight(c).weight, b.bank.effective_weight(c).weight);
}

TEST(Train, FullySharedVariantsMatch) {
  const auto ds = tiny_ds();
  const auto ag = train(ds, HeadSpec::parse("agnostic"), quick());
  const auto cab1 = train(ds, HeadSpec::parse("cab:1"), quick());
  const auto merged = train(ds, HeadSpec::parse("merge:rcf"), quick());
  EXPECT_EQ(ledger_csv(ag.ledger), ledger_csv(cab1.ledger));
  EXPECT_EQ(ledger_csv(ag.ledger), ledger_csv(merged.ledger));
  EXPECT_EQ(ag.bank.heads[0].weight, merged.bank.heads[0].weight);
  EXPECT_EQ(ag.bank.heads[0].weight, cab1.bank.agnostic->weight);
}

TEST(Train, DeterministicDigests) {
  const auto ds = tiny_ds();
  const auto a = train(ds, HeadSpec::parse("cluster:2:scale"), quick());
  const auto b = train(ds, HeadSpec::parse("cluster:2:scale"), quick());
  EXPECT_EQ(a.ledger.weights_digest, b.ledger.weights_digest);
  EXPECT_EQ(ledger_csv(a.ledger), ledger_csv(b.ledger));
  auto other = quick();
  other.seed = 2;
  EXPECT_NE(train(ds, HeadSpec::parse("cluster:2:scale"), other).ledger.weights_digest, a.ledger.weights_digest);
}

TEST(Train, LedgerShapeAndGroupCurves) {
  const auto ds = tiny_ds();
  const auto r = train(ds, HeadSpec::parse("specific"), quick(4));
  EXPECT_EQ(r.ledger.epochs, 4);
  EXPECT_EQ(r.ledger.epoch_cls_loss.size(), 4u);
  const auto part = partition_by_frequency(ds);
  for (const auto& pt : group_curves(r.ledger)) {
    double sum = 0.0;
    int n = 0;
    for (const auto& e : r.ledger.entries)
      if (e.epoch == pt.epoch && e.split == pt.split && part.group[e.class_id] == pt.group) {
        sum += e.mean_reg_loss * e.n_samples;
        n += e.n_samples;
      }
    ASSERT_GT(n, 0);
    EXPECT_EQ(n, pt.n_samples);
    EXPECT_NEAR(pt.mean_reg_loss, sum / n, 1e-12);
  }
  for (const auto& e : r.ledger.entries) {
    EXPECT_GE(e.epoch, 1);
    EXPECT_LE(e.epoch, 4);
    EXPECT_TRUE(std::isfinite(e.mean_reg_loss));
  }
}

TEST(Train, LedgerCsvRoundTrip) {
  const auto r = train(tiny_ds(), HeadSpec::parse("merge:rc"), quick(3));
  const auto text = ledger_csv(r.ledger);
  const auto back = parse_ledger_csv(text);
  EXPECT_EQ(ledger_csv(back), text);
  EXPECT_EQ(back.entries.size(), r.ledger.entries.size());
  EXPECT_THROW(parse_ledger_csv("nope\n"), DataError);
}

TEST(Train, DivergenceNamesTheEpoch) {
  auto cfg = quick(20);
  cfg.learning_rate = 1e307;
  cfg.warmup_steps = 0;
  try {
    train(tiny_ds(), HeadSpec::parse("specific"), cfg);
    FAIL() << "expected divergence";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Train, BadConfigNamesTheField) {
  auto cfg = quick();
  cfg.epochs = 0;
  try {
    train(tiny_ds(), HeadSpec::parse("specific"), cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "epochs");
  }
}

TEST(Train, DegenerateDatasetReachesZeroLoss) {
  auto cfg = quick(40);
  cfg.mode = TrainMode::RegressionOnlyGt;
  const auto ds = tiny_ds(true);
  for (const char* v : {"specific", "agnostic", "cab:0.5"}) {
    const auto r = train(ds, HeadSpec::parse(v), cfg);
    EXPECT_LT(r.ledger.final_mean_loss(Split::Train), 1e-6) << v;
  }
}

TEST(Train, LossDoesNotRiseAfterWarmupOnCleanData) {
  auto cfg = quick(25);
  cfg.momentum = 0.0;
  const auto ds = tiny_ds(true);
  const auto r = train(ds, HeadSpec::parse("specific"), cfg);
  std::vector<double> per_epoch(cfg.epochs + 1, 0.0);
  std::vector<int> counts(cfg.epochs + 1, 0);
  for (const auto& e : r.ledger.entries)
    if (e.split == Split::Train) {
      per_epoch[e.epoch] += e.mean_reg_loss * e.n_samples;
      counts[e.epoch] += e.n_samples;
    }
  const int batches = static_cast<int>((ds.train.instances.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int first = cfg.warmup_steps / batches + 2;
  for (int ep = first + 1; ep <= cfg.epochs; ++ep)
    EXPECT_LE(per_epoch[ep] / counts[ep], per_epoch[ep - 1] / counts[ep - 1] * (1 + 1e-9)) << "epoch " << ep;
}

TEST(BiasRatio, RareOverFrequent) {
  TrainLedger l;
  l.epochs = 1;
  l.entries = {{1, 0, Group::Frequent, 1.0, 5, Split::Val},
               {1, 1, Group::Frequent, 3.0, 5, Split::Val},
               {1, 2, Group::Rare, 8.0, 1, Split::Val},
               {1, 2, Group::Rare, 100.0, 1, Split::Train}};
  const auto part = partition_by_counts({500, 500, 2});
  EXPECT_DOUBLE_EQ(*bias_ratio(l, part), 4.0);
  const auto no_rare = partition_by_counts({500, 500, 500});
  EXPECT_FALSE(bias_ratio(l, no_rare).has_value());
}

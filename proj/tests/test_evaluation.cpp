#include <gtest/gtest.h>

#include <numeric>

#include "tailreg/errors.hpp"
#include "tailreg/evaluation.hpp"
#include "tailreg/random.hpp"

using namespace tailreg;

namespace {

// Straight scan: sort, greedy-match, then for each recall point take the best
// precision among ranks reaching that recall.
std::vector<std::optional<double>> ap_oracle(const std::vector<Detection>& dets,
                                             const std::vector<GroundTruth>& gt, int C, double thr) {
  std::vector<std::optional<double>> out(C);
  for (int c = 0; c < C; ++c) {
    std::vector<std::size_t> g;
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (gt[i].class_id == c) g.push_back(i);
    if (g.empty()) continue;
    std::vector<Detection> d;
    for (const auto& x : dets)
      if (x.class_id == c) d.push_back(x);
    std::stable_sort(d.begin(), d.end(), [](auto& a, auto& b) { return a.score > b.score; });
    std::vector<bool> used(gt.size(), false);
    std::vector<double> prec, rec;
    int tp = 0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      int best = -1;
      double best_iou = -1;
      for (const auto gi : g) {
        if (used[gi] || gt[gi].image_id != d[k].image_id) continue;
        const double o = iou(d[k].box, gt[gi].box);
        if (o >= thr && o > best_iou) {
          best_iou = o;
          best = static_cast<int>(gi);
        }
      }
      if (best >= 0) {
        used[best] = true;
        ++tp;
      }
      prec.push_back(static_cast<double>(tp) / (k + 1));
      rec.push_back(static_cast<double>(tp) / g.size());
    }
    double sum = 0;
    for (int i = 0; i <= 100; ++i) {
      double m = 0;
      for (std::size_t k = 0; k < prec.size(); ++k)
        if (rec[k] >= i / 100.0) m = std::max(m, prec[k]);
      sum += m;
    }
    out[c] = sum / 101;
  }
  return out;
}

Box jitter(Rng& rng, const Box& b, double s) {
  return {b.x1 + rng.normal(0, s), b.y1 + rng.normal(0, s), b.x2 + rng.normal(0, s), b.y2 + rng.normal(0, s)};
}

SyntheticDataset clean_tiny() {
  auto cfg = dataset_preset("tiny");
  cfg.noise_sigma = 0.0;
  cfg.proposal_jitter_sigma = 0.0;
  return generate(cfg);
}

HeadBank zero_bank(const SyntheticDataset& ds, const char* variant = "specific") {
  Rng rng(1);
  std::vector<int> map(ds.num_classes());
  std::iota(map.begin(), map.end(), 0);
  auto bank = init_bank(HeadSpec::parse(variant), map, ds.num_classes(), ds.feature_dim(), rng, 0.0);
  bank.digest = weights_digest(bank);
  return bank;
}

}  // namespace

TEST(EvalConfig, Validation) {
  EvalConfig c;
  EXPECT_EQ(c.iou_thresholds.size(), 10u);
  EXPECT_DOUBLE_EQ(c.iou_thresholds.front(), 0.5);
  EXPECT_DOUBLE_EQ(c.iou_thresholds.back(), 0.95);
  c.iou_thresholds = {0.7, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
  c.iou_thresholds = {1.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.nms_threshold = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AveragePrecision, PerfectAndEmpty) {
  const std::vector<GroundTruth> gt{{0, 0, {0, 0, 10, 10}}, {1, 0, {5, 5, 20, 20}}, {1, 1, {0, 0, 4, 4}}};
  std::vector<Detection> dets;
  for (const auto& g : gt) dets.push_back({g.image_id, g.class_id, 0.9, g.box});
  const auto ap = average_precision(dets, gt, 3, 0.5);
  EXPECT_DOUBLE_EQ(*ap[0], 1.0);
  EXPECT_DOUBLE_EQ(*ap[1], 1.0);
  EXPECT_FALSE(ap[2].has_value());
  const auto none = average_precision({}, gt, 3, 0.5);
  EXPECT_DOUBLE_EQ(*none[0], 0.0);
}

TEST(AveragePrecision, HandRanking) {
  // One GT, a false positive ranked above the hit: precision 1/2 at recall 1.
  const std::vector<GroundTruth> gt{{0, 0, {0, 0, 10, 10}}};
  const std::vector<Detection> dets{{0, 0, 0.9, {50, 50, 60, 60}}, {0, 0, 0.8, {0, 0, 10, 10}}};
  EXPECT_DOUBLE_EQ(*average_precision(dets, gt, 1, 0.5)[0], 0.5);
  // Duplicate detection of the same GT counts as a false positive after it.
  const std::vector<Detection> dup{{0, 0, 0.9, {0, 0, 10, 10}}, {0, 0, 0.8, {0, 0, 10, 10}}};
  EXPECT_DOUBLE_EQ(*average_precision(dup, gt, 1, 0.5)[0], 1.0);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const int C = 3, images = 3;
    std::vector<GroundTruth> gt;
    std::vector<Detection> dets;
    const int ngt = 1 + static_cast<int>(rng.below(8));
    for (int i = 0; i < ngt; ++i) {
      const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
      gt.push_back({static_cast<int>(rng.below(images)), static_cast<int>(rng.below(C)),
                    {x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)}});
    }
    const int ndet = static_cast<int>(rng.below(14));
    for (int i = 0; i < ndet; ++i) {
      const auto& g = gt[rng.below(gt.size())];
      Box b = jitter(rng, g.box, 3.0);
      if (!b.valid()) b = g.box;
      const int cls = rng.uniform() < 0.8 ? g.class_id : static_cast<int>(rng.below(C));
      dets.push_back({g.image_id, cls, std::floor(rng.uniform() * 5) / 5, b});
    }
    const double thr = trial % 2 ? 0.5 : 0.75;
    const auto got = average_precision(dets, gt, C, thr);
    const auto want = ap_oracle(dets, gt, C, thr);
    for (int c = 0; c < C; ++c) {
      ASSERT_EQ(got[c].has_value(), want[c].has_value());
      if (got[c]) {
        EXPECT_NEAR(*got[c], *want[c], 1e-12) << "trial " << trial << " class " << c;
      }
    }
  }
}

TEST(AveragePrecision, NonIncreasingInThreshold) {
  Rng rng(8);
  std::vector<GroundTruth> gt;
  std::vector<Detection> dets;
  for (int i = 0; i < 30; ++i) {
    const double x = rng.uniform(0, 200), y = rng.uniform(0, 200);
    gt.push_back({i % 4, 0, {x, y, x + 20, y + 20}});
    dets.push_back({i % 4, 0, rng.uniform(), jitter(rng, gt.back().box, 2.5)});
  }
  double prev = 2.0;
  for (const double t : EvalConfig::default_iou_thresholds()) {
    const double ap = *average_precision(dets, gt, 1, t)[0];
    EXPECT_LE(ap, prev + 1e-15);
    prev = ap;
  }
}

TEST(Inference, UntrainedBankIsRejected) {
  const auto ds = clean_tiny();
  auto bank = zero_bank(ds);
  bank.digest.reset();
  EXPECT_THROW(run_inference(bank, LinearClassifier::zeros(ds.num_classes(), ds.feature_dim()), ds,
                             Split::Val, {}),
               ContractError);
}

TEST(Inference, HighScoreThresholdYieldsNothing) {
  const auto ds = clean_tiny();
  EvalConfig cfg;
  cfg.score_threshold = 1.1;
  const auto dets = run_inference(zero_bank(ds), LinearClassifier::zeros(ds.num_classes(), ds.feature_dim()),
                                  ds, Split::Val, cfg);
  EXPECT_TRUE(dets.empty());
}

TEST(Inference, OracleOnCleanDataReproducesGroundTruth) {
  const auto ds = clean_tiny();
  EvalConfig cfg;
  cfg.oracle_gt_class = true;
  const auto clf = LinearClassifier::zeros(ds.num_classes(), ds.feature_dim());
  const auto bank = zero_bank(ds);
  const auto dets = run_inference(bank, clf, ds, Split::Val, cfg);
  const auto gt = ground_truth(ds, Split::Val);
  ASSERT_EQ(dets.size(), gt.size());
  for (const auto& d : dets) {
    EXPECT_EQ(d.score, 1.0);
    bool found = false;
    for (const auto& g : gt)
      if (g.image_id == d.image_id && g.class_id == d.class_id && std::abs(g.box.x1 - d.box.x1) < 1e-6 &&
          std::abs(g.box.y1 - d.box.y1) < 1e-6 && std::abs(g.box.x2 - d.box.x2) < 1e-6 &&
          std::abs(g.box.y2 - d.box.y2) < 1e-6)
        found = true;
    EXPECT_TRUE(found);
  }
  const auto rep = report(bank, clf, ds, cfg, partition_by_frequency(ds));
  EXPECT_DOUBLE_EQ(rep.ap, 1.0);
  EXPECT_DOUBLE_EQ(rep.classification_accuracy, 1.0);
  EXPECT_TRUE(rep.oracle);
}

TEST(Report, GroupMeansRecompute) {
  auto cfg = dataset_preset("tiny");
  const auto ds = generate(cfg);
  Rng rng(2);
  std::vector<int> map(ds.num_classes());
  std::iota(map.begin(), map.end(), 0);
  auto bank = init_bank(HeadSpec::parse("specific"), map, ds.num_classes(), ds.feature_dim(), rng, 0.05);
  bank.digest = weights_digest(bank);
  auto clf = LinearClassifier::zeros(ds.num_classes(), ds.feature_dim());
  for (int r = 0; r < clf.weight.rows(); ++r)
    for (int c = 0; c < clf.weight.cols(); ++c) clf.weight(r, c) = rng.normal();
  const auto part = partition_by_frequency(ds);
  const auto rep = report(bank, clf, ds, {}, part, 1.5);
  EXPECT_EQ(rep.bias_ratio, 1.5);
  double total = 0;
  int n = 0;
  for (int c = 0; c < ds.num_classes(); ++c)
    if (rep.ap_per_class[c]) {
      total += *rep.ap_per_class[c];
      ++n;
    }
  EXPECT_NEAR(rep.ap, total / n, 1e-12);
  for (const Group g : {Group::Rare, Group::Common, Group::Frequent}) {
    double s = 0;
    int k = 0;
    for (const int c : part.members(g))
      if (rep.ap_per_class[c]) {
        s += *rep.ap_per_class[c];
        ++k;
      }
    if (k == 0)
      EXPECT_FALSE(rep.group_ap.at(g).has_value());
    else
      EXPECT_NEAR(*rep.group_ap.at(g), s / k, 1e-12);
  }
  double tmean = 0;
  for (const double a : rep.ap_per_threshold) tmean += a;
  EXPECT_NEAR(rep.ap, tmean / rep.ap_per_threshold.size(), 1e-12);
  EXPECT_GE(rep.classification_accuracy, 0.0);
  EXPECT_LE(rep.classification_accuracy, 1.0);
}

TEST(Report, TextFormatsRoundTrip) {
  const std::vector<Detection> dets{{0, 1, 0.25, {1.5, 2, 3, 4.125}}, {3, 0, 1.0 / 3, {0, 0, 1e-3, 7}}};
  const auto text = detections_text(dets);
  const auto back = parse_detections(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].score, 1.0 / 3);
  EXPECT_EQ(back[0].box, dets[0].box);
  EXPECT_EQ(detections_text(back), text);
  EXPECT_THROW(parse_detections("1 2 x\n"), DataError);

  const auto ds = clean_tiny();
  EvalConfig cfg;
  cfg.oracle_gt_class = true;
  const auto rep = report(zero_bank(ds), LinearClassifier::zeros(ds.num_classes(), ds.feature_dim()), ds, cfg,
                          partition_by_frequency(ds), 0.75);
  const auto json = report_json(rep);
  EXPECT_EQ(report_json(parse_report_json(json)), json);
  EXPECT_THROW(parse_report_json("{"), DataError);
  const auto row = report_csv_row("specific", rep);
  EXPECT_EQ(row.rfind("specific,100", 0), 0u) << row;
  EXPECT_EQ(report_csv_header(), "variant,AP,APr,APc,APf\n");
}

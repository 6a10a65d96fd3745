#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "tailreg/geometry.hpp"
#include "tailreg/random.hpp"

using namespace tailreg;

namespace {

Box random_box(Rng& rng, double extent = 100.0) {
  const double w = rng.uniform(1.0, 40.0);
  const double h = rng.uniform(1.0, 40.0);
  const double x = rng.uniform(0.0, extent);
  const double y = rng.uniform(0.0, extent);
  return {x, y, x + w, y + h};
}

// Kept set characterized as the unique fixed point: an index is kept iff no
// kept index earlier in visit order overlaps it above the threshold. Found by
// trying every subset.
std::vector<std::size_t> nms_by_subsets(const std::vector<ScoredBox>& d, double thr) {
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d[a].score > d[b].score; });
  std::vector<std::size_t> rank(n);
  for (std::size_t r = 0; r < n; ++r) rank[order[r]] = r;

  std::vector<std::vector<std::size_t>> fixed_points;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      bool suppressed = false;
      for (std::size_t j = 0; j < n; ++j)
        if ((mask >> j & 1u) && rank[j] < rank[i] && iou(d[i].box, d[j].box) > thr) suppressed = true;
      const bool kept = mask >> i & 1u;
      ok = kept == !suppressed;
    }
    if (ok) {
      std::vector<std::size_t> kept;
      for (std::size_t r = 0; r < n; ++r)
        if (mask >> order[r] & 1u) kept.push_back(order[r]);
      fixed_points.push_back(kept);
    }
  }
  EXPECT_EQ(fixed_points.size(), 1u);
  return fixed_points.empty() ? std::vector<std::size_t>{} : fixed_points.front();
}

}  // namespace

TEST(Iou, HandExamples) {
  const Box a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou(a, Box{5, 0, 15, 10}), 50.0 / 150.0, 1e-15);
  EXPECT_DOUBLE_EQ(iou(a, Box{10, 0, 20, 10}), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng, 30), b = random_box(rng, 30);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Iou, DegenerateBoxIsDomainError) {
  EXPECT_THROW(iou(Box{0, 0, 0, 10}, Box{0, 0, 1, 1}), std::domain_error);
  EXPECT_THROW(iou(Box{0, 0, 1, 1}, Box{0, 0, 1, NAN}), std::domain_error);
  EXPECT_THROW(encode_delta(Box{5, 5, 4, 6}, Box{0, 0, 1, 1}), std::domain_error);
}

TEST(Delta, EncodeHandExamples) {
  const Box p{0, 0, 10, 10};
  EXPECT_EQ(encode_delta(p, p), (Delta{0, 0, 0, 0}));
  const Delta d = encode_delta(p, Box{0, 0, 20, 10});
  EXPECT_DOUBLE_EQ(d.dx, 0.5);
  EXPECT_DOUBLE_EQ(d.dy, 0.0);
  EXPECT_DOUBLE_EQ(d.dw, std::log(2.0));
  EXPECT_DOUBLE_EQ(d.dh, 0.0);
}

TEST(Delta, DecodeHandExamples) {
  const Box p{0, 0, 10, 10};
  EXPECT_EQ(decode_delta(p, Delta{}), p);
  const Box b = decode_delta(p, Delta{0.5, 0, std::log(2.0), 0});
  EXPECT_NEAR(b.x1, 0.0, 1e-12);
  EXPECT_NEAR(b.y1, 0.0, 1e-12);
  EXPECT_NEAR(b.x2, 20.0, 1e-12);
  EXPECT_NEAR(b.y2, 10.0, 1e-12);
}

TEST(Delta, RoundTripTenThousandPairs) {
  Rng rng(11);
  double worst = 0.0;
  int tested = 0;
  while (tested < 10000) {
    const Box p = random_box(rng), t = random_box(rng);
    const Delta d = encode_delta(p, t);
    if (std::abs(d.dw) > kDefaultDeltaClamp || std::abs(d.dh) > kDefaultDeltaClamp) continue;
    const Box r = decode_delta(p, d);
    worst = std::max({worst, std::abs(r.x1 - t.x1), std::abs(r.y1 - t.y1), std::abs(r.x2 - t.x2),
                      std::abs(r.y2 - t.y2)});
    ++tested;
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Delta, ClampKeepsDecodeFinite) {
  const Box p{0, 0, 10, 10};
  const Box b = decode_delta(p, Delta{0, 0, 1e6, -1e6});
  EXPECT_TRUE(b.valid());
  EXPECT_NEAR(b.width(), 10.0 * std::exp(4.0), 1e-9);
  EXPECT_NEAR(b.height(), 10.0 * std::exp(-4.0), 1e-9);
}

TEST(Delta, ClipToImage) {
  const Box p{90, 90, 100, 100};
  const Box b = decode_delta(p, Delta{0.5, 0.5, 0, 0}, kDefaultDeltaClamp, ImageExtent{100, 100});
  EXPECT_TRUE(b.valid());
  EXPECT_LE(b.x2, 100.0);
  EXPECT_LE(b.y2, 100.0);
  EXPECT_DOUBLE_EQ(b.x1, 95.0);
}

TEST(Nms, SpecExamples) {
  EXPECT_TRUE(nms({}, 0.5).empty());
  const std::vector<ScoredBox> one{{{0, 0, 1, 1}, 0.3}};
  EXPECT_EQ(nms(one, 0.5), (std::vector<std::size_t>{0}));
  const std::vector<ScoredBox> twins{{{0, 0, 10, 10}, 0.8}, {{0, 0, 10, 10}, 0.9}};
  EXPECT_EQ(nms(twins, 0.5), (std::vector<std::size_t>{1}));
}

TEST(Nms, EqualScoresBreakTiesByIndex) {
  const std::vector<ScoredBox> d{{{0, 0, 10, 10}, 0.5}, {{1, 0, 11, 10}, 0.5}, {{0, 1, 10, 11}, 0.5}};
  EXPECT_EQ(nms(d, 0.5), (std::vector<std::size_t>{0}));
}

TEST(Nms, RejectsBadInput) {
  const std::vector<ScoredBox> d{{{0, 0, 1, 1}, NAN}};
  EXPECT_THROW(nms(d, 0.5), std::invalid_argument);
  const std::vector<ScoredBox> ok{{{0, 0, 1, 1}, 1.0}};
  EXPECT_THROW(nms(ok, 0.0), std::invalid_argument);
  EXPECT_THROW(nms(ok, 1.0), std::invalid_argument);
}

TEST(Nms, MatchesSubsetOracleUpToEightBoxes) {
  Rng rng(5);
  for (int trial = 0; trial < 600; ++trial) {
    const std::size_t n = 1 + trial % 8;
    std::vector<ScoredBox> d;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores so ties occur.
      d.push_back({random_box(rng, 25), std::floor(rng.uniform() * 4) / 4});
    }
    const double thr = 0.1 + 0.8 * rng.uniform();
    EXPECT_EQ(nms(d, thr), nms_by_subsets(d, thr)) << "trial " << trial;
  }
}

// Greedy NMS is not monotone in the threshold: a box that survives at the
// lower threshold can be suppressed at the higher one by a box that the lower
// threshold removed.
TEST(Nms, ThresholdMonotonicityCounterexample) {
  const std::vector<ScoredBox> d{
      {{0, 0, 10, 10}, 0.9},     // A
      {{2.5, 0, 12.5, 10}, 0.8}, // B: IoU(A,B) = 0.6
      {{3.61, 0, 13.61, 10}, 0.7}, // C: IoU(B,C) ~ 0.8, IoU(A,C) ~ 0.47
  };
  const auto low = nms(d, 0.5);
  const auto high = nms(d, 0.7);
  EXPECT_EQ(low, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(high, (std::vector<std::size_t>{0, 1}));
}

TEST(Nms, DroppedWhenThresholdRisesOnlyViaNewlyKeptBox) {
  Rng rng(17);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 2 + trial % 7;
    std::vector<ScoredBox> d;
    for (std::size_t i = 0; i < n; ++i) d.push_back({random_box(rng, 20), rng.uniform()});
    const double t1 = 0.1 + 0.4 * rng.uniform();
    const double t2 = t1 + 0.4 * rng.uniform() + 1e-3;
    const auto k1 = nms(d, t1), k2 = nms(d, t2);
    auto in = [](const std::vector<std::size_t>& v, std::size_t i) {
      return std::find(v.begin(), v.end(), i) != v.end();
    };
    for (const auto i : k1) {
      if (in(k2, i)) continue;
      bool explained = false;
      for (const auto j : k2)
        if (!in(k1, j) && d[j].score >= d[i].score && iou(d[i].box, d[j].box) > t2) explained = true;
      EXPECT_TRUE(explained) << "trial " << trial << " index " << i;
    }
  }
}

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "tailreg/dataset.hpp"
#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"

using namespace tailreg;

namespace {

std::string field_of(const DatasetConfig& cfg) {
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

SyntheticDataset tiny(std::uint64_t seed = 7) {
  auto cfg = dataset_preset("tiny");
  cfg.seed = seed;
  return generate(cfg);
}

}  // namespace

TEST(DatasetConfig, ErrorsNameTheField) {
  DatasetConfig c;
  EXPECT_EQ(field_of(c), "");
  c.num_classes = 2;
  EXPECT_EQ(field_of(c), "num_classes");
  c = {};
  c.feature_dim = 3;
  EXPECT_EQ(field_of(c), "feature_dim");
  c = {};
  c.noise_sigma = -0.1;
  EXPECT_EQ(field_of(c), "noise_sigma");
  c = {};
  c.shared_map_weight = 1.5;
  EXPECT_EQ(field_of(c), "shared_map_weight");
  c = {};
  c.scale_means = {10.0, 20.0};
  EXPECT_EQ(field_of(c), "scale_means");
  c = {};
  c.frequency_exponent = 0.0;
  EXPECT_EQ(field_of(c), "frequency_exponent");
  EXPECT_THROW(dataset_preset("nope"), ConfigError);
}

TEST(Generate, SameSeedSameBytes) {
  const auto a = serialize(generate(dataset_preset("lt60")));
  const auto b = serialize(generate(dataset_preset("lt60")));
  EXPECT_EQ(sha256_hex(a), sha256_hex(b));
  auto other = dataset_preset("lt60");
  other.seed = 8;
  EXPECT_NE(sha256_hex(serialize(generate(other))), sha256_hex(a));
}

TEST(Generate, TrainImageCountsNonIncreasingInRank) {
  for (const double exponent : {1.2, 1.5}) {
    auto cfg = dataset_preset("lt60");
    cfg.frequency_exponent = exponent;
    const auto counts = image_counts(generate(cfg), Split::Train);
    ASSERT_EQ(counts.size(), 60u);
    EXPECT_GE(counts.front(), counts.back());
    for (std::size_t r = 1; r < counts.size(); ++r) EXPECT_LE(counts[r], counts[r - 1]) << "rank " << r;
  }
}

TEST(Generate, Lt60HasAtLeastTenClassesPerGroup) {
  const auto part = partition_by_frequency(generate(dataset_preset("lt60")));
  EXPECT_GE(part.members(Group::Rare).size(), 10u);
  EXPECT_GE(part.members(Group::Common).size(), 10u);
  EXPECT_GE(part.members(Group::Frequent).size(), 10u);
}

TEST(Generate, InstanceInvariants) {
  const auto ds = tiny();
  for (const Split s : {Split::Train, Split::Val})
    for (const auto& inst : ds.split(s).instances) {
      ASSERT_GE(inst.class_id, 0);
      ASSERT_LT(inst.class_id, ds.num_classes());
      ASSERT_EQ(inst.feature.size(), static_cast<std::size_t>(ds.feature_dim()));
      ASSERT_TRUE(inst.target_delta.finite());
      ASSERT_TRUE(inst.gt_box.valid());
      ASSERT_TRUE(inst.proposal_box.valid());
      const Delta d = encode_delta(inst.proposal_box, inst.gt_box);
      ASSERT_EQ(d, inst.target_delta);
    }
}

TEST(Generate, ZeroNoiseZeroJitterGivesZeroTargetsAndConstantFeatures) {
  const auto ds = generate(dataset_preset("lt60-clean"));
  std::vector<const std::vector<double>*> first(60, nullptr);
  for (const Split s : {Split::Train, Split::Val})
    for (const auto& inst : ds.split(s).instances) {
      ASSERT_EQ(inst.target_delta, (Delta{0, 0, 0, 0}));
      auto& f = first[inst.class_id];
      if (!f)
        f = &inst.feature;
      else
        ASSERT_EQ(*f, inst.feature);
    }
}

// With noise 0 and a fully shared map, one linear map recovers every target.
TEST(Generate, SharedNoiseFreeFeaturesAreLinearlyIdentifiable) {
  auto cfg = dataset_preset("lt60");
  cfg.noise_sigma = 0.0;
  cfg.shared_map_weight = 1.0;
  const auto ds = generate(cfg);
  const auto& inst = ds.train.instances;
  const int n = static_cast<int>(inst.size()), d = ds.feature_dim();
  Eigen::MatrixXd X(n, d), T(n, 4);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = inst[i].feature[j];
    const auto t = inst[i].target_delta.as_array();
    for (int j = 0; j < 4; ++j) T(i, j) = t[j];
  }
  const Eigen::MatrixXd A = X.colPivHouseholderQr().solve(T);
  const double worst = (X * A - T).cwiseAbs().maxCoeff();
  EXPECT_LT(worst, 1e-8);
}

TEST(Partition, BoundarySemantics) {
  const auto p = partition_by_counts({5, 10, 11, 100, 101, 0});
  EXPECT_EQ(p.group, (std::vector<Group>{Group::Rare, Group::Rare, Group::Common, Group::Common,
                                         Group::Frequent, Group::Rare}));
  const auto ones = partition_by_counts(std::vector<int>(8, 1));
  EXPECT_EQ(ones.members(Group::Rare).size(), 8u);
}

TEST(Partition, CoversEveryClassOnce) {
  const auto ds = generate(dataset_preset("lt60"));
  const auto p = partition_by_frequency(ds);
  EXPECT_EQ(p.members(Group::Rare).size() + p.members(Group::Common).size() +
                p.members(Group::Frequent).size(),
            60u);
  const auto counts = image_counts(ds, Split::Train);
  EXPECT_EQ(p.image_counts, counts);
  const auto shifted = partition_by_frequency(ds, {}, Split::Val);
  EXPECT_EQ(shifted.image_counts, image_counts(ds, Split::Val));
}

TEST(Partition, ImageCountsCountDistinctImages) {
  SyntheticDataset ds;
  ds.config.num_classes = 3;
  ds.train.num_images = 2;
  for (const int img : {0, 0, 1}) ds.train.instances.push_back({img, 1, {0, 0, 1, 1}, {0, 0, 1, 1}, {}, {}});
  EXPECT_EQ(image_counts(ds, Split::Train), (std::vector<int>{0, 2, 0}));
}

TEST(ScaleReport, HandCases) {
  SyntheticDataset ds;
  ds.config.num_classes = 3;
  ds.train.instances.push_back({0, 0, {0, 0, 10, 10}, {0, 0, 10, 10}, {}, {}});
  ds.train.instances.push_back({0, 1, {0, 0, 4, 9}, {0, 0, 4, 9}, {}, {}});
  ds.val = ds.train;
  const auto rows = class_scale_report(ds);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(*rows[0].train_mean, 10.0);
  EXPECT_DOUBLE_EQ(*rows[1].train_mean, 6.0);
  EXPECT_DOUBLE_EQ(*rows[0].delta, 0.0);
  EXPECT_DOUBLE_EQ(*rows[1].delta, 0.0);
  EXPECT_FALSE(rows[2].train_mean.has_value());
  EXPECT_FALSE(rows[2].delta.has_value());

  ds.val.instances[0].gt_box = {0, 0, 12, 12};
  EXPECT_DOUBLE_EQ(*class_scale_report(ds)[0].delta, 2.0);
}

TEST(ScaleReport, ShiftGrowsTowardTheTail) {
  DatasetConfig cfg;
  cfg.num_classes = 6;
  cfg.train_images = 400;
  cfg.val_images = 400;
  cfg.min_val_images = 400;
  cfg.head_images = 400;
  cfg.frequency_exponent = 0.3;
  cfg.scale_means = std::vector<double>(6, 40.0);
  cfg.feature_dim = 8;
  const auto rows = class_scale_report(generate(cfg));
  EXPECT_NEAR(*rows[5].delta, cfg.scale_shift_rare, 1.5);
  EXPECT_NEAR(*rows[0].delta, 0.0, 1.5);
  EXPECT_GT(std::abs(*rows[5].delta), std::abs(*rows[0].delta));
}

TEST(Serialization, RoundTripIsByteExact) {
  const auto ds = tiny();
  const auto text = serialize(ds);
  const auto back = deserialize(text);
  EXPECT_EQ(back.config, ds.config);
  EXPECT_EQ(serialize(back), text);
  EXPECT_EQ(back.train.instances.size(), ds.train.instances.size());
  EXPECT_EQ(back.val.instances[3].feature, ds.val.instances[3].feature);
}

TEST(Serialization, TamperingIsDetected) {
  auto text = serialize(tiny());
  const auto pos = text.find("\"feature\"", text.find('\n'));
  ASSERT_NE(pos, std::string::npos);
  const auto digit = text.find_first_of("123456789", pos);
  text[digit] = text[digit] == '1' ? '2' : '1';
  EXPECT_THROW(deserialize(text), DataError);
  EXPECT_THROW(deserialize("not json"), DataError);
}

TEST(Serialization, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "tailreg_dataset_test.jsonl";
  const auto ds = tiny(3);
  save_dataset(ds, path);
  EXPECT_EQ(serialize(load_dataset(path)), serialize(ds));
  std::filesystem::remove(path);
  EXPECT_THROW(load_dataset(path), DataError);
}

TEST(ClassStats, CountsAndScales) {
  const auto ds = tiny();
  const auto st = class_stats(ds);
  int total = 0;
  for (const int n : st.instance_count) total += n;
  EXPECT_EQ(total, static_cast<int>(ds.train.instances.size()));
  for (const double s : st.mean_scale) EXPECT_GT(s, 0.0);
}

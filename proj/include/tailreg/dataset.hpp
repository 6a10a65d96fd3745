#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tailreg/geometry.hpp"

namespace tailreg {

enum class Split { Train, Val };

std::string_view to_string(Split s);

/// Parameters of the synthetic long-tailed benchmark.
///
/// Class r (0-based frequency rank, which is also its class id) appears in
/// round(head_images * (r + 1)^-frequency_exponent) train images, capped to
/// [1, train_images]. Val image counts are the train counts scaled by
/// val_images / train_images, floored at min_val_images.
///
/// Each instance's feature follows f = M_c t + b_c + eps where t is the
/// target delta, M_c = w M_0 + (1 - w) P_c with w = shared_map_weight, and
/// b_c is a class code orthogonal to the column space of M_0.
struct DatasetConfig {
  int num_classes = 60;
  int train_images = 2000;
  int val_images = 500;
  /// Floor on the val image count of every class.
  int min_val_images = 5;
  double frequency_exponent = 1.5;
  double head_images = 3400.0;
  /// Per-class mean object side length in pixels; generated log-uniformly in
  /// [scale_min, scale_max] when empty.
  std::vector<double> scale_means;
  double scale_min = 24.0;
  double scale_max = 128.0;
  /// Val-split mean-scale offset, applied with weight rank / (C - 1).
  double scale_shift_rare = 8.0;
  int feature_dim = 16;
  double shared_map_weight = 0.85;
  double noise_sigma = 0.05;
  /// Relative to the GT box size.
  double proposal_jitter_sigma = 0.15;
  double class_code_sigma = 1.0;
  double extra_instance_prob = 0.25;
  double image_width = 512.0;
  double image_height = 512.0;
  std::uint64_t seed = 7;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Named benchmark presets: "lt60" (default benchmark), "lt60-clean" (lt60
/// without noise or proposal jitter) and "tiny" (C = 6, for quick tests).
DatasetConfig dataset_preset(std::string_view name);

struct Instance {
  int image_id = 0;
  int class_id = 0;
  Box gt_box;
  Box proposal_box;
  std::vector<double> feature;
  Delta target_delta;
};

struct SplitData {
  int num_images = 0;
  std::vector<Instance> instances;
};

struct SyntheticDataset {
  DatasetConfig config;
  SplitData train;
  SplitData val;

  const SplitData& split(Split s) const { return s == Split::Train ? train : val; }
  int num_classes() const { return config.num_classes; }
  int feature_dim() const { return config.feature_dim; }
  ImageExtent image_extent() const { return {config.image_width, config.image_height}; }
};

SyntheticDataset generate(const DatasetConfig& config);

/// Versioned line-delimited JSON: a header record (format, version, config
/// echo, body digest) followed by one record per instance.
std::string serialize(const SyntheticDataset& ds);
SyntheticDataset deserialize(std::string_view text);
void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path);
SyntheticDataset load_dataset(const std::filesystem::path& path);

enum class Group { Rare, Common, Frequent };

std::string_view to_string(Group g);
Group group_from_string(std::string_view s);

struct FrequencyThresholds {
  int rare_max = 10;     // [0, rare_max] images -> rare
  int common_max = 100;  // (rare_max, common_max] -> common, above -> frequent

  friend bool operator==(const FrequencyThresholds&, const FrequencyThresholds&) = default;
};

struct FrequencyPartition {
  std::vector<Group> group;
  std::vector<int> image_counts;
  FrequencyThresholds thresholds;

  int num_classes() const { return static_cast<int>(group.size()); }
  std::vector<int> members(Group g) const;
};

/// Number of distinct images of a split that contain each class.
std::vector<int> image_counts(const SyntheticDataset& ds, Split split);

FrequencyPartition partition_by_counts(const std::vector<int>& counts,
                                       const FrequencyThresholds& thresholds = {});
/// Train-split partition by default; Split::Val gives the shifted partition.
FrequencyPartition partition_by_frequency(const SyntheticDataset& ds,
                                          const FrequencyThresholds& thresholds = {},
                                          Split split = Split::Train);

struct ClassScaleRow {
  int class_id = 0;
  std::optional<double> train_mean;
  std::optional<double> val_mean;
  /// -(train - val); absent when either side is absent.
  std::optional<double> delta;
};

/// Mean sqrt(box area) per class per split.
std::vector<ClassScaleRow> class_scale_report(const SyntheticDataset& ds);

/// Per-class train statistics used as clustering keys.
struct ClassStats {
  std::vector<int> instance_count;
  std::vector<double> mean_scale;
};

ClassStats class_stats(const SyntheticDataset& ds, Split split = Split::Train);

}  // namespace tailreg

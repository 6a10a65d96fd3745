#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tailreg/dataset.hpp"
#include "tailreg/geometry.hpp"
#include "tailreg/heads.hpp"

namespace tailreg {

struct EvalConfig {
  /// Ascending, each in (0, 1). Default 0.50:0.05:0.95.
  std::vector<double> iou_thresholds = default_iou_thresholds();
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  int max_detections_per_image = 100;
  /// Replace predicted labels by GT labels (score 1.0) before NMS.
  bool oracle_gt_class = false;
  double delta_clamp = kDefaultDeltaClamp;

  static std::vector<double> default_iou_thresholds();
  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct Detection {
  int image_id = 0;
  int class_id = 0;
  double score = 0.0;
  Box box;
};

struct GroundTruth {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

std::vector<GroundTruth> ground_truth(const SyntheticDataset& ds, Split split);

/// Classify (or take the GT label in oracle mode), regress with the class's
/// effective head, decode and clip, per-class NMS, then keep the top-k by
/// score per image. Throws ContractError for a bank without a digest.
std::vector<Detection> run_inference(const HeadBank& bank, const LinearClassifier& classifier,
                                     const SyntheticDataset& ds, Split split,
                                     const EvalConfig& cfg);

/// COCO-style AP per class at one IoU threshold.
///
/// Detections of a class are visited by descending score (ties in input
/// order); each claims the highest-IoU unmatched GT box of its image and
/// class with IoU >= threshold. AP is the mean interpolated precision at the
/// 101 recall points 0, 0.01, ..., 1. Classes without GT yield nullopt.
std::vector<std::optional<double>> average_precision(std::span<const Detection> detections,
                                                     std::span<const GroundTruth> gt,
                                                     int num_classes, double iou_threshold);

struct EvalReport {
  bool oracle = false;
  std::vector<double> iou_thresholds;
  /// Class-mean AP at each threshold.
  std::vector<double> ap_per_threshold;
  /// Threshold-mean AP per class; nullopt for classes with zero GT.
  std::vector<std::optional<double>> ap_per_class;
  std::vector<int> excluded_classes;
  double ap = 0.0;
  std::map<Group, std::optional<double>> group_ap;
  std::optional<double> bias_ratio;
  int num_detections = 0;
  int num_gt = 0;
  /// Top-1 label accuracy over proposals (1.0 by construction in oracle mode).
  double classification_accuracy = 0.0;
};

EvalReport report(const HeadBank& bank, const LinearClassifier& classifier,
                  const SyntheticDataset& ds, const EvalConfig& cfg,
                  const FrequencyPartition& partition,
                  std::optional<double> bias_ratio = std::nullopt);

/// Same, from precomputed detections on the val split.
EvalReport report_from_detections(std::span<const Detection> detections,
                                  const SyntheticDataset& ds, const EvalConfig& cfg,
                                  const FrequencyPartition& partition,
                                  double classification_accuracy,
                                  std::optional<double> bias_ratio = std::nullopt);

/// One line per detection: image_id class_id score x1 y1 x2 y2.
std::string detections_text(std::span<const Detection> detections);
std::vector<Detection> parse_detections(std::string_view text);

/// Values stay in [0, 1] in JSON; the CSV row scales by 100.
std::string report_json(const EvalReport& r);
EvalReport parse_report_json(std::string_view text);
std::string report_csv_header();
std::string report_csv_row(std::string_view variant, const EvalReport& r);

}  // namespace tailreg

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tailreg/experiment.hpp"

namespace tailreg {

/// One polyline point of a group loss curve.
struct CurveRow {
  std::string variant;
  Split split = Split::Train;
  Group group = Group::Rare;
  int epoch = 0;
  /// Seed mean of the sample-weighted group loss.
  double loss = 0.0;
};

/// Per-class seed-mean final val loss for a "before" and an "after" variant,
/// sorted by descending before-loss (ties by class id).
struct ClassLossRow {
  int class_id = 0;
  Group group = Group::Rare;
  std::optional<double> before;
  std::optional<double> after;
};

/// Seed-mean AP at one IoU threshold, for the before and after variants.
struct ThresholdRow {
  double iou = 0.0;
  double before = 0.0;
  double after = 0.0;
  double delta() const { return after - before; }
};

struct PlotTables {
  std::string before_variant;
  std::string after_variant;
  std::vector<CurveRow> curves;
  std::vector<ClassLossRow> class_losses;
  std::vector<ThresholdRow> thresholds;
};

/// "before" is specific when present, otherwise the first variant. "after"
/// is the cab variant with alpha nearest 0.5 when one exists, otherwise the
/// last variant. Group membership comes from the ledger.
PlotTables plot_tables(const SweepResult& result);

std::string curves_csv(const PlotTables& t);
std::string class_losses_csv(const PlotTables& t);
std::string thresholds_csv(const PlotTables& t);

std::string curves_svg(const PlotTables& t);
std::string class_losses_svg(const PlotTables& t);
std::string thresholds_svg(const PlotTables& t);

/// Writes group_loss_curves, class_loss_before_after and ap_by_iou, each as
/// .csv and .svg. Returns the written paths.
std::vector<std::filesystem::path> emit_plots(const SweepResult& result,
                                              const std::filesystem::path& dir);

}  // namespace tailreg

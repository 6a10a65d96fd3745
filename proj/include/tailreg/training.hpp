#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tailreg/dataset.hpp"
#include "tailreg/heads.hpp"

namespace tailreg {

enum class TrainMode {
  Joint,             // classifier and regression heads trained together
  RegressionOnlyGt,  // classifier frozen; heads selected by GT class
};

std::string_view to_string(TrainMode m);
TrainMode train_mode_from_string(std::string_view s);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.02;
  int warmup_steps = 100;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::Joint;
  double lambda_cls = 1.0;
  double lambda_reg = 1.0;
  double smooth_l1_beta = 1.0;
  double init_sigma = 0.01;
  FrequencyThresholds thresholds;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Sum over the four coordinates of 0.5 x^2 / beta (|x| < beta) or |x| - 0.5 beta.
double smooth_l1(const Delta& residual, double beta = 1.0);
/// Derivative of smooth_l1 with respect to each residual coordinate.
Delta smooth_l1_grad(const Delta& residual, double beta = 1.0);

struct RegressionSample {
  int class_id = 0;
  std::span<const double> feature;
  Delta target;
};

/// Gradient of the mean batch loss, shaped like the bank it was taken from.
struct BankGradient {
  std::vector<AffineHead> heads;
  std::optional<AffineHead> agnostic;

  static BankGradient zeros_like(const HeadBank& bank);
};

/// Mean smooth-L1 regression loss of the bank over a batch.
double regression_loss(const HeadBank& bank, std::span<const RegressionSample> batch,
                       double beta = 1.0);

/// Analytic gradient of regression_loss. Each sample contributes only to the
/// head its class maps to; for cab banks the contribution is split alpha to
/// W_0 and (1 - alpha) to W_i.
BankGradient grad_head(const HeadBank& bank, std::span<const RegressionSample> batch,
                       double beta = 1.0);

struct LedgerEntry {
  int epoch = 0;
  int class_id = 0;
  Group group = Group::Rare;
  double mean_reg_loss = 0.0;
  int n_samples = 0;
  Split split = Split::Train;
};

/// Per-epoch, per-class regression losses on both splits, evaluated after
/// each epoch's updates. Classes absent from a split have no entry.
struct TrainLedger {
  int epochs = 0;
  std::vector<LedgerEntry> entries;
  /// Mean train cross-entropy per epoch (zero in RegressionOnlyGt mode).
  std::vector<double> epoch_cls_loss;
  std::string weights_digest;

  /// Per-class final-epoch loss; nullopt where the class has no samples.
  std::vector<std::optional<double>> final_losses(Split split, int num_classes) const;
  /// Sample-weighted mean loss over every class at the final epoch.
  double final_mean_loss(Split split) const;
};

struct GroupCurvePoint {
  int epoch = 0;
  Split split = Split::Train;
  Group group = Group::Rare;
  double mean_reg_loss = 0.0;
  int n_samples = 0;
};

/// Sample-weighted group aggregates of the per-class entries.
std::vector<GroupCurvePoint> group_curves(const TrainLedger& ledger);

/// CSV with header epoch,class_id,group,mean_reg_loss,n_samples,split.
std::string ledger_csv(const TrainLedger& ledger);
TrainLedger parse_ledger_csv(std::string_view csv);

struct TrainResult {
  HeadBank bank;
  LinearClassifier classifier;
  TrainLedger ledger;
};

/// SGD with momentum and linear warmup over the train split.
///
/// The init stream (seeded by config.seed) draws the classifier first, then
/// the bank slots (see init_bank); the shuffle stream is independent. Throws
/// DataError naming the epoch if the mean train loss becomes non-finite.
TrainResult train(const SyntheticDataset& ds, const HeadSpec& spec, const TrainConfig& config);

/// Rare-over-frequent ratio of class-mean final-epoch val regression loss.
/// nullopt when either group has no classes with val samples.
std::optional<double> bias_ratio(const TrainLedger& ledger, const FrequencyPartition& partition);

}  // namespace tailreg

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tailreg/dataset.hpp"
#include "tailreg/evaluation.hpp"
#include "tailreg/heads.hpp"
#include "tailreg/kvconfig.hpp"
#include "tailreg/training.hpp"

namespace tailreg {

/// How predicted proposals get their class label at evaluation time.
enum class Protocol {
  Predicted,  // classifier argmax / score threshold
  GtOracle,   // ground-truth label, score 1.0
};

std::string_view to_string(Protocol p);
Protocol protocol_from_string(std::string_view s);

/// A sweep over head variants and seeds. Each seed drives both the dataset
/// generator and the training streams of its cells.
struct ExperimentSpec {
  std::string name = "custom";
  std::string dataset_preset = "lt60";
  DatasetConfig dataset;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<HeadSpec> variants;
  std::vector<Protocol> protocols{Protocol::Predicted};
  TrainConfig train;
  EvalConfig eval;
  std::filesystem::path out_dir;

  /// Throws ConfigError on an empty seed, variant or protocol list, or when a
  /// nested config is invalid.
  void validate() const;
};

/// table1 (specific vs agnostic, with and without GT labels), table3a (cab
/// alpha grid), table3b (clustering), table3c (merging).
ExperimentSpec experiment_preset(std::string_view name);
std::vector<std::string> experiment_preset_names();

/// Reads sweep.* / dataset.* / train.* / eval.* keys over the defaults (or
/// over the preset named by sweep.preset).
ExperimentSpec experiment_from_config(const KeyValueConfig& kv);
/// Fully-resolved echo; per-cell seeds are listed in sweep.seeds.
KeyValueConfig echo_experiment(const ExperimentSpec& spec);

struct CellResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::map<Protocol, EvalReport> reports;
  TrainLedger ledger;
  std::string ledger_digest;
  std::string weights_digest;
  std::optional<double> bias_ratio;
  std::filesystem::path dir;
  bool skipped = false;
};

struct MetricSummary {
  int n = 0;
  double mean = 0.0;
  /// Sample standard deviation (n - 1 denominator); 0 when n < 2.
  double stddev = 0.0;
};

MetricSummary summarize(const std::vector<double>& values);

/// Summary metric names, in column order.
inline constexpr std::string_view kSummaryMetrics[] = {"AP", "APr", "APc", "APf", "bias_ratio"};

/// Metric value of one cell report; nullopt where the group has no classes.
std::optional<double> metric_value(const CellResult& cell, Protocol p, std::string_view metric);

struct VariantSummary {
  std::string variant;
  Protocol protocol = Protocol::Predicted;
  std::map<std::string, MetricSummary, std::less<>> metrics;
};

struct SweepResult {
  ExperimentSpec spec;
  std::vector<CellResult> cells;
  std::vector<VariantSummary> summaries;
  int trained = 0;
  int skipped = 0;

  const CellResult& cell(std::string_view variant, std::uint64_t seed) const;
  const VariantSummary& summary(std::string_view variant, Protocol p) const;
};

/// Run generate -> train -> evaluate for every (variant, seed) cell.
///
/// Layout under spec.out_dir:
///   config.txt                          resolved experiment config
///   dataset/<seed>/dataset.jsonl
///   <variant>/<seed>/                   config.txt bank.txt classifier.txt ledger.csv
///                                       detections*.txt report*.json manifest.json
///   cells.csv summary.csv table.csv
/// A cell whose manifest digests verify and whose config is unchanged is
/// loaded instead of retrained.
SweepResult run_experiment(const ExperimentSpec& spec, std::ostream* log = nullptr);

/// Rebuild a SweepResult from a finished output directory.
SweepResult load_experiment(const std::filesystem::path& dir);

/// SHA-256 over cells.csv and summary.csv text.
std::string result_digest(const SweepResult& result);

std::string cells_csv(const SweepResult& result);
std::string summary_csv(const SweepResult& result);
/// Mean values x100, one row per (variant, protocol); GT-oracle rows carry a
/// "+gt" suffix on the variant label.
std::string table_csv(const SweepResult& result);

/// Artifact manifest: digests of the files in one directory.
struct Manifest {
  std::map<std::string, std::string> files;

  static Manifest build(const std::filesystem::path& dir, const std::vector<std::string>& names);
  std::string json() const;
  static Manifest parse(std::string_view text);
  /// Problems found when re-hashing the files; empty when everything verifies.
  std::vector<std::string> check(const std::filesystem::path& dir) const;
};

/// Trained model artifacts: bank.txt, classifier.txt, ledger.csv.
void save_model(const TrainResult& model, const std::filesystem::path& dir);
TrainResult load_model(const std::filesystem::path& dir);

struct VerifyReport {
  int manifests = 0;
  int files = 0;
  int datasets = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Audit every manifest and dataset file under a directory tree.
VerifyReport verify(const std::filesystem::path& dir);

}  // namespace tailreg

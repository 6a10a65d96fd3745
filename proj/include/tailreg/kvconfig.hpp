#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "tailreg/dataset.hpp"
#include "tailreg/evaluation.hpp"
#include "tailreg/training.hpp"

namespace tailreg {

/// Human-editable `key = value` text with `#` comments and a mandatory
/// `version = 1` line. Keys are dotted: dataset.*, train.*, eval.*, sweep.*.
class KeyValueConfig {
 public:
  static constexpr int kVersion = 1;

  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, std::string value);
  void erase(const std::string& key) { values_.erase(key); }
  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Version line first, then keys in sorted order.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Apply the recognized keys of each section. Unknown keys in a section
/// throw ConfigError naming the key.
void apply_dataset_keys(const KeyValueConfig& kv, DatasetConfig& cfg);
void apply_train_keys(const KeyValueConfig& kv, TrainConfig& cfg);
void apply_eval_keys(const KeyValueConfig& kv, EvalConfig& cfg);

/// Fully-resolved echo of each config, in the same key-value syntax.
void echo_dataset(const DatasetConfig& cfg, KeyValueConfig& kv);
void echo_train(const TrainConfig& cfg, KeyValueConfig& kv);
void echo_eval(const EvalConfig& cfg, KeyValueConfig& kv);

}  // namespace tailreg

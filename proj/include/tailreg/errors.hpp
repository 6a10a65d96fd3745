#pragma once

#include <stdexcept>
#include <string>

namespace tailreg {

/// A configuration value violates its invariant. The message names the field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& why)
      : std::invalid_argument(field + ": " + why), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// A caller broke an operation's precondition (dimension mismatch, untrained bank).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent data on disk, or a numerical failure at run time.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tailreg

#pragma once

#include <stdexcept>
#include <string>

namespace phase {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition (non-scalar loss, unknown task, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration: unknown key, bad value, empty land mask, unstable step.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& what, std::string key = {})
      : std::invalid_argument(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A restart file or prediction set does not cover every required cell.
class CompletenessError : public std::runtime_error {
 public:
  CompletenessError(const std::string& what, long long cell)
      : std::runtime_error(what), cell_(cell) {}
  long long cell() const noexcept { return cell_; }

 private:
  long long cell_;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// R² is undefined when the truth has zero variance.
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace phase

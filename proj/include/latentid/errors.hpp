#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace latentid {

// Invalid argument values (bad k, empty selection, lo >= hi, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Structurally inconsistent model (missing CPD entry, dimension mismatch).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Request exceeds the exact-enumeration cap.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Conditioning on an event of probability zero.
class EmptySupportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Function evaluated outside its domain (log of a non-positive value, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(int epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

// File format violations; the message names the offending file.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Experiment config validation failure; `field` is the JSON path at fault.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace latentid

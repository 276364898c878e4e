#pragma once

#include <stdexcept>
#include <string>

namespace kflo {

// Base of every error thrown by the library. Each subtype maps to one CLI
// exit-code class (see tools/kflo.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad user input to an operation (e.g. a label outside the class range).
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or builder arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Inconsistent KFLO block (cascade widths do not chain).
class StructureError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, collapsing a deployed model, empty dataset.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Model in the wrong mode for the requested operation.
class ModeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// A loss function gave different values for identical parameters.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

// Non-finite parameter after an optimizer update.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& layer, const std::string& what)
      : Error(what), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

// Dataset file problems: missing file, bad magic, truncation, count mismatch.
class DataError : public Error {
 public:
  using Error::Error;
};

// Model file problems.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  ChecksumError(const std::string& layer, const std::string& what)
      : FormatError(what), layer_(layer) {}
  // Empty when the corruption could not be localized to a single layer.
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

}  // namespace kflo

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace dksd {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller-side problems: bad arguments, bad config, missing inputs. The CLI
/// maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnsupportedPrimitiveError : public ValidationError {
 public:
  explicit UnsupportedPrimitiveError(std::string primitive)
      : ValidationError("unsupported primitive '" + primitive + "'"),
        primitive_(std::move(primitive)) {}
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

/// Numerical failures discovered while running. Exit code 2 in the CLI.
class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularSystemError : public NumericError {
 public:
  SingularSystemError(const std::string& what, double condition)
      : NumericError(what + " (condition estimate " + std::to_string(condition) + ")"),
        condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TooShortError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace dksd

#pragma once

#include <stdexcept>
#include <string>

namespace dcdl {

// Root of every error raised by the library. The CLI maps NumericalError to
// exit code 3 and every other Error to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Position index outside 0..n_x*n_y, or similar out-of-domain integers.
class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A pooling block holding more than one non-zero activation.
class InvariantViolation : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Degenerate distribution or degenerate training problem (e.g. one class).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Malformed input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConsistencyError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A single unreadable item inside a larger dataset.
class ItemError : public FormatError {
 public:
  ItemError(std::string path, const std::string& what)
      : FormatError(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace dcdl

#pragma once

#include <stdexcept>
#include <string>

namespace esparse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents: bad magic, unsupported version, truncated payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input violates a documented invariant (non-finite values, bad pattern, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not agree.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Filesystem failure while reading or writing an artifact.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace esparse

#pragma once

#include <stdexcept>
#include <string>

namespace dspe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is out of its valid range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow its declared on-disk layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Cross-references between inputs do not line up (unknown ids, row counts).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class BatchTooSmallError : public Error {
 public:
  using Error::Error;
};

/// An API was called out of its permitted order (e.g. a tape reused).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace dspe

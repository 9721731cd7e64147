#pragma once

#include <stdexcept>
#include <string>

namespace canopy {

// Bad arguments to an operation: shape mismatches, out-of-range parameters.
// Uses std::invalid_argument so callers can catch either.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Anything wrong with data read from disk. Subclasses name the failure kind.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedHeader : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedPayload : public DataError {
 public:
  using DataError::DataError;
};

class UnknownBandRole : public DataError {
 public:
  using DataError::DataError;
};

class CrsMismatch : public DataError {
 public:
  using DataError::DataError;
};

class MissingPath : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite losses or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace canopy

#pragma once

#include <stdexcept>
#include <string>

namespace staterank {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed arguments that violate a precondition (shapes, ranges, k > L).
class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Bad or inconsistent input data: malformed files, duplicate ids, fingerprint
// mismatches.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class NotFoundError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite values or violated numeric domains (w outside (0,1), zero norm).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace staterank

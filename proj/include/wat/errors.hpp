#pragma once

#include <stdexcept>
#include <string>

namespace wat {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A token id or element index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation precondition (e.g. backward on a non-scalar).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// An inconsistent or unsupported configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied data (corpus, bracket strings, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf detected during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Missing or malformed file.
class FileError : public Error {
 public:
  using Error::Error;
};

}  // namespace wat

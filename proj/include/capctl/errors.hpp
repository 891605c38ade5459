// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace capctl {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values reached an operation that requires finite input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Token id or string outside the closed vocabulary.
class LexiconError : public Error {
 public:
  using Error::Error;
};

/// File-system or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (bad magic, CRC mismatch, schema violation).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace capctl

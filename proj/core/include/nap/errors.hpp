#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nap {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or axis mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input violates a documented precondition (labels out of range, rows that
/// are not probability vectors, empty collections, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (model hyperparameters, run configs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or run configuration does not match the expected one.
class ConfigMismatchError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Malformed binary file; carries the byte offset where decoding failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedVersionError : public ParseError {
 public:
  UnsupportedVersionError(unsigned version, unsigned supported, std::size_t offset)
      : ParseError("unsupported format version " + std::to_string(version) +
                       " (supported: " + std::to_string(supported) + ")",
                   offset),
        version_(version) {}

  [[nodiscard]] unsigned version() const noexcept { return version_; }

 private:
  unsigned version_;
};

}  // namespace nap

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rwmn {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not agree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An operation or structure parameter is out of its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Empty or otherwise unusable input (empty sentence, empty frame list, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward op or a training step.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file. `position` is a byte offset for binary formats and a
// 1-based line number for text formats.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace rwmn

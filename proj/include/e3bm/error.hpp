#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace e3bm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for the named op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// log of a non-positive value, exp overflow, or a non-finite operand.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A loss or meta-gradient became non-finite during training.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Malformed input file. `line()` is 1-based, 0 when not line-specific.
class FormatError : public Error {
 public:
  FormatError(std::size_t line, const std::string& message)
      : Error(line == 0 ? message : "line " + std::to_string(line) + ": " + message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace e3bm

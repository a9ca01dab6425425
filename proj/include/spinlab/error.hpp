#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spinlab {

// Base of every error raised by the library. The CLI maps subclasses to
// exit codes (config 2, missing artifact 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InjectionError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when a loss has no scorable positions.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// A remapped probability vector lost all of its mass.
class DegenerateDistributionError : public NumericError {
 public:
  using NumericError::NumericError;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace spinlab

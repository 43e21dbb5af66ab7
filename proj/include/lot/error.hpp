#pragma once

#include <stdexcept>
#include <string>

namespace lot {

/// Process exit codes used by the CLI.
enum class ExitCode : int {
  ok = 0,
  failure = 1,
  validation = 2,
  dependency = 3,
  transport = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::failure; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::validation; }
};

// Bad argument to a pure function (wrong dimension, empty input, out of range).
class ArgumentError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SizeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Reference to an id that does not exist (e.g. unknown question id).
class ReferenceError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Input has no usable variation (zero variance, rank-0 matrix).
class DegenerateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class TrainingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IntegrityError : public ValidationError {
 public:
  IntegrityError(const std::string& what, std::string key)
      : ValidationError(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class DriftError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DependencyError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::dependency; }
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts = 0)
      : Error(what), attempts_(attempts) {}
  ExitCode exit_code() const noexcept override { return ExitCode::transport; }
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// The endpoint cannot provide token log-probabilities.
class CapabilityError : public TransportError {
 public:
  explicit CapabilityError(const std::string& what) : TransportError(what) {}
};

class EmptyGenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace lot

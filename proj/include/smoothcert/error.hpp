#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace smoothcert {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shape mismatch. The message names the offending layer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent dataset input (IDX files, class splits).
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint could not be written, read, or validated.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A non-finite value surfaced from a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Experiment configuration failed validation; field() is the dotted path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, std::string reason)
      : Error(field + ": " + reason), field_(std::move(field)), reason_(std::move(reason)) {}

  const std::string& field() const noexcept { return field_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string field_;
  std::string reason_;
};

// A checkpoint path that does not exist.
class MissingCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace smoothcert

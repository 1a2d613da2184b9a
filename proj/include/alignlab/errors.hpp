#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace alignlab {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition on an argument violated (sizes, ranges, orthonormality...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Tensor or layer shapes do not fit together.
class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Iterative algorithm hit its iteration limit.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// Matrix has an eigenvalue below the PSD tolerance.
class NotPsdError : public Error {
 public:
  using Error::Error;
};

/// Matrix is singular or indefinite where positive definiteness is required.
class NotPositiveDefiniteError : public Error {
 public:
  using Error::Error;
};

/// A layer with zero weight norm cannot be rescaled.
class DegenerateLayerError : public Error {
 public:
  using Error::Error;
};

/// Loss became non-finite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Dataset or checkpoint file could not be read.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Configuration file is malformed or contains unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace alignlab

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdssl {

using Real = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using ColVector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Error taxonomy. The CLI maps each family onto a process exit code, so new
// failure modes should derive from one of these rather than std::runtime_error.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument shape (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range layer or element index; a configuration problem.
class IndexError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Operation requested for a framework that has no such component.
class UnsupportedFrameworkError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Parameter trees that should match do not.
class StructuralError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// NaN/Inf or degenerate numerics (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or network failure (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or incompatible on-disk format (checkpoints, shards).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// A dataset sample could not be decoded or validated.
class DataError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace sdssl

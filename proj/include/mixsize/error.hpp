#pragma once

#include <stdexcept>
#include <string>

namespace mixsize {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not agree with what an op expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the domain of an op (negative size, label out of range, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Spatial size below what the network can process.
class SizeError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Batch-norm layer evaluated without running statistics.
class CalibrationRequired : public Error {
 public:
  using Error::Error;
};

// NaN / Inf detected in gradients or updates.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (distribution, model depth, run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or malformed input files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace mixsize

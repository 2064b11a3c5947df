#pragma once

#include <stdexcept>
#include <string>

namespace aerialformer {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible (matmul inner dims, broadcast, concat).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Spatial geometry cannot be satisfied (divisibility, conv output size).
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Hyperparameters violate an invariant (head divisibility, channel splits).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Module wiring mismatch: channel counts from two sources disagree.
class WiringError : public Error {
 public:
  using Error::Error;
};

/// Non-scalar tensor passed where a scalar is required.
class RankError : public Error {
 public:
  using Error::Error;
};

/// Object used before it holds valid state (e.g. BatchNorm running stats).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed; the message names the offending file or pixel.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training cannot proceed (missing gradient, non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace aerialformer

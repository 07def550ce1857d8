#pragma once

#include <stdexcept>
#include <string>

namespace cdnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent hyperparameters or geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Data that violates a structural invariant (pyramid levels, parameter sets, file contents).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or a split cannot support the requested computation.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdnet

#pragma once

#include <stdexcept>
#include <string>

namespace druseg {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes or ranks that do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// A value violates a documented precondition (non-binary target, bad rate, ...).
struct ValueError : Error {
  using Error::Error;
};

// Invalid run configuration: unknown keys, missing required inputs, bad combos.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem and codec failures: missing files, truncated or corrupt data.
struct IoError : Error {
  using Error::Error;
};

// An operation was called in a state that does not support it
// (e.g. backward without a cached forward).
struct StateError : Error {
  using Error::Error;
};

// Training produced a non-finite loss; carries where it happened.
struct DivergenceError : Error {
  long epoch = 0;
  long batch = 0;
  DivergenceError(const std::string& msg, long epoch_, long batch_)
      : Error(msg), epoch(epoch_), batch(batch_) {}
};

// Whether stochastic layers (dropout, noise) are active.
enum class Mode { kTrain, kEval };

}  // namespace druseg

#pragma once

#include <stdexcept>
#include <string>

namespace acpo {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimensionality mismatch in a primitive.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite intermediate, degenerate norm, or other numeric breakdown.
struct NumericError : Error {
  using Error::Error;
};

// Invalid configuration value or unknown config key.
struct ConfigError : Error {
  using Error::Error;
};

// A required upstream artifact (checkpoint, dataset) is missing or unusable.
struct DependencyError : Error {
  using Error::Error;
};

// A state that must never change (frozen params, detached base) changed.
struct InvariantBreach : Error {
  using Error::Error;
};

// Checkpoint load failures carry a code so callers can tell the cases apart.
struct CheckpointError : Error {
  enum class Code { kVersionMismatch, kKindMismatch, kCorrupt };
  Code code;
  CheckpointError(Code c, const std::string& msg) : Error(msg), code(c) {}
};

}  // namespace acpo

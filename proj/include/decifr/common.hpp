#pragma once

#include <stdexcept>
#include <string>

namespace decifr {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes used by the CLI. Library code throws the matching exception
// type; the CLI maps it at the top level.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitCollision = 3,
  kExitOrdering = 4,
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad configuration value or malformed config file.
struct ConfigError : Error {
  using Error::Error;
};

// Runtime input violates an operation's preconditions (shape mismatch etc).
struct InvalidInput : Error {
  using Error::Error;
};

// Federated-protocol violation (parameter vector length mismatch etc).
struct ProtocolError : Error {
  using Error::Error;
};

// Requested artifact (round, checkpoint, stage output) does not exist.
struct NotFoundError : Error {
  using Error::Error;
};

// Too few samples to compute the requested statistic.
struct InsufficientData : Error {
  using Error::Error;
};

// Run id already exists with a different configuration.
struct CollisionError : Error {
  using Error::Error;
};

// Pipeline stage invoked before its prerequisite completed.
struct OrderingError : Error {
  using Error::Error;
};

}  // namespace decifr

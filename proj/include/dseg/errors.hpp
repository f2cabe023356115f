#pragma once

#include <stdexcept>
#include <string>

namespace dseg {

// Tensor shapes that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid user-supplied configuration (exit status 1 at the CLI).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or degenerate data (exit status 2 at the CLI).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation not allowed in the current object state.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Training produced a non-finite loss. `snapshot` is a JSON document
// describing the offending batch.
class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(const std::string& what, std::string snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const noexcept { return snapshot_; }

 private:
  std::string snapshot_;
};

}  // namespace dseg

#pragma once

#include <stdexcept>
#include <string>

namespace evla {

/// Tensor dimensions disagree with what an operation requires.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller-supplied data is malformed or out of range.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An object was used in a state that does not permit the operation.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration or plan violates its declared bounds.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evla

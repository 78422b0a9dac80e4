#pragma once

#include <stdexcept>
#include <string>

namespace promoe {

/// Tensor shapes do not line up for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of range or inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on the caller was violated (non-scalar loss, bad label, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// File could not be read or written; message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace promoe

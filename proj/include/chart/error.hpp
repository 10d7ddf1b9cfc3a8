#pragma once

#include <stdexcept>
#include <string>

namespace chart {

// Raised when an operation receives arguments that violate its preconditions
// (shape mismatch, degenerate geometry, empty inputs...).
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Raised when a model/run configuration is invalid or incomplete.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace chart

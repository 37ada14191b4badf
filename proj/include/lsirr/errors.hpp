// Exception types that callers (notably the CLI) map to distinct outcomes.
// Argument validation uses std::invalid_argument.
#pragma once

#include <stdexcept>

namespace lsirr {

// Inconsistent or incomplete configuration (unknown keys, missing feature taps,
// checkpoint/config mismatch).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or malformed input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values during optimisation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lsirr

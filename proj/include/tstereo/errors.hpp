#pragma once

#include <stdexcept>
#include <string>

namespace tstereo {

/// Image/volume dimension constraint violations.
struct SizingError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Configuration or checkpoint incompatibilities.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tstereo

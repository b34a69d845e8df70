#pragma once

#include <stdexcept>
#include <string>

namespace flood {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid configuration or out-of-contract argument.
struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

/// Training loss blew past the divergence threshold.
struct DivergenceError : Error {
  using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

} // namespace flood

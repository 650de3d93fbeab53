#pragma once

#include <stdexcept>
#include <string>

namespace nsp {

/// Bad configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (CLI exit code 3).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numeric failure or violated computational contract (CLI exit code 4).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shape mismatch.
struct ShapeError : NumericError {
    using NumericError::NumericError;
};

}  // namespace nsp

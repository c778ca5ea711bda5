#pragma once

#include <stdexcept>
#include <string>

namespace rhoflow {

/// Bad arguments or violated call contracts. CLI exit code 1.
struct InvalidArgument : std::invalid_argument {
    explicit InvalidArgument(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Unreadable, malformed, or schema-incompatible input data. CLI exit code 2.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values, overflow, or degenerate numerics at runtime. CLI exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rhoflow

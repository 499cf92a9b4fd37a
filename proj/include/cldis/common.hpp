#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cldis {

// Raised when an operation is called outside its contract.
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Raised on malformed configs, manifests, or CLI arguments.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a command needs artifacts from an earlier phase that are missing.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when training encounters non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw PreconditionError(msg);
}

}  // namespace cldis

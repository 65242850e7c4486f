#pragma once

#include <stdexcept>
#include <string>

namespace amskv {

// Dimension or coverage mismatch between tensors/blocks.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or invalid numeric parameters.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration: bad schedule, budget spec, policy parameters,
// or experiment file. Maps to CLI exit code 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke a stateful contract (out-of-order scales, missing
// similarity at an overflow step). Maps to CLI exit code 2.
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

// A runtime invariant that should hold by construction was violated.
// Maps to CLI exit code 2.
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace amskv

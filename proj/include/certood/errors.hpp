#pragma once

#include <stdexcept>
#include <string>

namespace certood {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer shape disagreement. Message names both shapes.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

/// A precondition of an operation was violated (bad label, negative radius, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

/// Malformed file content: bad magic, unsupported version, truncation.
struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

/// Non-finite or overflowing numeric state; carries the layer index when known.
struct NumericError : Error {
    explicit NumericError(const std::string& msg, int layer = -1)
        : Error(msg), layerIndex(layer) {}
    int layerIndex;
};

/// Invalid or missing configuration (unknown architecture, bad config key, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace certood

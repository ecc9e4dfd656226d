#pragma once

#include <stdexcept>
#include <string>

namespace bsdef {

// Bad user input: unparseable config, unknown keys, invalid dimensions.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: divergence, singular matrices, degenerate weights.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or malformed on-disk artifact (batch files, filter directories).
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bsdef

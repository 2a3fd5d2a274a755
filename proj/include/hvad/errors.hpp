#pragma once

#include <stdexcept>
#include <string>

namespace hvad {

/// Invalid configuration: bad shapes, incompatible flags, impossible sizes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent data (labels out of range, dimension mismatch).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Unreadable or missing input files.
struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Metric undefined for the given labels (e.g. a single class).
struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values produced during optimization.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace hvad

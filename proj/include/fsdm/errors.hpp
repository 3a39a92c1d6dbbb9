#pragma once

#include <stdexcept>
#include <string>

namespace fsdm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis violations; messages name the offending axes.
struct DimensionError : Error { using Error::Error; };
// API misuse (backward on a non-scalar, missing mask channel, ...).
struct UsageError : Error { using Error::Error; };
// Not enough data to satisfy a request (k-shot pools, empty support groups).
struct CapacityError : Error { using Error::Error; };
// File problems: missing, corrupt, version or shape mismatch.
struct IoError : Error { using Error::Error; };
// Non-finite values where finite ones are required.
struct NumericError : Error { using Error::Error; };

}  // namespace fsdm

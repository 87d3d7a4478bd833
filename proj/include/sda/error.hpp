#pragma once

#include <stdexcept>
#include <string>

namespace sda {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// shape or argument mismatch between tensors / configs
struct ShapeError : Error {
    using Error::Error;
};

// invalid argument value (out-of-range class, bad hyperparameter, ...)
struct ValueError : Error {
    using Error::Error;
};

// NaN/Inf produced or consumed where finite values are required
struct NumericError : Error {
    using Error::Error;
};

// file format / serialization problems
struct IoError : Error {
    using Error::Error;
};

}  // namespace sda

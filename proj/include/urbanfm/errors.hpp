#pragma once

#include <stdexcept>
#include <string>

namespace urbanfm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/grid dimensions do not match what an operation requires.
struct ShapeError : Error {
    using Error::Error;
};

// A value is outside its admissible domain (negative flow, bad category id, ...).
struct DomainError : Error {
    using Error::Error;
};

// Inconsistent or unusable configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed on-disk data.
struct ParseError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace urbanfm

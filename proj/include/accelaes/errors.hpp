#pragma once

#include <stdexcept>
#include <string>

namespace accelaes {

// All library failures derive from Error so callers can catch once.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Invalid parameters or configuration values.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed text input; message carries the source location.
struct ParseError : Error {
    using Error::Error;
};

// Well-formed input with inconsistent content (e.g. vector lengths).
struct FormatError : Error {
    using Error::Error;
};

struct DegenerateInputError : Error {
    using Error::Error;
};

struct CacheError : Error {
    using Error::Error;
};

struct ScheduleError : Error {
    using Error::Error;
};

struct LifecycleError : Error {
    using Error::Error;
};

// Precondition that upstream modules are supposed to guarantee.
struct ContractError : Error {
    using Error::Error;
};

}  // namespace accelaes

#pragma once

#include <stdexcept>
#include <string>

namespace dehaze {

/// Base class for every error the library raises. Each subclass maps to a
/// distinct process exit code in the command-line front end.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

/// Out-of-range scalar argument (non-positive beta, gamma <= 0, ...).
class ParameterError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Inconsistent architecture / training configuration.
class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Malformed or mismatched input data (shapes, non-finite values, ...).
class InputError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

/// Broken internal invariant; indicates a bug rather than bad input.
class InternalError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 5; }
};

/// Training produced a NaN/Inf loss.
class NumericalError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 6; }
};

}  // namespace dehaze

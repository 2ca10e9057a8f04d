#pragma once

#include <stdexcept>
#include <string>

namespace aegan {

/// Base of every error raised by the library. `exit_code()` is the process
/// status the CLI reports for it.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

// Configuration / argument family -> exit 2.
class ArgumentError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class ConfigError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

/// Raised for invalid JSON configs; `path()` is the dotted key path.
class SchemaError : public ConfigError {
public:
    SchemaError(std::string path, const std::string& what)
        : ConfigError(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class SpecError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

// Data family -> exit 3.
class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

class ValidationError : public DataError {
public:
    using DataError::DataError;
};

class CoverageError : public DataError {
public:
    using DataError::DataError;
};

class GeometryError : public DataError {
public:
    using DataError::DataError;
};

class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

// Numeric family -> exit 4.
class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

class UndefinedMetricError : public NumericError {
public:
    using NumericError::NumericError;
};

class DegenerateStatisticError : public NumericError {
public:
    using NumericError::NumericError;
};

} // namespace aegan

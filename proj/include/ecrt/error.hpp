#pragma once

#include <stdexcept>
#include <string>

namespace ecrt {

// Base for every error raised by the library. The CLI maps the subclasses
// onto process exit codes (config 2, data 3, protocol 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

// A record, manifest or model violates one of its declared invariants.
class ValidationError : public DataError {
public:
    using DataError::DataError;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// An upstream pipeline artifact is absent.
class MissingArtifactError : public DataError {
public:
    using DataError::DataError;
};

// The frozen-test discipline or another evaluation protocol rule was broken.
class ProtocolError : public Error {
public:
    using Error::Error;
};

}  // namespace ecrt

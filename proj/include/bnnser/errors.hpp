#pragma once

#include <stdexcept>
#include <string>

namespace bnnser {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid user input: configuration, arguments, schema violations.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed file content. Carries the offending line when known.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace bnnser

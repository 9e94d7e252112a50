#pragma once

#include <stdexcept>
#include <string>

namespace mfgm {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class IndexOutOfRange : public Error {
public:
    using Error::Error;
};

/// A matrix that must be factorized by Cholesky was not (numerically) positive definite.
class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

/// The parameter normal equations could not be solved; usually an unidentifiable parameter.
class Singular : public Error {
public:
    using Error::Error;
};

class NonFiniteEncountered : public Error {
public:
    using Error::Error;
};

class NonFiniteState : public Error {
public:
    NonFiniteState(const std::string& what, double time) : Error(what), time_(time) {}
    [[nodiscard]] double time() const noexcept { return time_; }

private:
    double time_;
};

class OptimFailed : public Error {
public:
    using Error::Error;
};

/// Malformed text input; `line()` is 1-based, 0 when not tied to a line.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace mfgm

#ifndef EPISAMPLE_ERROR_HPP
#define EPISAMPLE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace episample {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value lies outside the domain of an operation (log of a non-positive number, zero variance, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// A file on disk does not follow the expected format.
class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}

    const std::string& file() const noexcept { return file_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string file_;
    std::size_t line_;
};

/// Files parse individually but disagree with each other (manifest vs. data).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Configuration is missing a key, carries an unknown key, or is inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace episample

#endif

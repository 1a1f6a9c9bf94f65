#pragma once

#include <stdexcept>
#include <string>

namespace akd {

// Error taxonomy used across the library. All derive from std::runtime_error
// so callers can catch coarsely; the concrete type states the contract that
// was violated.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ParamError : std::runtime_error {
    explicit ParamError(const std::string& what) : std::runtime_error(what) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

struct LabelError : std::runtime_error {
    explicit LabelError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace akd

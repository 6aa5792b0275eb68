#pragma once

#include <stdexcept>
#include <string>

namespace byb {

// Error taxonomy. Everything derives from std::runtime_error so callers that
// don't care about the category can catch one type.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};

struct BoundsError : std::runtime_error {
    explicit BoundsError(const std::string& m) : std::runtime_error("bounds error: " + m) {}
};

// Violated API contract (e.g. backward on a non-scalar).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

// Object used in a state it no longer supports (e.g. consumed tape).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error("state error: " + m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& m) : std::runtime_error("parse error: " + m) {}
};

struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& m) : std::runtime_error("undefined metric: " + m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

}  // namespace byb

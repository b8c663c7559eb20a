#pragma once

#include <stdexcept>
#include <string>

namespace mvir {

// Dimension/shape violations (e.g. matmul inner extents).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violations: non-scalar backward, double backward, non-unit normals, ...
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user configuration (CLI/config file/model config).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kLayerNormEps = 1e-5;
constexpr double kDivEps = 1e-8;

}  // namespace mvir

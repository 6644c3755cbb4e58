#pragma once

#include <stdexcept>
#include <string>

namespace far {

// Shape/dimension violations on tensor ops.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke an operation's precondition.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Math-domain violations (log of non-positive input, etc).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format violations; carries the byte offset of the problem.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, long long offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    long long byte_offset;
};

// Bad configuration value or unknown key.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace far

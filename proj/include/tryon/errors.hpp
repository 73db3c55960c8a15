#pragma once

#include <stdexcept>
#include <string>

namespace tryon {

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct InvalidState : std::logic_error {
    using std::logic_error::logic_error;
};

// Raised when a forward pass, sampler or loss produces a non-finite value.
struct NumericFailure : std::runtime_error {
    explicit NumericFailure(const std::string& what, long step = -1)
        : std::runtime_error(step >= 0 ? what + " (step " + std::to_string(step) + ")" : what), step(step) {}
    long step;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent run configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw InvalidArgument(msg);
    }
}

}  // namespace tryon

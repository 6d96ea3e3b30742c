#pragma once

#include <stdexcept>
#include <string>

namespace bsim {

// Vector too close to zero to normalize (norm <= eps_norm).
struct DegenerateNorm : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// lambda*z1 + (1-lambda)*z2 has no direction: z2 ~ -z1 with lambda ~ 0.5.
struct AntipodalTargets : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad configuration or argument values (CLI maps these to exit code 1).
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace bsim

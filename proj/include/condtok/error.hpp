#pragma once

#include <stdexcept>
#include <string>

namespace condtok {

// Caller passed arguments that violate a precondition (shapes, ranges, flags).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DimensionError : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

// Numerical failures: the input was well-formed but the computation cannot
// proceed (non-finite values, rank deficiency, SVD non-convergence).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class RankDeficientError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, double residual)
        : NumericalError(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

// Malformed files (CSV, config).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace condtok

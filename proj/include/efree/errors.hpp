#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace efree {

// Root of every error thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

// Integrator produced a non-finite state. `time` is the time reached when
// the failure was detected, `step` the index of the offending step.
class EvolutionError : public Error {
public:
    EvolutionError(const std::string& what, double time, std::size_t step = 0)
        : Error(what), time_(time), step_(step) {}
    double time() const noexcept { return time_; }
    std::size_t step() const noexcept { return step_; }

private:
    double time_;
    std::size_t step_;
};

// Jacobian or coarse-map matrix too close to singular to invert.
class ConditioningError : public Error {
public:
    ConditioningError(const std::string& what, double condition)
        : Error(what), condition_(condition) {}
    double condition() const noexcept { return condition_; }

private:
    double condition_;
};

// An iterative solve failed to reach its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

// Monte Carlo particle left the guard interval.
class StabilityError : public EvolutionError {
public:
    using EvolutionError::EvolutionError;
};

class UsageError : public Error {
public:
    using Error::Error;
};

} // namespace efree

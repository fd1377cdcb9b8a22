#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace mfuse {

/// Malformed input data, configuration, or argument.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid solver or penalty configuration (e.g. delta * rho <= 1).
class ConfigError : public InputError {
public:
    using InputError::InputError;
};

/// Base class for failures of a numerical routine on valid input.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A variance function evaluated to zero or a mean was not finite.
class SingularVarianceError : public NumericalError {
public:
    SingularVarianceError(const std::string& what, Eigen::Index participant, Eigen::Index coordinate)
        : NumericalError(what), participant_(participant), coordinate_(coordinate) {}

    Eigen::Index participant() const noexcept { return participant_; }
    Eigen::Index coordinate() const noexcept { return coordinate_; }

private:
    Eigen::Index participant_;
    Eigen::Index coordinate_;
};

/// An iterative solver hit its iteration cap. Carries the last iterate.
class NonConvergenceError : public NumericalError {
public:
    NonConvergenceError(const std::string& what, Eigen::VectorXd last_iterate, double gradient_norm,
                        int iterations)
        : NumericalError(what),
          last_iterate_(std::move(last_iterate)),
          gradient_norm_(gradient_norm),
          iterations_(iterations) {}

    const Eigen::VectorXd& last_iterate() const noexcept { return last_iterate_; }
    double gradient_norm() const noexcept { return gradient_norm_; }
    int iterations() const noexcept { return iterations_; }

private:
    Eigen::VectorXd last_iterate_;
    double gradient_norm_;
    int iterations_;
};

/// An iterate became non-finite.
class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, int iteration, double primal, double dual)
        : NumericalError(what), iteration_(iteration), primal_(primal), dual_(dual) {}

    int iteration() const noexcept { return iteration_; }
    double primal_residual() const noexcept { return primal_; }
    double dual_residual() const noexcept { return dual_; }

private:
    int iteration_;
    double primal_;
    double dual_;
};

/// A linear system that must be nonsingular was not.
class RankDeficiencyError : public NumericalError {
public:
    RankDeficiencyError(const std::string& what, int group)
        : NumericalError(what), group_(group) {}

    /// Offending partition group, or -1 when not attributable to one group.
    int group() const noexcept { return group_; }

private:
    int group_;
};

}  // namespace mfuse

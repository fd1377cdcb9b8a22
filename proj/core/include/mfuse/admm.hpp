#pragma once

#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mfuse/gmm.hpp"
#include "mfuse/partition.hpp"
#include "mfuse/penalty.hpp"

namespace mfuse {

struct AdmmConfig {
    double tol_primal = 1e-5;
    double tol_dual = 1e-5;
    int max_iter = 1000;
    double fuse_epsilon = 0.0;  // pairs with ||gamma||_inf <= fuse_epsilon are fused

    void validate() const;
};

/// Iterate of the ADMM on the augmented Lagrangian. gamma and multipliers
/// hold one q-column per pair, in PairSet order.
struct SolverState {
    VectorXd beta;
    MatrixXd gamma;
    MatrixXd multipliers;
    MatrixXd covariance;  // V_N at the last weight refresh
    double objective = 0.0;  // penalized objective at the last weight refresh
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct IterationRecord {
    int iteration = 0;
    double objective = 0.0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    int groups = 0;
};

using TraceSink = std::function<void(const IterationRecord&)>;

/// Stepwise ADMM driver. Each step() refreshes V at the current beta, takes
/// one damped Gauss-Newton step on the augmented Lagrangian in beta, applies
/// the exact gamma prox per pair, and updates the multipliers.
class AdmmSolver {
public:
    AdmmSolver(const StackedSystem& system, const PairSet& pairs, const PenaltyConfig& penalty,
               const AdmmConfig& config, const VectorXd& beta_init);

    /// Runs one iteration; returns true once both residuals are within tolerance.
    bool step();

    const SolverState& state() const noexcept { return state_; }

    /// What the last step() did, for verification.
    struct StepDetail {
        MatrixXd multipliers_before;
        MatrixXd pair_residuals;  // beta_a - beta_b - gamma_new per pair
        std::vector<std::pair<double, double>> merit_trials;  // (merit before, accepted merit)
    };
    const StepDetail& last_step() const noexcept { return detail_; }

    /// Augmented Lagrangian with V frozen at `weight` (pseudo-inverse).
    double augmented_merit(const VectorXd& beta, const MatrixXd& weight) const;

private:
    MatrixXd pair_differences(const VectorXd& beta) const;
    VectorXd apply_transpose(const MatrixXd& per_pair) const;

    const StackedSystem& system_;
    const PairSet& pairs_;
    PenaltyConfig penalty_;
    AdmmConfig config_;
    MatrixXd laplacian_;  // A^T A
    SolverState state_;
    StepDetail detail_;
};

SolverState admm_solve(const StackedSystem& system, const PairSet& pairs, const PenaltyConfig& penalty,
                       const AdmmConfig& config, const VectorXd& beta_init, const TraceSink& trace = {});

/// Partition from zero gamma blocks, closed transitively (union-find).
PartitionMap extract_partition(const SolverState& state, const PairSet& pairs, double fuse_epsilon);

/// Within-group mean of the member beta_jk, as a Gq vector.
VectorXd representative_beta(const SolverState& state, const PartitionMap& partition);

}  // namespace mfuse

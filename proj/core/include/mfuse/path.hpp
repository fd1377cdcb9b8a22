#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "mfuse/admm.hpp"
#include "mfuse/gmm.hpp"
#include "mfuse/partition.hpp"
#include "mfuse/penalty.hpp"

namespace mfuse {

struct PathRecord {
    double lambda = 0.0;
    VectorXd beta;
    PartitionMap partition;
    int groups = 0;
    double bic = 0.0;
    bool converged = false;
    int iterations = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
};

struct PathOptions {
    bool exclude_homogeneous = false;
    QifOptions qif;
    /// Optional per-iteration trace; receives the index into the lambda grid.
    std::function<void(std::size_t, const IterationRecord&)> trace;
};

struct SolutionPath {
    std::vector<double> lambdas;
    std::vector<PathRecord> records;
    VectorXd initial;           // per-source QIF fits used to start the path
    std::size_t selected = 0;
    /// Set when exclude_homogeneous left no eligible record and the
    /// unrestricted minimizer was returned instead.
    bool exclusion_fallback = false;

    const PathRecord& best() const { return records.at(selected); }
};

/// GMM-BIC: N Psi^T V^- Psi - log(N) (sum_jk q s_jk - G q) at beta_hat.
double gmm_bic(const StackedSystem& system, const VectorXd& beta_hat, int groups);

/// Warm-started path over ascending lambdas; record 0 starts from the
/// per-source QIF fits (or `start` when given). Selects the eligible
/// converged record with the smallest BIC, ties toward larger lambda.
SolutionPath run_path(const StackedSystem& system, const PairSet& pairs, const std::vector<double>& lambdas,
                      const PenaltyConfig& base, const AdmmConfig& admm, const PathOptions& options = {},
                      const VectorXd* start = nullptr);

/// Largest pairwise L1 difference of beta, a natural upper end for the grid.
double suggest_lambda_max(const VectorXd& beta, const PairSet& pairs, Index q);

/// {step * a : a = first..last}.
std::vector<double> arithmetic_grid(double step, int first, int last);

}  // namespace mfuse

#pragma once

#include <Eigen/Core>

#include "mfuse/gmm.hpp"
#include "mfuse/partition.hpp"

namespace mfuse {

/// Efficiency-weighted fused estimate over a partition.
struct MetaEstimate {
    PartitionMap partition;
    VectorXd theta;       // Gq
    MatrixXd covariance;  // (S~^T V~^- S~)^{-1} / N
    double ci_level = 0.95;
    MatrixXd intervals;   // Gq x 2, (lower, upper)

    VectorXd standard_errors() const { return covariance.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

/// Combines the per-source estimates beta_hat into one estimate per group,
/// weighting by sample sensitivity and variability matrices evaluated at
/// beta_hat. Throws RankDeficiencyError naming the offending group.
MetaEstimate meta_combine(const StackedSystem& system, const PartitionMap& partition, const VectorXd& beta_hat,
                          double level = 0.95);

/// Normal-approximation intervals theta +- z_{1-alpha/2} * se; Gq x 2.
MatrixXd confidence_intervals(const MetaEstimate& estimate, double level);

/// Standard normal quantile.
double normal_quantile(double p);

}  // namespace mfuse

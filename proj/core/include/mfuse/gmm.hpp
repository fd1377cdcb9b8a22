#pragma once

#include <memory>
#include <vector>

#include <Eigen/Core>

#include "mfuse/model.hpp"
#include "mfuse/partition.hpp"

namespace mfuse {

/// Stacked estimating-function layout over all J*K sources.
///
/// Both the moment vector and the parameter vector are ordered k-major, then
/// j-minor, then by coefficient (moments: basis index then coefficient).
class StackedSystem {
public:
    explicit StackedSystem(std::shared_ptr<const StudyDataset> data);

    const StudyDataset& dataset() const noexcept { return *data_; }
    int sources() const noexcept { return data_->source_count(); }
    Index covariates() const noexcept { return data_->covariates(); }
    Index participants() const noexcept { return data_->total_participants(); }
    Index total_dim() const noexcept { return total_dim_; }
    Index parameter_dim() const noexcept { return sources() * covariates(); }

    /// Offset and length of source l's moment block in the stacked vector.
    Index offset(int source) const { return offsets_[static_cast<std::size_t>(source)]; }
    Index moments(int source) const { return data_->block(source).moments(); }
    /// Offset and length of study k's moments (contiguous because of k-major order).
    Index study_offset(int k) const { return offset(k * data_->sources()); }
    Index study_dim(int k) const;

private:
    std::shared_ptr<const StudyDataset> data_;
    std::vector<Index> offsets_;
    Index total_dim_ = 0;
};

/// Stacked psi: participant i of study k has psi_i nonzero only on study k's
/// moments, stored as row i of per_study[k].
struct StackedPsi {
    std::vector<MatrixXd> per_study;  // n_k x study_dim(k)
    VectorXd mean;                    // Psi_N, length total_dim

    /// Dense psi_i for participant i of study k (zeros outside study k).
    VectorXd participant(const StackedSystem& system, int k, Index i) const;
};

struct StackedEvaluation {
    StackedPsi psi;
    MatrixXd covariance;   // V_N
    MatrixXd sensitivity;  // S = -d Psi_N / d beta, total_dim x JKq (empty if not requested)
};

StackedPsi stack_psi(const StackedSystem& system, const VectorXd& beta);

/// V_N = (1/N) sum_i psi_i psi_i^T. Cross-study blocks are exactly zero.
MatrixXd sample_covariance(const StackedSystem& system, const StackedPsi& psi);

/// Block-diagonal stacked sensitivity with blocks (n_k / N) S_jk.
MatrixXd stacked_sensitivity(const StackedSystem& system, const VectorXd& beta);

StackedEvaluation evaluate_stacked(const StackedSystem& system, const VectorXd& beta, bool with_sensitivity);

/// 1/2 Psi^T V^- Psi with a frozen pseudo-inverse weight.
class WeightedQuadratic {
public:
    /// Throws InputError if V is asymmetric beyond 1e-8.
    WeightedQuadratic(VectorXd psi, const MatrixXd& covariance);

    double value() const noexcept { return value_; }
    /// Gradient in beta of the quadratic with V frozen: -S^T V^- Psi, where
    /// S = -d Psi / d beta.
    VectorXd gradient(const MatrixXd& sensitivity) const;
    const MatrixXd& weight() const noexcept { return weight_; }
    Index rank() const noexcept { return rank_; }

private:
    VectorXd psi_;
    MatrixXd weight_;
    Index rank_ = 0;
    double value_ = 0.0;
};

WeightedQuadratic weighted_quadratic(const VectorXd& psi, const MatrixXd& covariance);

struct GmmOptions {
    double tolerance = 1e-8;  // sup-norm of the frozen-weight gradient in theta
    int max_iterations = 200;
};

struct GmmFit {
    VectorXd theta;         // Gq
    MatrixXd covariance;    // (Pi^T S^T V^- S Pi)^{-1} / N at theta
    double objective = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    /// Frozen-weight merit before and after every accepted step.
    std::vector<std::pair<double, double>> accepted_steps;

    VectorXd standard_errors() const { return covariance.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

/// GMM estimate of theta under a known partition. With the singleton
/// partition this is the heterogeneous estimator.
GmmFit gmm_estimate(const StackedSystem& system, const PartitionMap& partition, const VectorXd& theta0,
                    const GmmOptions& options = {});

/// Per-source QIF fits stacked into a JKq vector (k-major, j-minor).
VectorXd qif_initial_estimates(const StackedSystem& system, const QifOptions& options = {});

}  // namespace mfuse

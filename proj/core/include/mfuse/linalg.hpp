#pragma once

#include <Eigen/Core>

namespace mfuse {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kPinvCutoff = 1e-10;

/// Moore-Penrose inverse of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues at or below rel_cutoff * (largest eigenvalue) are dropped.
struct SymmetricPinv {
    MatrixXd inverse;
    Index rank = 0;
};
SymmetricPinv pseudo_inverse_sym(const MatrixXd& a, double rel_cutoff = kPinvCutoff);

/// Throws InputError when max |a - a^T| exceeds tol * max(1, max |a|).
void require_symmetric(const MatrixXd& a, double tol = 1e-8);

/// Solves a x = b for symmetric PSD a. On numerical singularity adds a ridge
/// starting at 1e-8 * scale and doubling up to 1e-2 * scale; throws
/// RankDeficiencyError if still singular.
VectorXd solve_psd_damped(const MatrixXd& a, const VectorXd& b);

/// Inverse of a symmetric positive definite matrix; throws RankDeficiencyError
/// if min eigenvalue <= 1e-12 * max eigenvalue.
MatrixXd inverse_spd(const MatrixXd& a);

}  // namespace mfuse

#include "mfuse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "mfuse/error.hpp"

namespace mfuse {

SymmetricPinv pseudo_inverse_sym(const MatrixXd& a, double rel_cutoff) {
    SymmetricPinv out;
    out.inverse = MatrixXd::Zero(a.rows(), a.cols());
    if (a.size() == 0) return out;

    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(a);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    const VectorXd& values = eig.eigenvalues();
    const double top = values.cwiseAbs().maxCoeff();
    if (top == 0.0) return out;

    const double cutoff = rel_cutoff * top;
    const MatrixXd& vectors = eig.eigenvectors();
    for (Index i = 0; i < values.size(); ++i) {
        if (values[i] > cutoff) {
            out.inverse.noalias() += (1.0 / values[i]) * vectors.col(i) * vectors.col(i).transpose();
            ++out.rank;
        }
    }
    return out;
}

void require_symmetric(const MatrixXd& a, double tol) {
    if (a.rows() != a.cols()) throw InputError("matrix is not square");
    if (a.size() == 0) return;
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    const double gap = (a - a.transpose()).cwiseAbs().maxCoeff();
    if (gap > tol * scale) {
        std::ostringstream msg;
        msg << "matrix is not symmetric (max asymmetry " << gap << ")";
        throw InputError(msg.str());
    }
}

VectorXd solve_psd_damped(const MatrixXd& a, const VectorXd& b) {
    const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);

    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() == Eigen::Success) {
        const double dmin = llt.matrixL().toDenseMatrix().diagonal().minCoeff();
        if (dmin * dmin > 1e-14 * scale) return llt.solve(b);
    }
    for (double ridge = 1e-8; ridge <= 1e-2 * (1.0 + 1e-12); ridge *= 2.0) {
        MatrixXd damped = a;
        damped.diagonal().array() += ridge * scale;
        Eigen::LLT<MatrixXd> retry(damped);
        if (retry.info() == Eigen::Success) return retry.solve(b);
    }
    throw RankDeficiencyError("Gauss-Newton system is singular after ridge damping", -1);
}

MatrixXd inverse_spd(const MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(a);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    const VectorXd& values = eig.eigenvalues();
    const double top = values.cwiseAbs().maxCoeff();
    if (!(values.minCoeff() > 1e-12 * top)) throw RankDeficiencyError("matrix is singular", -1);
    return eig.eigenvectors() * values.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace mfuse

#include "mfuse/meta.hpp"

#include <sstream>

#include <Eigen/Eigenvalues>
#include <boost/math/distributions/normal.hpp>

#include "mfuse/error.hpp"
#include "mfuse/linalg.hpp"

namespace mfuse {

double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), p);
}

MetaEstimate meta_combine(const StackedSystem& system, const PartitionMap& partition, const VectorXd& beta_hat,
                          double level) {
    if (partition.sources() != system.sources() || partition.covariates() != system.covariates())
        throw InputError("partition does not match the stacked system");
    if (beta_hat.size() != system.parameter_dim() || !beta_hat.allFinite())
        throw InputError("meta_combine: beta_hat must be a finite JKq-vector");

    const Index q = system.covariates();
    const int G = partition.groups();
    const StackedEvaluation ev = evaluate_stacked(system, beta_hat, true);

    // Re-order moment blocks group by group; within a group by source index.
    std::vector<Index> new_offset(static_cast<std::size_t>(system.sources()));
    std::vector<Index> permutation;  // permutation[new row] = old row
    permutation.reserve(static_cast<std::size_t>(system.total_dim()));
    for (const std::vector<int>& group : partition.members())
        for (int l : group) {
            new_offset[static_cast<std::size_t>(l)] = static_cast<Index>(permutation.size());
            for (Index r = 0; r < system.moments(l); ++r) permutation.push_back(system.offset(l) + r);
        }

    const Index D = system.total_dim();
    MatrixXd v_tilde(D, D);
    for (Index a = 0; a < D; ++a)
        for (Index b = 0; b < D; ++b) v_tilde(a, b) = ev.covariance(permutation[static_cast<std::size_t>(a)],
                                                                  permutation[static_cast<std::size_t>(b)]);

    MatrixXd s_tilde = MatrixXd::Zero(D, G * q);
    VectorXd target(D);
    for (int l = 0; l < system.sources(); ++l) {
        const Index rows = system.moments(l);
        const Index at = new_offset[static_cast<std::size_t>(l)];
        // ev.sensitivity already carries the n_k / N factor.
        const MatrixXd block = ev.sensitivity.block(system.offset(l), l * q, rows, q);
        s_tilde.block(at, partition.group_of(l) * q, rows, q) = block;
        target.segment(at, rows) = block * beta_hat.segment(l * q, q);
    }

    const MatrixXd weight = pseudo_inverse_sym(v_tilde).inverse;
    const MatrixXd sw = s_tilde.transpose() * weight;
    const MatrixXd info = sw * s_tilde;

    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(info);
    const VectorXd& values = eig.eigenvalues();
    if (!(values.minCoeff() > 1e-12 * values.cwiseAbs().maxCoeff())) {
        Index worst = 0;
        eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&worst);
        const int group = static_cast<int>(worst / q);
        std::ostringstream msg;
        msg << "weighted sensitivity matrix is singular; group " << group + 1 << " is not identified";
        throw RankDeficiencyError(msg.str(), group);
    }
    const MatrixXd info_inv = eig.eigenvectors() * values.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();

    MetaEstimate out;
    out.partition = partition;
    out.theta = info_inv * (sw * target);
    out.covariance = info_inv / static_cast<double>(system.participants());
    out.covariance = (0.5 * (out.covariance + out.covariance.transpose())).eval();
    out.ci_level = level;
    out.intervals = confidence_intervals(out, level);
    return out;
}

MatrixXd confidence_intervals(const MetaEstimate& estimate, double level) {
    if (!(level > 0.0 && level < 1.0)) throw InputError("confidence level must lie in (0, 1)");
    const double z = normal_quantile(0.5 + 0.5 * level);
    const VectorXd se = estimate.standard_errors();
    MatrixXd out(estimate.theta.size(), 2);
    out.col(0) = estimate.theta - z * se;
    out.col(1) = estimate.theta + z * se;
    return out;
}

}  // namespace mfuse

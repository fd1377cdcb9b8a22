#include "mfuse/gmm.hpp"

#include <cmath>
#include <limits>

#include "mfuse/error.hpp"
#include "mfuse/linalg.hpp"

namespace mfuse {

StackedSystem::StackedSystem(std::shared_ptr<const StudyDataset> data) : data_(std::move(data)) {
    if (!data_) throw InputError("stacked system needs a dataset");
    offsets_.reserve(static_cast<std::size_t>(sources()));
    for (int l = 0; l < sources(); ++l) {
        offsets_.push_back(total_dim_);
        total_dim_ += data_->block(l).moments();
    }
    if (total_dim_ >= participants())
        throw InputError("too many estimating functions: the stacked dimension must be below N");
}

Index StackedSystem::study_dim(int k) const {
    const int J = data_->sources();
    const int last = (k + 1) * J - 1;
    return offset(last) + moments(last) - study_offset(k);
}

VectorXd StackedPsi::participant(const StackedSystem& system, int k, Index i) const {
    VectorXd out = VectorXd::Zero(system.total_dim());
    out.segment(system.study_offset(k), system.study_dim(k)) = per_study[static_cast<std::size_t>(k)].row(i).transpose();
    return out;
}

StackedEvaluation evaluate_stacked(const StackedSystem& system, const VectorXd& beta, bool with_sensitivity) {
    const StudyDataset& data = system.dataset();
    const Index q = system.covariates();
    if (beta.size() != system.parameter_dim()) throw InputError("beta has the wrong stacked dimension");
    const double N = static_cast<double>(system.participants());

    StackedEvaluation out;
    out.psi.mean = VectorXd::Zero(system.total_dim());
    out.psi.per_study.resize(static_cast<std::size_t>(data.studies()));
    if (with_sensitivity) out.sensitivity = MatrixXd::Zero(system.total_dim(), system.parameter_dim());

    for (int k = 0; k < data.studies(); ++k) {
        const Index nk = data.study_size(k);
        const double share = static_cast<double>(nk) / N;
        MatrixXd& rows = out.psi.per_study[static_cast<std::size_t>(k)];
        rows.resize(nk, system.study_dim(k));
        for (int j = 0; j < data.sources(); ++j) {
            const int l = data.linear_index(j, k);
            const SourceEvaluation ev = evaluate_source(data.block(j, k), beta.segment(l * q, q), with_sensitivity);
            const Index local = system.offset(l) - system.study_offset(k);
            rows.middleCols(local, system.moments(l)) = ev.psi.per_participant;
            out.psi.mean.segment(system.offset(l), system.moments(l)) = share * ev.psi.mean;
            if (with_sensitivity)
                out.sensitivity.block(system.offset(l), l * q, system.moments(l), q) = share * ev.sensitivity;
        }
    }
    out.covariance = sample_covariance(system, out.psi);
    return out;
}

StackedPsi stack_psi(const StackedSystem& system, const VectorXd& beta) {
    return evaluate_stacked(system, beta, false).psi;
}

MatrixXd sample_covariance(const StackedSystem& system, const StackedPsi& psi) {
    const int K = system.dataset().studies();
    if (static_cast<int>(psi.per_study.size()) != K) throw InputError("psi list does not cover every study");
    MatrixXd v = MatrixXd::Zero(system.total_dim(), system.total_dim());
    const double N = static_cast<double>(system.participants());
    for (int k = 0; k < K; ++k) {
        const MatrixXd& rows = psi.per_study[static_cast<std::size_t>(k)];
        if (rows.rows() != system.dataset().study_size(k) || rows.cols() != system.study_dim(k))
            throw InputError("psi list is incomplete for a study");
        auto block = v.block(system.study_offset(k), system.study_offset(k), rows.cols(), rows.cols());
        block.noalias() = rows.transpose() * rows;
        block /= N;
    }
    return v;
}

MatrixXd stacked_sensitivity(const StackedSystem& system, const VectorXd& beta) {
    return evaluate_stacked(system, beta, true).sensitivity;
}

// ---------------------------------------------------------------------------

WeightedQuadratic::WeightedQuadratic(VectorXd psi, const MatrixXd& covariance) : psi_(std::move(psi)) {
    if (covariance.rows() != psi_.size()) throw InputError("weighted_quadratic: dimension mismatch");
    require_symmetric(covariance);
    SymmetricPinv p = pseudo_inverse_sym(0.5 * (covariance + covariance.transpose()));
    weight_ = std::move(p.inverse);
    rank_ = p.rank;
    value_ = 0.5 * psi_.dot(weight_ * psi_);
}

VectorXd WeightedQuadratic::gradient(const MatrixXd& sensitivity) const {
    return -(sensitivity.transpose() * (weight_ * psi_));
}

WeightedQuadratic weighted_quadratic(const VectorXd& psi, const MatrixXd& covariance) {
    return WeightedQuadratic(psi, covariance);
}

// ---------------------------------------------------------------------------

GmmFit gmm_estimate(const StackedSystem& system, const PartitionMap& partition, const VectorXd& theta0,
                    const GmmOptions& options) {
    if (partition.sources() != system.sources() || partition.covariates() != system.covariates())
        throw InputError("partition does not match the stacked system");
    if (theta0.size() != partition.groups() * system.covariates() || !theta0.allFinite())
        throw InputError("gmm_estimate: theta0 must be a finite Gq-vector");

    const MatrixXd pi = partition.expansion();
    const double N = static_cast<double>(system.participants());
    GmmFit fit;
    VectorXd theta = theta0;
    double grad_norm = std::numeric_limits<double>::infinity();

    auto finish = [&](const StackedEvaluation& ev, const MatrixXd& weight, int iter) {
        const MatrixXd s_pi = ev.sensitivity * pi;
        const MatrixXd info = s_pi.transpose() * weight * s_pi;
        fit.theta = theta;
        fit.covariance = inverse_spd(info) / N;
        fit.covariance = (0.5 * (fit.covariance + fit.covariance.transpose())).eval();
        fit.objective = 0.5 * ev.psi.mean.dot(weight * ev.psi.mean);
        fit.gradient_norm = grad_norm;
        fit.iterations = iter;
        return fit;
    };

    for (int iter = 0; iter <= options.max_iterations; ++iter) {
        const StackedEvaluation ev = evaluate_stacked(system, pi * theta, true);
        const MatrixXd weight = pseudo_inverse_sym(ev.covariance).inverse;
        const MatrixXd s_pi = ev.sensitivity * pi;
        const VectorXd w_psi = weight * ev.psi.mean;
        const VectorXd rhs = s_pi.transpose() * w_psi;
        grad_norm = rhs.cwiseAbs().maxCoeff();
        if (grad_norm <= options.tolerance) return finish(ev, weight, iter);
        if (iter == options.max_iterations) break;

        const double merit0 = 0.5 * ev.psi.mean.dot(w_psi);
        const VectorXd step = solve_psd_damped(s_pi.transpose() * weight * s_pi, rhs);
        double scale = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving, scale *= 0.5) {
            const VectorXd trial = theta + scale * step;
            double merit = std::numeric_limits<double>::infinity();
            try {
                const VectorXd psi = stack_psi(system, pi * trial).mean;
                merit = 0.5 * psi.dot(weight * psi);
            } catch (const NumericalError&) {
                continue;
            }
            if (merit < merit0) {
                theta = trial;
                fit.accepted_steps.emplace_back(merit0, merit);
                accepted = true;
                break;
            }
        }
        if (!accepted) return finish(ev, weight, iter);
    }
    throw NonConvergenceError("GMM estimate did not converge", theta, grad_norm, options.max_iterations);
}

VectorXd qif_initial_estimates(const StackedSystem& system, const QifOptions& options) {
    const Index q = system.covariates();
    VectorXd beta(system.parameter_dim());
    for (int l = 0; l < system.sources(); ++l)
        beta.segment(l * q, q) = qif_fit_source(system.dataset().block(l), VectorXd::Zero(q), options).beta;
    return beta;
}

}  // namespace mfuse

#include "mfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mfuse/error.hpp"
#include "mfuse/linalg.hpp"

namespace mfuse {

// ---------------------------------------------------------------------------
// LinkFamily
// ---------------------------------------------------------------------------

namespace {

double logistic(double eta) {
    if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

}  // namespace

double LinkFamily::mean(double eta) const {
    switch (kind_) {
        case Link::Identity: return eta;
        case Link::Logit: return logistic(eta);
        case Link::Log: return std::exp(eta);
    }
    return eta;
}

double LinkFamily::dmean(double eta) const {
    switch (kind_) {
        case Link::Identity: return 1.0;
        case Link::Logit: {
            const double mu = logistic(eta);
            return mu * (1.0 - mu);
        }
        case Link::Log: return std::exp(eta);
    }
    return 1.0;
}

double LinkFamily::d2mean(double eta) const {
    switch (kind_) {
        case Link::Identity: return 0.0;
        case Link::Logit: {
            const double mu = logistic(eta);
            return mu * (1.0 - mu) * (1.0 - 2.0 * mu);
        }
        case Link::Log: return std::exp(eta);
    }
    return 0.0;
}

LinkFamily::Values LinkFamily::evaluate(double eta) const {
    switch (kind_) {
        case Link::Identity: return {eta, 1.0, 0.0};
        case Link::Logit: {
            const double mu = logistic(eta);
            const double d = mu * (1.0 - mu);
            return {mu, d, d * (1.0 - 2.0 * mu)};
        }
        case Link::Log: {
            const double mu = std::exp(eta);
            return {mu, mu, mu};
        }
    }
    return {eta, 1.0, 0.0};
}

double LinkFamily::clip(double mu) const {
    switch (kind_) {
        case Link::Identity: return mu;
        case Link::Logit: return std::clamp(mu, kMeanClip, 1.0 - kMeanClip);
        case Link::Log: return std::max(mu, kMeanClip);
    }
    return mu;
}

double LinkFamily::variance(double mu) const {
    const double c = clip(mu);
    switch (kind_) {
        case Link::Identity: return 1.0;
        case Link::Logit: return c * (1.0 - c);
        case Link::Log: return c;
    }
    return 1.0;
}

double LinkFamily::dvariance(double mu) const {
    if (clip(mu) != mu) return 0.0;
    switch (kind_) {
        case Link::Identity: return 0.0;
        case Link::Logit: return 1.0 - 2.0 * mu;
        case Link::Log: return 1.0;
    }
    return 0.0;
}

bool LinkFamily::in_support(double y) const {
    if (!std::isfinite(y)) return false;
    switch (kind_) {
        case Link::Identity: return true;
        case Link::Logit: return y == 0.0 || y == 1.0;
        case Link::Log: return y >= 0.0 && y == std::floor(y);
    }
    return false;
}

std::string_view LinkFamily::name() const noexcept {
    switch (kind_) {
        case Link::Identity: return "gaussian";
        case Link::Logit: return "logistic";
        case Link::Log: return "poisson";
    }
    return "gaussian";
}

LinkFamily LinkFamily::parse(std::string_view name) {
    if (name == "gaussian" || name == "identity") return LinkFamily(Link::Identity);
    if (name == "logistic" || name == "logit" || name == "bernoulli") return LinkFamily(Link::Logit);
    if (name == "poisson" || name == "log") return LinkFamily(Link::Log);
    throw InputError("unknown link family '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// BasisSet
// ---------------------------------------------------------------------------

BasisSet BasisSet::make(BasisKind kind, Index dimension, int order) {
    if (dimension < 1) throw InputError("basis dimension must be positive");
    BasisSet out;
    out.kind_ = kind;
    out.dimension_ = dimension;
    out.matrices_.push_back(MatrixXd::Identity(dimension, dimension));
    switch (kind) {
        case BasisKind::Independence:
            out.order_ = 0;
            break;
        case BasisKind::Exchangeable:
            out.order_ = 1;
            out.matrices_.push_back(MatrixXd::Ones(dimension, dimension) - MatrixXd::Identity(dimension, dimension));
            break;
        case BasisKind::ArBand:
            if (order < 1) throw InputError("ar-band order must be at least 1");
            if (order >= dimension) throw InputError("ar-band order must be smaller than the source dimension");
            out.order_ = order;
            for (int r = 1; r <= order; ++r) {
                MatrixXd band = MatrixXd::Zero(dimension, dimension);
                for (Index a = 0; a + r < dimension; ++a) {
                    band(a, a + r) = 1.0;
                    band(a + r, a) = 1.0;
                }
                out.matrices_.push_back(std::move(band));
            }
            break;
    }
    return out;
}

std::string_view BasisSet::kind_name(BasisKind kind) noexcept {
    switch (kind) {
        case BasisKind::Independence: return "independence";
        case BasisKind::Exchangeable: return "exchangeable";
        case BasisKind::ArBand: return "ar";
    }
    return "independence";
}

BasisKind BasisSet::parse_kind(std::string_view name) {
    if (name == "independence") return BasisKind::Independence;
    if (name == "exchangeable") return BasisKind::Exchangeable;
    if (name == "ar" || name == "ar-band" || name == "ar1") return BasisKind::ArBand;
    throw InputError("unknown basis kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Data containers
// ---------------------------------------------------------------------------

void SourceBlock::validate() const {
    std::ostringstream where;
    where << "source (j=" << source + 1 << ", k=" << study + 1 << "): ";
    const Index n = participants();
    const Index m = dimension();
    const Index q = covariates();
    if (n < 1 || m < 1) throw InputError(where.str() + "empty response matrix");
    if (q < 1) throw InputError(where.str() + "no covariates");
    if (design.rows() != n * m) throw InputError(where.str() + "design rows do not match n * m");
    if (basis.dimension() != m || basis.size() < 1)
        throw InputError(where.str() + "basis dimension does not match response dimension");
    if (!design.allFinite()) throw InputError(where.str() + "non-finite covariate");
    for (Index i = 0; i < n; ++i)
        for (Index r = 0; r < m; ++r)
            if (!link.in_support(responses(i, r))) {
                std::ostringstream msg;
                msg << where.str() << "response " << responses(i, r) << " at participant " << i + 1
                    << ", position " << r + 1 << " is outside the " << link.name() << " support";
                throw InputError(msg.str());
            }
}

StudyDataset::StudyDataset(std::vector<std::vector<SourceBlock>> studies) : studies_(std::move(studies)) {
    if (studies_.empty() || studies_.front().empty()) throw InputError("dataset has no sources");
    const std::size_t J = studies_.front().size();
    q_ = studies_.front().front().covariates();
    for (std::size_t k = 0; k < studies_.size(); ++k) {
        if (studies_[k].size() != J) throw InputError("every study must contain the same number of sources");
        const Index nk = studies_[k].front().participants();
        for (std::size_t j = 0; j < J; ++j) {
            const SourceBlock& b = studies_[k][j];
            if (b.study != static_cast<int>(k) || b.source != static_cast<int>(j))
                throw InputError("source block indices do not match their position");
            b.validate();
            if (b.covariates() != q_) throw InputError("all sources must share the covariate count q");
            if (b.participants() != nk) throw InputError("sources within a study must share participants");
            if (b.dimension() != studies_[0][j].dimension())
                throw InputError("source dimension m_j must agree across studies");
        }
        total_n_ += nk;
    }
}

Index StudyDataset::total_dimension() const {
    Index m = 0;
    for (int j = 0; j < sources(); ++j) m += source_dimension(j);
    return m;
}

// ---------------------------------------------------------------------------
// Estimating functions
// ---------------------------------------------------------------------------

namespace {

// out = B_t * in for a row-major m x cols buffer, exploiting the 0/1 structure
// of the basis (identity, all-ones minus identity, or a symmetric band).
void apply_basis(const BasisSet& basis, Index t, const double* in, double* out, Index m, Index cols) {
    if (t == 0) {
        std::copy(in, in + m * cols, out);
        return;
    }
    if (basis.kind() == BasisKind::Exchangeable) {
        for (Index c = 0; c < cols; ++c) {
            double total = 0.0;
            for (Index a = 0; a < m; ++a) total += in[a * cols + c];
            for (Index a = 0; a < m; ++a) out[a * cols + c] = total - in[a * cols + c];
        }
        return;
    }
    std::fill(out, out + m * cols, 0.0);
    for (Index a = 0; a + t < m; ++a)
        for (Index c = 0; c < cols; ++c) {
            out[a * cols + c] += in[(a + t) * cols + c];
            out[(a + t) * cols + c] += in[a * cols + c];
        }
}

}  // namespace

SourceEvaluation evaluate_source(const SourceBlock& block, const VectorXd& beta, bool with_sensitivity) {
    const Index n = block.participants();
    const Index m = block.dimension();
    const Index q = block.covariates();
    const Index s = block.basis.size();
    if (beta.size() != q) throw InputError("beta has the wrong dimension for this source");
    if (!beta.allFinite()) throw InputError("beta is not finite");
    if (block.basis.dimension() != m) throw InputError("basis dimension does not match the source");

    const LinkFamily link = block.link;
    SourceEvaluation out;
    out.psi.per_participant.resize(n, q * s);
    // Row-major accumulator for -dPsi/dbeta; block t occupies rows t*q..t*q+q-1.
    std::vector<double> sens(with_sensitivity ? static_cast<std::size_t>(q * s * q) : 0, 0.0);

    // Per-participant scratch, row-major m x q.
    std::vector<double> x(static_cast<std::size_t>(m * q)), lhs(x.size()), rhs(x.size()), brhs(x.size());
    std::vector<double> u(static_cast<std::size_t>(m)), z(u.size()), resid(u.size()), a2(u.size());
    const double* design = block.design.data();
    const Index stride = block.design.rows();

    for (Index i = 0; i < n; ++i) {
        for (Index a = 0; a < m; ++a)
            for (Index b = 0; b < q; ++b) x[a * q + b] = design[b * stride + i * m + a];

        for (Index a = 0; a < m; ++a) {
            double eta = 0.0;
            for (Index b = 0; b < q; ++b) eta += x[a * q + b] * beta[b];
            const LinkFamily::Values h = link.evaluate(eta);
            const double mu = h.mean;
            const double v = link.variance(mu);
            if (!std::isfinite(mu) || !(v > 0.0) || !std::isfinite(v)) {
                std::ostringstream msg;
                msg << "singular variance in source (j=" << block.source + 1 << ", k=" << block.study + 1
                    << ") at participant " << i + 1 << ", coordinate " << a + 1;
                throw SingularVarianceError(msg.str(), i, a);
            }
            const double hp = h.dmean;
            const double w = 1.0 / std::sqrt(v);
            resid[a] = block.responses(i, a) - mu;
            u[a] = w * resid[a];
            // lhs = diag(h' w) X is the weighted mean derivative shared by every term.
            for (Index b = 0; b < q; ++b) lhs[a * q + b] = hp * w * x[a * q + b];
            if (with_sensitivity) {
                const double c = -0.5 * w * w * w * link.dvariance(mu) * hp;
                a2[a] = h.d2mean * w + hp * c;
                for (Index b = 0; b < q; ++b) rhs[a * q + b] = c * resid[a] * x[a * q + b] - lhs[a * q + b];
            }
        }

        for (Index t = 0; t < s; ++t) {
            apply_basis(block.basis, t, u.data(), z.data(), m, 1);
            for (Index b = 0; b < q; ++b) {
                double acc = 0.0;
                for (Index a = 0; a < m; ++a) acc += lhs[a * q + b] * z[a];
                out.psi.per_participant(i, t * q + b) = acc;
            }
            if (with_sensitivity) {
                // d psi_t / d beta = X^T diag((h'' w + h' c) * B u) X + L^T B (diag(c r) X - L)
                apply_basis(block.basis, t, rhs.data(), brhs.data(), m, q);
                double* st = sens.data() + t * q * q;
                for (Index a = 0; a < m; ++a) {
                    const double coef = a2[a] * z[a];
                    for (Index b = 0; b < q; ++b) {
                        const double xb = coef * x[a * q + b];
                        const double lb = lhs[a * q + b];
                        for (Index c = 0; c < q; ++c) st[b * q + c] -= xb * x[a * q + c] + lb * brhs[a * q + c];
                    }
                }
            }
        }
    }
    out.psi.mean = out.psi.per_participant.colwise().mean().transpose();
    if (with_sensitivity) {
        out.sensitivity.resize(q * s, q);
        for (Index r = 0; r < q * s; ++r)
            for (Index c = 0; c < q; ++c) out.sensitivity(r, c) = sens[static_cast<std::size_t>(r * q + c)] / static_cast<double>(n);
    }
    return out;
}

SourcePsi psi_source(const SourceBlock& block, const VectorXd& beta) {
    return evaluate_source(block, beta, false).psi;
}

MatrixXd sensitivity_source(const SourceBlock& block, const VectorXd& beta) {
    return evaluate_source(block, beta, true).sensitivity;
}

// ---------------------------------------------------------------------------
// QIF fit
// ---------------------------------------------------------------------------

namespace {

double weighted_merit(const VectorXd& psi, const MatrixXd& weight) { return psi.dot(weight * psi); }

}  // namespace

double qif_objective(const SourceBlock& block, const VectorXd& beta) {
    const SourcePsi psi = psi_source(block, beta);
    const MatrixXd inner = psi.per_participant.transpose() * psi.per_participant;
    return weighted_merit(psi.mean, pseudo_inverse_sym(inner).inverse);
}

QifFit qif_fit_source(const SourceBlock& block, const VectorXd& beta0, const QifOptions& options) {
    if (beta0.size() != block.covariates() || !beta0.allFinite())
        throw InputError("qif_fit_source: starting value must be a finite q-vector");
    if (block.moments() >= block.participants())
        throw InputError("qif_fit_source: need more participants than estimating functions");

    VectorXd beta = beta0;
    double grad_norm = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter <= options.max_iterations; ++iter) {
        const SourceEvaluation ev = evaluate_source(block, beta, true);
        const MatrixXd inner = ev.psi.per_participant.transpose() * ev.psi.per_participant;
        const MatrixXd weight = pseudo_inverse_sym(inner).inverse;
        const VectorXd& psi = ev.psi.mean;
        const MatrixXd& sens = ev.sensitivity;

        const VectorXd sw_psi = sens.transpose() * (weight * psi);
        grad_norm = 2.0 * sw_psi.cwiseAbs().maxCoeff();
        const double merit0 = weighted_merit(psi, weight);
        if (grad_norm <= options.tolerance) return QifFit{beta, merit0, grad_norm, iter};
        if (iter == options.max_iterations) break;

        const MatrixXd hess = sens.transpose() * weight * sens;
        const VectorXd step = solve_psd_damped(hess, sw_psi);

        double scale = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving, scale *= 0.5) {
            const VectorXd trial = beta + scale * step;
            double merit = std::numeric_limits<double>::infinity();
            try {
                merit = weighted_merit(psi_source(block, trial).mean, weight);
            } catch (const NumericalError&) {
                continue;
            }
            if (merit < merit0) {
                beta = trial;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            // No decrease is representable: the iterate is stationary to
            // working precision.
            return QifFit{beta, merit0, grad_norm, iter};
        }
    }
    throw NonConvergenceError("QIF fit did not converge", beta, grad_norm, options.max_iterations);
}

}  // namespace mfuse

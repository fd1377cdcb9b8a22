#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace mfuse {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Link / variance families
// ---------------------------------------------------------------------------

enum class Link { Identity, Logit, Log };

/// Mean function h, its first two derivatives, and the matching variance
/// function v. Dispersion is fixed at one.
class LinkFamily {
public:
    constexpr LinkFamily() = default;
    constexpr explicit LinkFamily(Link kind) : kind_(kind) {}

    constexpr Link kind() const noexcept { return kind_; }

    double mean(double eta) const;
    double dmean(double eta) const;
    double d2mean(double eta) const;

    /// h, h' and h'' at eta from a single evaluation of the inverse link.
    struct Values {
        double mean;
        double dmean;
        double d2mean;
    };
    Values evaluate(double eta) const;

    /// Variance function at mu, with mu clipped away from the boundary of
    /// the family's support (see clip()).
    double variance(double mu) const;
    /// Derivative of variance() in mu; zero where clipping is active.
    double dvariance(double mu) const;

    /// Clips mu into [1e-10, 1 - 1e-10] (logit) or [1e-10, inf) (log).
    double clip(double mu) const;

    /// True when y is a valid response for this family.
    bool in_support(double y) const;

    std::string_view name() const noexcept;
    static LinkFamily parse(std::string_view name);

    friend constexpr bool operator==(LinkFamily, LinkFamily) = default;

private:
    Link kind_ = Link::Identity;
};

inline constexpr double kMeanClip = 1e-10;

// ---------------------------------------------------------------------------
// Working-correlation basis matrices
// ---------------------------------------------------------------------------

enum class BasisKind { Independence, Exchangeable, ArBand };

/// Ordered 0/1 basis matrices for the inverse working correlation.
class BasisSet {
public:
    BasisSet() = default;

    /// order is the band order d for ArBand and is ignored otherwise.
    static BasisSet make(BasisKind kind, Index dimension, int order = 1);

    BasisKind kind() const noexcept { return kind_; }
    int order() const noexcept { return order_; }
    Index size() const noexcept { return static_cast<Index>(matrices_.size()); }
    Index dimension() const noexcept { return dimension_; }
    const MatrixXd& operator[](Index t) const { return matrices_[static_cast<std::size_t>(t)]; }
    const std::vector<MatrixXd>& matrices() const noexcept { return matrices_; }

    static std::string_view kind_name(BasisKind kind) noexcept;
    static BasisKind parse_kind(std::string_view name);

private:
    BasisKind kind_ = BasisKind::Independence;
    int order_ = 0;
    Index dimension_ = 0;
    std::vector<MatrixXd> matrices_;
};

// ---------------------------------------------------------------------------
// Data containers
// ---------------------------------------------------------------------------

/// One data source (j, k): n_k participants with m_j-dimensional responses.
/// Participant i's m_j x q design occupies rows [i*m_j, (i+1)*m_j) of design.
struct SourceBlock {
    int study = 0;   // 0-based k
    int source = 0;  // 0-based j
    MatrixXd responses;  // n_k x m_j
    MatrixXd design;     // (n_k * m_j) x q
    BasisSet basis;
    LinkFamily link;

    Index participants() const noexcept { return responses.rows(); }
    Index dimension() const noexcept { return responses.cols(); }
    Index covariates() const noexcept { return design.cols(); }
    Index moments() const noexcept { return covariates() * basis.size(); }

    auto participant_design(Index i) const { return design.middleRows(i * dimension(), dimension()); }

    /// Throws InputError on inconsistent shapes, non-finite values, or
    /// responses outside the link's support.
    void validate() const;
};

/// K independent studies, each holding J dependent source blocks over the
/// same participants.
class StudyDataset {
public:
    StudyDataset() = default;
    /// studies[k][j]; validates every block and cross-block consistency.
    explicit StudyDataset(std::vector<std::vector<SourceBlock>> studies);

    int studies() const noexcept { return static_cast<int>(studies_.size()); }
    int sources() const noexcept { return studies_.empty() ? 0 : static_cast<int>(studies_.front().size()); }
    int source_count() const noexcept { return studies() * sources(); }
    Index covariates() const noexcept { return q_; }
    Index total_participants() const noexcept { return total_n_; }
    Index study_size(int k) const { return block(0, k).participants(); }
    Index source_dimension(int j) const { return block(j, 0).dimension(); }
    Index total_dimension() const;

    const SourceBlock& block(int j, int k) const {
        return studies_[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
    }
    /// Sources are ordered k-major, j-minor.
    int linear_index(int j, int k) const noexcept { return k * sources() + j; }
    const SourceBlock& block(int linear) const { return block(linear % sources(), linear / sources()); }

    const std::vector<std::vector<SourceBlock>>& data() const noexcept { return studies_; }

private:
    std::vector<std::vector<SourceBlock>> studies_;
    Index q_ = 0;
    Index total_n_ = 0;
};

// ---------------------------------------------------------------------------
// Quadratic inference function pieces
// ---------------------------------------------------------------------------

/// Per-participant estimating functions for one source.
struct SourcePsi {
    MatrixXd per_participant;  // n_k x (q * s); row i is psi_i
    VectorXd mean;             // (q * s); Psi_jk
};

/// psi_i = stack_t  mudot^T D^{-1/2} B_t D^{-1/2} (y_i - mu_i).
SourcePsi psi_source(const SourceBlock& block, const VectorXd& beta);

/// Exact -d Psi_jk / d beta, including residual-dependent terms. (q*s) x q.
MatrixXd sensitivity_source(const SourceBlock& block, const VectorXd& beta);

/// Both of the above in a single pass.
struct SourceEvaluation {
    SourcePsi psi;
    MatrixXd sensitivity;
};
SourceEvaluation evaluate_source(const SourceBlock& block, const VectorXd& beta, bool with_sensitivity);

struct QifOptions {
    double tolerance = 1e-8;  // sup-norm of the frozen-weight gradient
    int max_iterations = 200;
};

struct QifFit {
    VectorXd beta;
    double objective = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
};

/// Psi^T {sum_i psi_i psi_i^T}^- Psi at beta.
double qif_objective(const SourceBlock& block, const VectorXd& beta);

/// Gauss-Newton with step halving on the QIF objective; the inner weight is
/// refrozen at each outer iteration. Throws NonConvergenceError.
QifFit qif_fit_source(const SourceBlock& block, const VectorXd& beta0, const QifOptions& options = {});

}  // namespace mfuse

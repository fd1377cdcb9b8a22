#pragma once

#include <vector>

#include <Eigen/Core>

namespace mfuse {

using Eigen::Index;
using Eigen::VectorXd;

struct PenaltyConfig {
    double lambda = 0.0;
    double delta = 3.0;  // MCP concavity, > 1
    double rho = 3.0;    // ADMM learning parameter

    /// Throws ConfigError unless lambda >= 0, delta > 1, rho > 0 and delta * rho > 1.
    void validate() const;
};

/// Unordered pair of sources by linear index, first < second.
struct SourcePair {
    int first = 0;
    int second = 0;
    friend bool operator==(const SourcePair&, const SourcePair&) = default;
};

/// All unordered source pairs over the J x K grid: within-study pairs and
/// every cross-study pair, in lexicographic order of linear indices.
class PairSet {
public:
    PairSet() = default;
    static PairSet complete(int sources_per_study, int studies);

    const std::vector<SourcePair>& pairs() const noexcept { return pairs_; }
    Index size() const noexcept { return static_cast<Index>(pairs_.size()); }
    int sources() const noexcept { return sources_; }
    const SourcePair& operator[](Index h) const { return pairs_[static_cast<std::size_t>(h)]; }

private:
    std::vector<SourcePair> pairs_;
    int sources_ = 0;
};

/// MCP p_delta(t; lambda) for t >= 0.
double mcp(double t, const PenaltyConfig& config);

/// Sum over pairs of mcp(||beta_a - beta_b||_1).
double penalty_total(const VectorXd& beta, const PairSet& pairs, const PenaltyConfig& config, Index q);

/// mcp(||gamma||_1) + rho/2 ||gamma - zeta||^2.
double prox_objective(const VectorXd& gamma, const VectorXd& zeta, const PenaltyConfig& config);

/// Exact global minimizer of prox_objective over gamma. Throws ConfigError
/// when delta * rho <= 1.
VectorXd gamma_prox(const VectorXd& zeta, const PenaltyConfig& config);

}  // namespace mfuse

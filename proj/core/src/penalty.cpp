#include "mfuse/penalty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mfuse/error.hpp"

namespace mfuse {

void PenaltyConfig::validate() const {
    std::ostringstream msg;
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) msg << "lambda must be a nonnegative finite number";
    else if (!(delta > 1.0)) msg << "delta must exceed 1";
    else if (!(rho > 0.0)) msg << "rho must be positive";
    else if (!(delta * rho > 1.0)) msg << "delta must exceed 1/rho (got delta=" << delta << ", rho=" << rho << ")";
    else return;
    throw ConfigError(msg.str());
}

PairSet PairSet::complete(int sources_per_study, int studies) {
    if (sources_per_study < 1 || studies < 1) throw InputError("pair set needs at least one source");
    PairSet out;
    out.sources_ = sources_per_study * studies;
    // Linear index k*J + j: a < b covers within-study pairs j < j' and every
    // cross-study pair with k < k'.
    for (int a = 0; a < out.sources_; ++a)
        for (int b = a + 1; b < out.sources_; ++b) out.pairs_.push_back({a, b});
    return out;
}

double mcp(double t, const PenaltyConfig& config) {
    const double lambda = config.lambda;
    if (lambda == 0.0) return 0.0;
    t = std::abs(t);
    const double knot = config.delta * lambda;
    if (t >= knot) return 0.5 * config.delta * lambda * lambda;
    return lambda * t - t * t / (2.0 * config.delta);
}

double penalty_total(const VectorXd& beta, const PairSet& pairs, const PenaltyConfig& config, Index q) {
    if (beta.size() != pairs.sources() * q) throw InputError("penalty_total: beta has the wrong dimension");
    double total = 0.0;
    for (const SourcePair& p : pairs.pairs())
        total += mcp((beta.segment(p.first * q, q) - beta.segment(p.second * q, q)).lpNorm<1>(), config);
    return total;
}

double prox_objective(const VectorXd& gamma, const VectorXd& zeta, const PenaltyConfig& config) {
    return mcp(gamma.lpNorm<1>(), config) + 0.5 * config.rho * (gamma - zeta).squaredNorm();
}

VectorXd gamma_prox(const VectorXd& zeta, const PenaltyConfig& config) {
    // The subproblem is well posed whenever delta * rho > 1, also for delta <= 1.
    if (!(config.lambda >= 0.0) || !std::isfinite(config.lambda) || !(config.rho > 0.0) || !(config.delta > 0.0) ||
        !(config.delta * config.rho > 1.0)) {
        std::ostringstream msg;
        msg << "gamma_prox needs lambda >= 0 and delta * rho > 1 (got lambda=" << config.lambda
            << ", delta=" << config.delta << ", rho=" << config.rho << ")";
        throw ConfigError(msg.str());
    }
    const Index q = zeta.size();
    const double lambda = config.lambda;
    const double delta = config.delta;
    const double rho = config.rho;

    const VectorXd a = zeta.cwiseAbs();
    std::vector<Index> order(static_cast<std::size_t>(q));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return a[x] > a[y]; });

    // Every minimizer has |gamma| = (|zeta| - tau)_+ for a threshold tau in
    // [0, lambda/rho]: tau = 0 in the flat region, tau = (lambda - T/delta)/rho
    // on the concave part where T = ||gamma||_1. Enumerate tau for every
    // active-set size plus breakpoints, and compare objectives exactly.
    std::vector<double> taus{0.0, lambda / rho};
    double top_sum = 0.0;
    for (Index k = 1; k <= q; ++k) {
        top_sum += a[order[static_cast<std::size_t>(k - 1)]];
        taus.push_back(a[order[static_cast<std::size_t>(k - 1)]]);
        const double den = 1.0 - static_cast<double>(k) / (rho * delta);
        if (std::abs(den) > 1e-14) {
            const double total = (top_sum - static_cast<double>(k) * lambda / rho) / den;
            if (total > 0.0 && total < delta * lambda) taus.push_back((lambda - total / delta) / rho);
        }
    }

    VectorXd best = VectorXd::Zero(q);
    double best_value = prox_objective(best, zeta, config);
    Index best_nnz = 0;
    VectorXd candidate(q);
    for (double tau : taus) {
        if (!(tau >= 0.0) || !std::isfinite(tau)) continue;
        for (Index r = 0; r < q; ++r) {
            const double g = a[r] - tau;
            candidate[r] = g > 0.0 ? std::copysign(g, zeta[r]) : 0.0;
        }
        const double value = prox_objective(candidate, zeta, config);
        const Index nnz = (candidate.array() != 0.0).count();
        const double slack = 1e-14 * std::max(1.0, std::abs(best_value));
        if (value < best_value - slack || (value <= best_value + slack && nnz < best_nnz)) {
            best = candidate;
            best_value = value;
            best_nnz = nnz;
        }
    }
    return best;
}

}  // namespace mfuse

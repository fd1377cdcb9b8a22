#include "mfuse/path.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mfuse/error.hpp"

namespace mfuse {

double gmm_bic(const StackedSystem& system, const VectorXd& beta_hat, int groups) {
    const StackedEvaluation ev = evaluate_stacked(system, beta_hat, false);
    const WeightedQuadratic quad(ev.psi.mean, ev.covariance);
    const double N = static_cast<double>(system.participants());
    const double dof = static_cast<double>(system.total_dim() - static_cast<Index>(groups) * system.covariates());
    return N * 2.0 * quad.value() - std::log(N) * dof;
}

SolutionPath run_path(const StackedSystem& system, const PairSet& pairs, const std::vector<double>& lambdas,
                      const PenaltyConfig& base, const AdmmConfig& admm, const PathOptions& options,
                      const VectorXd* start) {
    if (lambdas.empty()) throw InputError("lambda grid is empty");
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
        if (!(lambdas[l] >= 0.0)) throw InputError("lambda values must be nonnegative");
        if (l > 0 && lambdas[l] < lambdas[l - 1]) throw InputError("lambda grid must be ascending");
    }

    SolutionPath path;
    path.lambdas = lambdas;
    path.initial = start ? *start : qif_initial_estimates(system, options.qif);

    VectorXd warm = path.initial;
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
        PenaltyConfig penalty = base;
        penalty.lambda = lambdas[l];
        TraceSink sink;
        if (options.trace) sink = [&, l](const IterationRecord& r) { options.trace(l, r); };

        const SolverState state = admm_solve(system, pairs, penalty, admm, warm, sink);
        PathRecord rec;
        rec.lambda = lambdas[l];
        rec.beta = state.beta;
        rec.partition = extract_partition(state, pairs, admm.fuse_epsilon);
        rec.groups = rec.partition.groups();
        rec.bic = gmm_bic(system, state.beta, rec.groups);
        rec.converged = state.converged;
        rec.iterations = state.iterations;
        rec.primal_residual = state.primal_residual;
        rec.dual_residual = state.dual_residual;
        path.records.push_back(std::move(rec));
        warm = state.beta;
    }

    auto pick = [&](bool exclude) {
        std::size_t best = path.records.size();
        double best_bic = std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < path.records.size(); ++l) {
            const PathRecord& r = path.records[l];
            if (!r.converged) continue;
            if (exclude && r.groups == 1) continue;
            if (r.bic <= best_bic) {
                best_bic = r.bic;
                best = l;
            }
        }
        return best;
    };

    std::size_t chosen = pick(options.exclude_homogeneous);
    if (chosen == path.records.size() && options.exclude_homogeneous) {
        chosen = pick(false);
        path.exclusion_fallback = true;
    }
    if (chosen == path.records.size()) {
        std::ostringstream msg;
        msg << "no lambda on the path converged (" << path.records.size() << " records; last residuals "
            << path.records.back().primal_residual << ", " << path.records.back().dual_residual << ")";
        throw NumericalError(msg.str());
    }
    path.selected = chosen;
    return path;
}

double suggest_lambda_max(const VectorXd& beta, const PairSet& pairs, Index q) {
    double top = 0.0;
    for (const SourcePair& p : pairs.pairs())
        top = std::max(top, (beta.segment(p.first * q, q) - beta.segment(p.second * q, q)).lpNorm<1>());
    return top;
}

std::vector<double> arithmetic_grid(double step, int first, int last) {
    std::vector<double> out;
    for (int a = first; a <= last; ++a) out.push_back(step * a);
    return out;
}

}  // namespace mfuse

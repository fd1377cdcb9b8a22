#include "mfuse/admm.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mfuse/error.hpp"
#include "mfuse/linalg.hpp"

namespace mfuse {

namespace {

class UnionFind {
public:
    explicit UnionFind(int n) : parent_(static_cast<std::size_t>(n)) {
        std::iota(parent_.begin(), parent_.end(), 0);
    }
    int find(int x) {
        while (parent_[static_cast<std::size_t>(x)] != x) {
            parent_[static_cast<std::size_t>(x)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(x)])];
            x = parent_[static_cast<std::size_t>(x)];
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[static_cast<std::size_t>(b)] = a;
    }

private:
    std::vector<int> parent_;
};

std::vector<int> fused_components(const MatrixXd& gamma, const PairSet& pairs, double eps) {
    UnionFind uf(pairs.sources());
    for (Index h = 0; h < pairs.size(); ++h)
        if (gamma.col(h).cwiseAbs().maxCoeff() <= eps) uf.unite(pairs[h].first, pairs[h].second);
    std::vector<int> root(static_cast<std::size_t>(pairs.sources()));
    for (int l = 0; l < pairs.sources(); ++l) root[static_cast<std::size_t>(l)] = uf.find(l);
    return root;
}

int count_groups(const std::vector<int>& root) {
    int g = 0;
    for (std::size_t l = 0; l < root.size(); ++l)
        if (root[l] == static_cast<int>(l)) ++g;
    return g;
}

}  // namespace

void AdmmConfig::validate() const {
    if (!(tol_primal > 0.0) || !(tol_dual > 0.0)) throw ConfigError("ADMM tolerances must be positive");
    if (max_iter < 1) throw ConfigError("ADMM max_iter must be positive");
    if (!(fuse_epsilon >= 0.0)) throw ConfigError("fuse_epsilon must be nonnegative");
}

AdmmSolver::AdmmSolver(const StackedSystem& system, const PairSet& pairs, const PenaltyConfig& penalty,
                       const AdmmConfig& config, const VectorXd& beta_init)
    : system_(system), pairs_(pairs), penalty_(penalty), config_(config) {
    penalty_.validate();
    config_.validate();
    if (pairs_.sources() != system_.sources()) throw InputError("pair set does not match the stacked system");
    if (beta_init.size() != system_.parameter_dim() || !beta_init.allFinite())
        throw InputError("admm: beta_init must be a finite JKq-vector");

    const Index q = system_.covariates();
    const int L = system_.sources();
    MatrixXd graph = MatrixXd::Zero(L, L);
    for (const SourcePair& p : pairs_.pairs()) {
        graph(p.first, p.first) += 1.0;
        graph(p.second, p.second) += 1.0;
        graph(p.first, p.second) -= 1.0;
        graph(p.second, p.first) -= 1.0;
    }
    laplacian_ = MatrixXd::Zero(L * q, L * q);
    for (int a = 0; a < L; ++a)
        for (int b = 0; b < L; ++b)
            if (graph(a, b) != 0.0) laplacian_.block(a * q, b * q, q, q) = graph(a, b) * MatrixXd::Identity(q, q);

    state_.beta = beta_init;
    state_.gamma = pair_differences(beta_init);
    state_.multipliers = MatrixXd::Zero(q, pairs_.size());
}

MatrixXd AdmmSolver::pair_differences(const VectorXd& beta) const {
    const Index q = system_.covariates();
    MatrixXd d(q, pairs_.size());
    for (Index h = 0; h < pairs_.size(); ++h)
        d.col(h) = beta.segment(pairs_[h].first * q, q) - beta.segment(pairs_[h].second * q, q);
    return d;
}

VectorXd AdmmSolver::apply_transpose(const MatrixXd& per_pair) const {
    const Index q = system_.covariates();
    VectorXd out = VectorXd::Zero(system_.parameter_dim());
    for (Index h = 0; h < pairs_.size(); ++h) {
        out.segment(pairs_[h].first * q, q) += per_pair.col(h);
        out.segment(pairs_[h].second * q, q) -= per_pair.col(h);
    }
    return out;
}

double AdmmSolver::augmented_merit(const VectorXd& beta, const MatrixXd& weight) const {
    const VectorXd psi = stack_psi(system_, beta).mean;
    const MatrixXd r = pair_differences(beta) - state_.gamma;
    return 0.5 * psi.dot(weight * psi) + (state_.multipliers.array() * r.array()).sum() +
           0.5 * penalty_.rho * r.squaredNorm();
}

bool AdmmSolver::step() {
    const double rho = penalty_.rho;
    const Index q = system_.covariates();
    detail_ = StepDetail{};
    detail_.multipliers_before = state_.multipliers;

    // beta-update: one damped Gauss-Newton step with V frozen at the iterate.
    const StackedEvaluation ev = evaluate_stacked(system_, state_.beta, true);
    const MatrixXd weight = pseudo_inverse_sym(ev.covariance).inverse;
    const VectorXd w_psi = weight * ev.psi.mean;
    state_.covariance = ev.covariance;
    state_.objective = 0.5 * ev.psi.mean.dot(w_psi);
    for (Index h = 0; h < pairs_.size(); ++h) {
        const double l1 = (state_.beta.segment(pairs_[h].first * q, q) -
                           state_.beta.segment(pairs_[h].second * q, q)).lpNorm<1>();
        state_.objective += mcp(l1, penalty_);
    }

    const MatrixXd resid0 = pair_differences(state_.beta) - state_.gamma;
    const VectorXd grad = -(ev.sensitivity.transpose() * w_psi) + apply_transpose(state_.multipliers + rho * resid0);
    const MatrixXd hess = ev.sensitivity.transpose() * weight * ev.sensitivity + rho * laplacian_;
    const VectorXd direction = solve_psd_damped(hess, -grad);

    const double merit0 = 0.5 * ev.psi.mean.dot(w_psi) + (state_.multipliers.array() * resid0.array()).sum() +
                          0.5 * rho * resid0.squaredNorm();
    double scale = 1.0;
    for (int halving = 0; halving < 40; ++halving, scale *= 0.5) {
        const VectorXd trial = state_.beta + scale * direction;
        double merit = std::numeric_limits<double>::infinity();
        try {
            merit = augmented_merit(trial, weight);
        } catch (const NumericalError&) {
            continue;
        }
        if (merit < merit0) {
            state_.beta = trial;
            detail_.merit_trials.emplace_back(merit0, merit);
            break;
        }
    }

    // gamma-update and multiplier update, pair by pair.
    const MatrixXd diffs = pair_differences(state_.beta);
    MatrixXd gamma_new(q, pairs_.size());
    for (Index h = 0; h < pairs_.size(); ++h)
        gamma_new.col(h) = gamma_prox(diffs.col(h) + state_.multipliers.col(h) / rho, penalty_);
    detail_.pair_residuals = diffs - gamma_new;
    state_.multipliers += rho * detail_.pair_residuals;

    double primal = 0.0;
    double dual = 0.0;
    for (Index h = 0; h < pairs_.size(); ++h) {
        primal = std::max(primal, detail_.pair_residuals.col(h).norm());
        dual = std::max(dual, (gamma_new.col(h) - state_.gamma.col(h)).norm());
    }
    dual *= rho;
    state_.gamma = std::move(gamma_new);
    state_.primal_residual = primal;
    state_.dual_residual = dual;
    ++state_.iterations;

    if (!state_.beta.allFinite() || !std::isfinite(primal) || !std::isfinite(dual) || !state_.multipliers.allFinite()) {
        std::ostringstream msg;
        msg << "ADMM diverged at iteration " << state_.iterations << " (primal " << primal << ", dual " << dual << ")";
        throw DivergenceError(msg.str(), state_.iterations, primal, dual);
    }
    state_.converged = primal <= config_.tol_primal && dual <= config_.tol_dual;
    return state_.converged;
}

SolverState admm_solve(const StackedSystem& system, const PairSet& pairs, const PenaltyConfig& penalty,
                       const AdmmConfig& config, const VectorXd& beta_init, const TraceSink& trace) {
    AdmmSolver solver(system, pairs, penalty, config, beta_init);
    for (int iter = 0; iter < config.max_iter; ++iter) {
        const bool done = solver.step();
        if (trace) {
            const SolverState& s = solver.state();
            trace(IterationRecord{s.iterations, s.objective, s.primal_residual, s.dual_residual,
                                  count_groups(fused_components(s.gamma, pairs, config.fuse_epsilon))});
        }
        if (done) break;
    }
    return solver.state();
}

PartitionMap extract_partition(const SolverState& state, const PairSet& pairs, double fuse_epsilon) {
    const Index q = state.gamma.rows();
    return PartitionMap(fused_components(state.gamma, pairs, fuse_epsilon), q);
}

VectorXd representative_beta(const SolverState& state, const PartitionMap& partition) {
    const Index q = partition.covariates();
    VectorXd theta = VectorXd::Zero(partition.groups() * q);
    std::vector<int> count(static_cast<std::size_t>(partition.groups()), 0);
    for (int l = 0; l < partition.sources(); ++l) {
        theta.segment(partition.group_of(l) * q, q) += state.beta.segment(l * q, q);
        ++count[static_cast<std::size_t>(partition.group_of(l))];
    }
    for (int g = 0; g < partition.groups(); ++g) theta.segment(g * q, q) /= count[static_cast<std::size_t>(g)];
    return theta;
}

}  // namespace mfuse

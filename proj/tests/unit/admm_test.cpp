#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "mfuse/admm.hpp"
#include "mfuse/error.hpp"
#include "mfuse/path.hpp"

using namespace mfuse;
using testing::vec;

namespace {

struct Fixture {
    std::shared_ptr<const StudyDataset> data;
    std::unique_ptr<StackedSystem> system;
    PairSet pairs;
    VectorXd init;
};

// Four sources in two studies; sources 0, 1, 2 share one model, source 3 differs.
Fixture make_fixture(std::uint64_t seed, Index n = 150) {
    std::mt19937_64 rng(seed);
    const VectorXd a = vec({0.3, -0.4}), b = vec({-0.6, 0.5});
    Fixture f;
    f.data = testing::random_dataset(rng, Link::Log, BasisKind::ArBand, 2, 2, 4, 2, n, {a, a, a, b});
    f.system = std::make_unique<StackedSystem>(f.data);
    f.pairs = PairSet::complete(2, 2);
    f.init = qif_initial_estimates(*f.system);
    return f;
}

SolverState state_with_gamma(const MatrixXd& gamma) {
    SolverState s;
    s.gamma = gamma;
    return s;
}

}  // namespace

TEST_CASE("multiplier update identity holds at every iteration") {
    const Fixture f = make_fixture(1);
    const PenaltyConfig penalty{0.15, 3.0, 3.0};
    AdmmSolver solver(*f.system, f.pairs, penalty, AdmmConfig{}, f.init);
    const Index q = 2;
    for (int it = 0; it < 40; ++it) {
        const bool done = solver.step();
        const SolverState& s = solver.state();
        const auto& d = solver.last_step();
        for (Index h = 0; h < f.pairs.size(); ++h) {
            const SourcePair& p = f.pairs[h];
            const VectorXd resid = s.beta.segment(p.first * q, q) - s.beta.segment(p.second * q, q) - s.gamma.col(h);
            CHECK(d.pair_residuals.col(h) == resid);
            const VectorXd change = s.multipliers.col(h) - d.multipliers_before.col(h);
            CHECK((change - penalty.rho * resid).cwiseAbs().maxCoeff() <=
                  1e-14 * std::max(1.0, s.multipliers.col(h).cwiseAbs().maxCoeff()));
        }
        for (const auto& [before, after] : d.merit_trials) CHECK(after <= before);
        if (done) break;
    }
}

TEST_CASE("lambda zero gives singletons and an unpenalized stationary point") {
    const Fixture f = make_fixture(2);
    const PenaltyConfig penalty{0.0, 3.0, 3.0};
    const SolverState s = admm_solve(*f.system, f.pairs, penalty, AdmmConfig{}, f.init);
    REQUIRE(s.converged);
    const PartitionMap p = extract_partition(s, f.pairs, 0.0);
    CHECK(p.groups() == 4);
    const StackedEvaluation e = evaluate_stacked(*f.system, s.beta, true);
    const VectorXd grad = weighted_quadratic(e.psi.mean, e.covariance).gradient(e.sensitivity);
    CHECK(grad.cwiseAbs().maxCoeff() <= 1e-4);
}

TEST_CASE("a very large lambda fuses everything") {
    const Fixture f = make_fixture(3);
    const double top = suggest_lambda_max(f.init, f.pairs, 2);
    const PenaltyConfig penalty{10.0 * top, 3.0, 3.0};
    const SolverState s = admm_solve(*f.system, f.pairs, penalty, AdmmConfig{}, f.init);
    CHECK(s.converged);
    CHECK(s.gamma.isZero(0.0));
    CHECK(extract_partition(s, f.pairs, 0.0).groups() == 1);
}

TEST_CASE("moderate lambda separates the distinct source") {
    const Fixture f = make_fixture(4, 400);
    const SolverState s = admm_solve(*f.system, f.pairs, PenaltyConfig{0.3, 3.0, 3.0}, AdmmConfig{}, f.init);
    CHECK(s.converged);
    CHECK(extract_partition(s, f.pairs, 0.0).signature() == "1-1-1-2");
}

TEST_CASE("solver is deterministic") {
    const Fixture f = make_fixture(5);
    const PenaltyConfig penalty{0.2, 3.0, 3.0};
    std::vector<IterationRecord> trace;
    const SolverState a = admm_solve(*f.system, f.pairs, penalty, AdmmConfig{}, f.init,
                                     [&](const IterationRecord& r) { trace.push_back(r); });
    const SolverState b = admm_solve(*f.system, f.pairs, penalty, AdmmConfig{}, f.init);
    CHECK(a.beta == b.beta);
    CHECK(a.gamma == b.gamma);
    CHECK(a.iterations == b.iterations);
    CHECK(static_cast<int>(trace.size()) == a.iterations);
    CHECK(trace.back().iteration == a.iterations);
}

TEST_CASE("solver rejects inconsistent configuration") {
    const Fixture f = make_fixture(6, 40);
    CHECK_THROWS_AS(admm_solve(*f.system, f.pairs, PenaltyConfig{0.1, 1.2, 0.5}, AdmmConfig{}, f.init), ConfigError);
    AdmmConfig bad;
    bad.max_iter = 0;
    CHECK_THROWS_AS(admm_solve(*f.system, f.pairs, PenaltyConfig{0.1, 3, 3}, bad, f.init), ConfigError);
}

TEST_CASE("hitting the iteration cap is reported, not thrown") {
    const Fixture f = make_fixture(7);
    AdmmConfig cap;
    cap.max_iter = 2;
    const SolverState s = admm_solve(*f.system, f.pairs, PenaltyConfig{0.2, 3, 3}, cap, f.init);
    CHECK_FALSE(s.converged);
    CHECK(s.iterations == 2);
}

TEST_CASE("partition extraction closes fusion transitively") {
    const PairSet h = PairSet::complete(3, 1);  // pairs (0,1), (0,2), (1,2)
    MatrixXd gamma = MatrixXd::Ones(2, 3);
    CHECK(extract_partition(state_with_gamma(gamma), h, 0.0).groups() == 3);
    gamma.col(0).setZero();  // A~B
    gamma.col(2).setZero();  // B~C, while A,C stays nonzero
    const PartitionMap p = extract_partition(state_with_gamma(gamma), h, 0.0);
    CHECK(p.groups() == 1);
    CHECK(extract_partition(state_with_gamma(MatrixXd::Zero(2, 3)), h, 0.0).groups() == 1);
    gamma = MatrixXd::Constant(2, 3, 1e-9);
    CHECK(extract_partition(state_with_gamma(gamma), h, 1e-8).groups() == 1);
    CHECK(extract_partition(state_with_gamma(gamma), h, 0.0).groups() == 3);
}

TEST_CASE("partition extraction always yields a valid partition") {
    std::mt19937_64 rng(8);
    std::bernoulli_distribution zero(0.3);
    for (int trial = 0; trial < 200; ++trial) {
        const int J = 1 + trial % 4, K = 1 + trial % 3;
        const PairSet h = PairSet::complete(J, K);
        MatrixXd gamma(2, h.size());
        for (Index p = 0; p < h.size(); ++p) gamma.col(p) = zero(rng) ? VectorXd::Zero(2) : VectorXd::Ones(2);
        const PartitionMap p = extract_partition(state_with_gamma(gamma), h, 0.0);
        REQUIRE(p.sources() == J * K);
        std::vector<int> count(static_cast<std::size_t>(p.groups()), 0);
        for (int l = 0; l < p.sources(); ++l) {
            REQUIRE(p.group_of(l) >= 0);
            REQUIRE(p.group_of(l) < p.groups());
            ++count[static_cast<std::size_t>(p.group_of(l))];
        }
        for (int c : count) CHECK(c > 0);
        // canonical numbering by smallest member
        int seen = -1;
        for (int l = 0; l < p.sources(); ++l) {
            CHECK(p.group_of(l) <= seen + 1);
            seen = std::max(seen, p.group_of(l));
        }
        // every zero pair lies within one group
        for (Index e = 0; e < h.size(); ++e)
            if (gamma.col(e).isZero(0.0)) CHECK(p.group_of(h[e].first) == p.group_of(h[e].second));
    }
}

TEST_CASE("representative beta averages members") {
    SolverState s;
    s.beta = vec({1, 0, 0, 1, 3, 3});
    const PartitionMap p({1, 1, 2}, 2);
    CHECK(representative_beta(s, p) == vec({0.5, 0.5, 3, 3}));
    CHECK(representative_beta(s, PartitionMap::singletons(3, 2)) == s.beta);
}

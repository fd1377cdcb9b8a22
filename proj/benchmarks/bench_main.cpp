#include <algorithm>
#include <random>

#include <benchmark/benchmark.h>

#include "mfuse/admm.hpp"
#include "mfuse/gmm.hpp"
#include "mfuse/model.hpp"
#include "mfuse/penalty.hpp"
#include "mfuse/sim.hpp"

using namespace mfuse;

namespace {

SimDesign bench_design(Link link, int studies, int sources, Index m, Index n) {
    SimDesign d;
    d.studies = studies;
    d.sources = sources;
    d.covariates = 3;
    d.source_dims.assign(static_cast<std::size_t>(sources), m);
    d.study_sizes.assign(static_cast<std::size_t>(studies), n);
    const int groups = std::min(2, studies * sources);
    for (int l = 0; l < studies * sources; ++l) d.assignment.push_back(1 + l % groups);
    MatrixXd theta(3, 2);
    theta << 0.1, -0.4, -0.3, 0.1, -0.6, -0.2;
    d.theta = theta.leftCols(groups);
    d.link = LinkFamily(link);
    d.lambdas = {0.0};
    d.validate();
    return d;
}

void BM_EvaluateSource(benchmark::State& state) {
    const Index m = state.range(0);
    const StudyDataset data = simulate_dataset(bench_design(Link::Log, 1, 1, m, 400), 0);
    const SourceBlock& b = data.block(0);
    const VectorXd beta = VectorXd::Constant(3, 0.05);
    for (auto _ : state) benchmark::DoNotOptimize(evaluate_source(b, beta, true));
    state.SetItemsProcessed(state.iterations() * b.participants());
}
BENCHMARK(BM_EvaluateSource)->Arg(4)->Arg(10)->Arg(20);

void BM_GammaProx(benchmark::State& state) {
    const Index q = state.range(0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    std::vector<VectorXd> inputs(256, VectorXd(q));
    for (VectorXd& z : inputs)
        for (Index r = 0; r < q; ++r) z[r] = u(rng);
    const PenaltyConfig c{0.5, 3.0, 3.0};
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(gamma_prox(inputs[i++ % inputs.size()], c));
}
BENCHMARK(BM_GammaProx)->Arg(1)->Arg(3)->Arg(6);

void BM_AdmmSolve(benchmark::State& state) {
    const auto data =
        std::make_shared<const StudyDataset>(simulate_dataset(bench_design(Link::Logit, 2, 4, 10, 400), 0));
    const StackedSystem system(data);
    const PairSet pairs = PairSet::complete(4, 2);
    const VectorXd init = qif_initial_estimates(system);
    const PenaltyConfig penalty{0.3, 3.0, 3.0};
    int iterations = 0;
    for (auto _ : state) {
        const SolverState s = admm_solve(system, pairs, penalty, AdmmConfig{}, init);
        iterations = s.iterations;
        benchmark::DoNotOptimize(s.beta.data());
    }
    state.counters["admm_iterations"] = iterations;
}
BENCHMARK(BM_AdmmSolve)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();

#include <random>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "doctest.h"
#include "helpers.hpp"
#include "mfuse/error.hpp"
#include "mfuse/gmm.hpp"
#include "mfuse/partition.hpp"

using namespace mfuse;
using testing::vec;

namespace {

std::shared_ptr<const StudyDataset> small_dataset(std::uint64_t seed, Link link, int J, int K, Index n = 60) {
    std::mt19937_64 rng(seed);
    std::vector<VectorXd> betas;
    for (int l = 0; l < J * K; ++l) betas.push_back(vec({0.2 - 0.1 * l, 0.3}));
    return testing::random_dataset(rng, link, BasisKind::ArBand, J, K, 3, 2, n, betas);
}

}  // namespace

TEST_CASE("stacked psi is the per-source mean weighted by n_k / N") {
    const auto data = small_dataset(1, Link::Log, 2, 2);
    const StackedSystem system(data);
    const VectorXd beta = vec({0.1, 0.2, -0.1, 0.3, 0.0, 0.1, 0.2, 0.2});
    const StackedPsi psi = stack_psi(system, beta);
    const double N = static_cast<double>(system.participants());
    for (int l = 0; l < system.sources(); ++l) {
        const SourceBlock& b = data->block(l);
        const VectorXd direct = psi_source(b, beta.segment(l * 2, 2)).mean;
        const VectorXd block = psi.mean.segment(system.offset(l), system.moments(l));
        CHECK((block - (b.participants() / N) * direct).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("single study stacking scales by one") {
    const auto data = small_dataset(2, Link::Logit, 3, 1);
    const StackedSystem system(data);
    const VectorXd beta = VectorXd::Constant(6, 0.1);
    const StackedPsi psi = stack_psi(system, beta);
    for (int l = 0; l < 3; ++l)
        CHECK(psi.mean.segment(system.offset(l), system.moments(l)) == psi_source(data->block(l), beta.segment(2 * l, 2)).mean);
}

TEST_CASE("participant vectors are zero outside their study") {
    const auto data = small_dataset(3, Link::Identity, 2, 2, 30);
    const StackedSystem system(data);
    const StackedPsi psi = stack_psi(system, VectorXd::Zero(8));
    const VectorXd v = psi.participant(system, 1, 4);
    CHECK(v.head(system.study_offset(1)).isZero(0.0));
    CHECK(v.size() == system.total_dim());
}

TEST_CASE("sample covariance is symmetric PSD with zero cross-study blocks") {
    for (std::uint64_t seed : {4u, 5u, 6u}) {
        const auto data = small_dataset(seed, seed == 5 ? Link::Logit : Link::Log, 2, 3);
        const StackedSystem system(data);
        const MatrixXd v = sample_covariance(system, stack_psi(system, VectorXd::Constant(12, 0.1)));
        CHECK(v == v.transpose());
        const VectorXd eig = Eigen::SelfAdjointEigenSolver<MatrixXd>(v).eigenvalues();
        CHECK(eig.minCoeff() >= -1e-10 * eig.maxCoeff());
        for (int k = 0; k < 3; ++k)
            for (int k2 = 0; k2 < 3; ++k2) {
                if (k == k2) continue;
                CHECK(v.block(system.study_offset(k), system.study_offset(k2), system.study_dim(k), system.study_dim(k2))
                          .isZero(0.0));
            }
        // within-study cross-source blocks carry the dependence
        CHECK_FALSE(v.block(system.offset(0), system.offset(1), system.moments(0), system.moments(1)).isZero(0.0));
    }
}

TEST_CASE("weighted quadratic basics") {
    CHECK(weighted_quadratic(VectorXd::Zero(3), MatrixXd::Identity(3, 3)).value() == 0.0);
    CHECK(weighted_quadratic(vec({3, 4}), MatrixXd::Identity(2, 2)).value() == doctest::Approx(12.5));
    MatrixXd asym = MatrixXd::Identity(2, 2);
    asym(0, 1) = 1e-3;
    CHECK_THROWS_AS(weighted_quadratic(vec({1, 1}), asym), InputError);
}

TEST_CASE("weighted quadratic on a rank-deficient weight restricts to the range") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> normal;
    MatrixXd basis(5, 3);
    for (Index i = 0; i < basis.size(); ++i) basis.data()[i] = normal(rng);
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(basis).householderQ() * MatrixXd::Identity(5, 3);
    const VectorXd lambda = vec({2.0, 0.5, 3.0});
    const MatrixXd v = q * lambda.asDiagonal() * q.transpose();
    const VectorXd coords = vec({1.0, -2.0, 0.5});
    const VectorXd psi = q * coords;
    double brute = 0.0;
    for (Index r = 0; r < 3; ++r) brute += coords[r] * coords[r] / lambda[r];
    const WeightedQuadratic wq = weighted_quadratic(psi, v);
    CHECK(wq.rank() == 3);
    CHECK(wq.value() == doctest::Approx(0.5 * brute).epsilon(1e-10));
}

TEST_CASE("weighted quadratic is invariant to a joint permutation") {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> normal;
    MatrixXd a(4, 6);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
    const MatrixXd v = a * a.transpose();
    const VectorXd psi = vec({0.3, -1, 2, 0.1});
    Eigen::PermutationMatrix<Eigen::Dynamic> p(4);
    p.indices() << 2, 0, 3, 1;
    const MatrixXd pv = p * v * p.transpose();
    CHECK(weighted_quadratic(p * psi, pv).value() == doctest::Approx(weighted_quadratic(psi, v).value()).epsilon(1e-12));
}

TEST_CASE("weighted quadratic gradient matches finite differences with frozen weight") {
    const auto data = small_dataset(12, Link::Log, 2, 1, 80);
    const StackedSystem system(data);
    const VectorXd beta = vec({0.1, 0.2, -0.1, 0.3});
    const StackedEvaluation e = evaluate_stacked(system, beta, true);
    const WeightedQuadratic wq = weighted_quadratic(e.psi.mean, e.covariance);
    const VectorXd g = wq.gradient(e.sensitivity);
    for (Index c = 0; c < beta.size(); ++c) {
        VectorXd up = beta, down = beta;
        up[c] += 1e-6;
        down[c] -= 1e-6;
        const VectorXd pu = stack_psi(system, up).mean, pd = stack_psi(system, down).mean;
        const double fd = (0.5 * pu.dot(wq.weight() * pu) - 0.5 * pd.dot(wq.weight() * pd)) / 2e-6;
        CHECK(g[c] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("partition expansion replicates group parameters") {
    const PartitionMap p({3, 3, 1, 3, 2}, 2);
    CHECK(p.groups() == 3);
    CHECK(p.assignment() == std::vector<int>{0, 0, 1, 0, 2});
    CHECK(p.signature() == "1-1-2-1-3");
    const MatrixXd pi = p.membership();
    CHECK(pi.rowwise().sum() == VectorXd::Ones(5));
    const VectorXd theta = vec({1, 2, 3, 4, 5, 6});
    const VectorXd beta = p.expand(theta);
    CHECK(beta == p.expansion() * theta);
    for (int l = 0; l < 5; ++l) CHECK(beta.segment(2 * l, 2) == theta.segment(2 * p.group_of(l), 2));
}

TEST_CASE("stacked block depends only on its own group") {
    const auto data = small_dataset(13, Link::Logit, 2, 2);
    const StackedSystem system(data);
    const PartitionMap p({1, 2, 1, 2}, 2);
    const VectorXd theta = vec({0.1, 0.2, -0.3, 0.4});
    VectorXd moved = theta;
    moved.segment(2, 2) += vec({0.5, -0.5});
    const VectorXd a = stack_psi(system, p.expand(theta)).mean, b = stack_psi(system, p.expand(moved)).mean;
    for (int l : {0, 2}) CHECK(a.segment(system.offset(l), system.moments(l)) == b.segment(system.offset(l), system.moments(l)));
    CHECK(a.segment(system.offset(1), system.moments(1)) != b.segment(system.offset(1), system.moments(1)));
}

TEST_CASE("heterogeneous GMM with identity link and independence basis is per-source least squares") {
    std::mt19937_64 rng(14);
    std::vector<VectorXd> betas{vec({1, 0.5}), vec({-1, 0.2}), vec({0.3, -0.7})};
    const auto data = testing::random_dataset(rng, Link::Identity, BasisKind::Independence, 3, 1, 3, 2, 70, betas);
    const StackedSystem system(data);
    const GmmFit fit = gmm_estimate(system, PartitionMap::singletons(3, 2), VectorXd::Zero(6));
    for (int l = 0; l < 3; ++l) {
        const SourceBlock& b = data->block(l);
        const VectorXd y = Eigen::Map<const VectorXd>(MatrixXd(b.responses.transpose()).data(), b.responses.size());
        const VectorXd ls = b.design.colPivHouseholderQr().solve(y);
        CHECK((fit.theta.segment(2 * l, 2) - ls).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("gmm estimate objective decreases across accepted steps") {
    const auto data = small_dataset(15, Link::Log, 3, 1, 120);
    const StackedSystem system(data);
    const GmmFit fit = gmm_estimate(system, PartitionMap::homogeneous(3, 2), VectorXd::Zero(2));
    CHECK(fit.iterations > 0);
    for (const auto& [before, after] : fit.accepted_steps) CHECK(after <= before);
    CHECK(fit.covariance == fit.covariance.transpose());
    CHECK(fit.standard_errors().minCoeff() > 0.0);
}

TEST_CASE("all-singleton partition equals the identity expansion") {
    const PartitionMap s = PartitionMap::singletons(4, 3);
    CHECK(s.expansion() == MatrixXd::Identity(12, 12));
    CHECK(s.groups() == 4);
}

TEST_CASE("homogeneous Poisson GMM estimate lies within three standard errors of the truth") {
    std::mt19937_64 rng(16);
    const VectorXd truth = vec({0.4, -0.3});
    const auto data = testing::random_dataset(rng, Link::Log, BasisKind::ArBand, 3, 1, 4, 2, 300, {truth, truth, truth});
    const StackedSystem system(data);
    const GmmFit fit = gmm_estimate(system, PartitionMap::homogeneous(3, 2), VectorXd::Zero(2));
    const VectorXd se = fit.standard_errors();
    for (Index c = 0; c < 2; ++c) CHECK(std::abs(fit.theta[c] - truth[c]) <= 3.0 * se[c]);
}

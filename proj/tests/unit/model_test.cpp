#include <cmath>
#include <random>

#include <Eigen/QR>

#include "doctest.h"
#include "helpers.hpp"
#include "mfuse/error.hpp"
#include "mfuse/model.hpp"

using namespace mfuse;
using testing::random_block;

namespace {

SourceBlock one_participant(Link link, BasisKind basis, MatrixXd x, VectorXd y) {
    SourceBlock b;
    b.link = LinkFamily(link);
    b.basis = BasisSet::make(basis, y.size());
    b.responses = y.transpose();
    b.design = std::move(x);
    return b;
}

VectorXd fd_column(const SourceBlock& b, const VectorXd& beta, Index c, double h) {
    VectorXd up = beta, down = beta;
    up[c] += h;
    down[c] -= h;
    return -(psi_source(b, up).mean - psi_source(b, down).mean) / (2.0 * h);
}

}  // namespace

TEST_CASE("link families agree with their variance functions") {
    for (double eta : {-3.0, -0.4, 0.0, 0.9, 2.5}) {
        const LinkFamily logit(Link::Logit), log(Link::Log), id(Link::Identity);
        const double p = 1.0 / (1.0 + std::exp(-eta));
        CHECK(logit.mean(eta) == doctest::Approx(p));
        CHECK(logit.dmean(eta) == doctest::Approx(logit.variance(p)));
        CHECK(log.dmean(eta) == doctest::Approx(log.variance(std::exp(eta))));
        CHECK(id.variance(eta) == 1.0);
        for (const LinkFamily& f : {logit, log, id}) {
            CHECK(f.dmean(eta) > 0.0);
            const auto v = f.evaluate(eta);
            CHECK(v.mean == doctest::Approx(f.mean(eta)).epsilon(1e-14));
            CHECK(v.dmean == doctest::Approx(f.dmean(eta)).epsilon(1e-14));
            CHECK(v.d2mean == doctest::Approx(f.d2mean(eta)).epsilon(1e-12));
            const double h = 1e-5;
            CHECK(f.d2mean(eta) == doctest::Approx((f.dmean(eta + h) - f.dmean(eta - h)) / (2 * h)).epsilon(1e-6));
        }
    }
}

TEST_CASE("mean clipping keeps the variance positive") {
    const LinkFamily logit(Link::Logit), log(Link::Log);
    CHECK(logit.variance(1.0) > 0.0);
    CHECK(logit.variance(0.0) > 0.0);
    CHECK(log.variance(0.0) == doctest::Approx(kMeanClip));
    CHECK(logit.dvariance(1.0) == 0.0);
    CHECK(log.dvariance(0.0) == 0.0);
    CHECK(log.dvariance(2.0) == 1.0);
}

TEST_CASE("support checks per family") {
    CHECK(LinkFamily(Link::Logit).in_support(1.0));
    CHECK_FALSE(LinkFamily(Link::Logit).in_support(0.5));
    CHECK(LinkFamily(Link::Log).in_support(3.0));
    CHECK_FALSE(LinkFamily(Link::Log).in_support(-1.0));
    CHECK_FALSE(LinkFamily(Link::Log).in_support(1.5));
    CHECK(LinkFamily(Link::Identity).in_support(-2.7));
    CHECK_THROWS_AS(LinkFamily::parse("probit"), InputError);
}

TEST_CASE("basis matrices are 0/1 with the documented pattern") {
    const BasisSet ind = BasisSet::make(BasisKind::Independence, 4);
    CHECK(ind.size() == 1);
    CHECK(ind[0].isIdentity());

    const BasisSet ex = BasisSet::make(BasisKind::Exchangeable, 4);
    REQUIRE(ex.size() == 2);
    CHECK(ex[1] == MatrixXd::Ones(4, 4) - MatrixXd::Identity(4, 4));

    const BasisSet ar = BasisSet::make(BasisKind::ArBand, 5, 2);
    REQUIRE(ar.size() == 3);
    CHECK(ar[0].isIdentity());
    for (Index t = 1; t < ar.size(); ++t) {
        CHECK(ar[t] == ar[t].transpose());
        CHECK(ar[t].rowwise().sum().maxCoeff() <= 2.0);
        for (Index a = 0; a < 5; ++a)
            for (Index b = 0; b < 5; ++b) CHECK(ar[t](a, b) == (std::abs(a - b) == t ? 1.0 : 0.0));
    }
}

TEST_CASE("psi for identity link reduces to X^T (y - X beta)") {
    const SourceBlock b = one_participant(Link::Identity, BasisKind::Independence, MatrixXd::Identity(2, 2),
                                          testing::vec({1.0, 2.0}));
    const SourcePsi p = psi_source(b, VectorXd::Zero(2));
    CHECK(p.mean[0] == 1.0);
    CHECK(p.mean[1] == 2.0);
}

TEST_CASE("psi matches the scalar oracle") {
    // Values from tests/oracles/psi_logit.py.
    SUBCASE("logit, exchangeable, m = 2") {
        const SourceBlock b = one_participant(Link::Logit, BasisKind::Exchangeable, MatrixXd::Identity(2, 2),
                                              testing::vec({1.0, 0.0}));
        const SourcePsi p = psi_source(b, VectorXd::Zero(2));
        REQUIRE(p.mean.size() == 4);
        CHECK(p.mean[0] == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(p.mean[1] == doctest::Approx(-0.5).epsilon(1e-14));
        CHECK(p.mean[2] == doctest::Approx(-0.5).epsilon(1e-14));
        CHECK(p.mean[3] == doctest::Approx(0.5).epsilon(1e-14));
    }
    SUBCASE("poisson, ar band, m = 3") {
        MatrixXd x(3, 2);
        x << 1, 0.5, 1, -1.0, 1, 2.0;
        const SourceBlock b = one_participant(Link::Log, BasisKind::ArBand, x, testing::vec({2, 0, 1}));
        const SourcePsi p = psi_source(b, testing::vec({0.1, -0.2}));
        const double expected[] = {-0.09067702825772128, 2.3682223662125677, -0.6501411924239968, -4.0926101716684276};
        for (int r = 0; r < 4; ++r) CHECK(p.mean[r] == doctest::Approx(expected[r]).epsilon(1e-12));
    }
}

TEST_CASE("psi vanishes when the fit is exact") {
    MatrixXd x(3, 2);
    x << 1, 0.2, 1, -0.4, 1, 1.1;
    const VectorXd beta = testing::vec({0.3, -0.8});
    const SourceBlock b = one_participant(Link::Identity, BasisKind::Exchangeable, x, x * beta);
    CHECK(psi_source(b, beta).mean.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("identity-link sensitivity is the average X^T B X") {
    std::mt19937_64 rng(11);
    const SourceBlock b = random_block(rng, Link::Identity, BasisKind::Independence, 3, 2, 40, testing::vec({1, -1}));
    MatrixXd expected = MatrixXd::Zero(2, 2);
    for (Index i = 0; i < b.participants(); ++i) expected += b.participant_design(i).transpose() * b.participant_design(i);
    expected /= static_cast<double>(b.participants());
    CHECK(testing::rel_sup_error(sensitivity_source(b, VectorXd::Zero(2)), expected) < 1e-12);
}

TEST_CASE("analytic sensitivity matches central differences on random instances") {
    std::mt19937_64 rng(20240601);
    std::uniform_int_distribution<int> pick_link(0, 2), pick_basis(0, 2), pick_m(2, 6), pick_q(1, 3);
    std::normal_distribution<double> normal(0.0, 0.4);
    double worst = 0.0;
    for (int instance = 0; instance < 50; ++instance) {
        const Link link = static_cast<Link>(pick_link(rng));
        const BasisKind basis = static_cast<BasisKind>(pick_basis(rng));
        const Index m = pick_m(rng), q = pick_q(rng);
        VectorXd beta(q);
        for (Index c = 0; c < q; ++c) beta[c] = normal(rng);
        const SourceBlock b = random_block(rng, link, basis, m, q, 25, beta, 1 + instance % 2);
        VectorXd at(q);
        for (Index c = 0; c < q; ++c) at[c] = beta[c] + normal(rng);
        const MatrixXd analytic = sensitivity_source(b, at);
        MatrixXd fd(analytic.rows(), q);
        for (Index c = 0; c < q; ++c) fd.col(c) = fd_column(b, at, c, 1e-5);
        const double err = testing::rel_sup_error(analytic, fd);
        worst = std::max(worst, err);
        CHECK_MESSAGE(err <= 1e-5, "instance " << instance);
    }
    MESSAGE("worst relative error " << worst);
}

TEST_CASE("single-pass evaluation agrees with separate calls") {
    std::mt19937_64 rng(3);
    const SourceBlock b = random_block(rng, Link::Logit, BasisKind::ArBand, 4, 3, 30, testing::vec({0.2, 0.5, -0.3}));
    const VectorXd beta = testing::vec({0.1, 0.4, -0.2});
    const SourceEvaluation e = evaluate_source(b, beta, true);
    CHECK(e.psi.mean == psi_source(b, beta).mean);
    CHECK(e.sensitivity == sensitivity_source(b, beta));
    CHECK(e.psi.per_participant.cols() == 3 * 2);
}

TEST_CASE("QIF fit recovers least squares for identity link and independence basis") {
    std::mt19937_64 rng(5);
    const SourceBlock b = random_block(rng, Link::Identity, BasisKind::Independence, 3, 3, 60, testing::vec({1, 2, -1}));
    const QifFit fit = qif_fit_source(b, VectorXd::Zero(3));
    const VectorXd y = Eigen::Map<const VectorXd>(MatrixXd(b.responses.transpose()).data(), b.responses.size());
    const VectorXd ls = b.design.colPivHouseholderQr().solve(y);
    CHECK((fit.beta - ls).cwiseAbs().maxCoeff() < 1e-7);
    CHECK(fit.objective >= 0.0);
}

TEST_CASE("QIF objective is zero at an exact fit") {
    std::mt19937_64 rng(9);
    SourceBlock b = random_block(rng, Link::Identity, BasisKind::Exchangeable, 4, 2, 20, testing::vec({0.5, 1.0}));
    const VectorXd beta = testing::vec({0.5, 1.0});
    for (Index i = 0; i < b.participants(); ++i) b.responses.row(i) = (b.participant_design(i) * beta).transpose();
    CHECK(qif_objective(b, beta) == doctest::Approx(0.0).epsilon(1e-20));
    const QifFit fit = qif_fit_source(b, VectorXd::Zero(2));
    CHECK((fit.beta - beta).norm() < 1e-6);
}

TEST_CASE("QIF estimates for logistic data are centred on the truth") {
    // 20 replicates, n = 500, m = 5; the mean error across replicates should be
    // small relative to the sampling spread.
    const VectorXd truth = testing::vec({0.5, -0.5, 0.25});
    std::mt19937_64 rng(77);
    VectorXd sum = VectorXd::Zero(3);
    VectorXd sumsq = VectorXd::Zero(3);
    const int R = 20;
    for (int r = 0; r < R; ++r) {
        const SourceBlock b = random_block(rng, Link::Logit, BasisKind::ArBand, 5, 3, 500, truth);
        const VectorXd err = qif_fit_source(b, VectorXd::Zero(3)).beta - truth;
        sum += err;
        sumsq += err.cwiseAbs2();
    }
    const VectorXd mean = sum / R;
    const VectorXd sd = (sumsq / R - mean.cwiseAbs2()).cwiseSqrt();
    for (Index c = 0; c < 3; ++c) CHECK(std::abs(mean[c]) <= 3.0 * sd[c] / std::sqrt(double(R)) + 1e-3);
}

TEST_CASE("invalid blocks are rejected") {
    SourceBlock b = one_participant(Link::Logit, BasisKind::Independence, MatrixXd::Identity(2, 2),
                                    testing::vec({1.0, 0.5}));
    CHECK_THROWS_AS(b.validate(), InputError);
    b.responses(0, 1) = 0.0;
    b.design(0, 0) = std::nan("");
    CHECK_THROWS_AS(b.validate(), InputError);
}

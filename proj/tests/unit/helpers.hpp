#pragma once

#include <cmath>
#include <initializer_list>
#include <memory>
#include <random>
#include <vector>

#include "mfuse/gmm.hpp"
#include "mfuse/model.hpp"

namespace testing {

using namespace mfuse;

// Random source block with responses drawn from the link's family at beta.
inline SourceBlock random_block(std::mt19937_64& rng, Link link, BasisKind basis, Index m, Index q, Index n,
                                const VectorXd& beta, int order = 1) {
    std::normal_distribution<double> normal(0.0, 1.0);
    SourceBlock b;
    b.link = LinkFamily(link);
    b.basis = BasisSet::make(basis, m, order);
    b.responses.resize(n, m);
    b.design.resize(n * m, q);
    for (Index i = 0; i < n * m; ++i) {
        b.design(i, 0) = 1.0;
        for (Index c = 1; c < q; ++c) b.design(i, c) = 0.7 * normal(rng);
    }
    for (Index i = 0; i < n; ++i)
        for (Index a = 0; a < m; ++a) {
            const double mu = b.link.mean(b.design.row(i * m + a).dot(beta));
            switch (link) {
                case Link::Identity: b.responses(i, a) = mu + normal(rng); break;
                case Link::Logit: b.responses(i, a) = std::bernoulli_distribution(mu)(rng) ? 1.0 : 0.0; break;
                case Link::Log: b.responses(i, a) = static_cast<double>(std::poisson_distribution<int>(mu)(rng)); break;
            }
        }
    return b;
}

// K studies of J sources with a common design per study (shared participants).
inline std::shared_ptr<const StudyDataset> random_dataset(std::mt19937_64& rng, Link link, BasisKind basis, int J,
                                                          int K, Index m, Index q, Index n,
                                                          const std::vector<VectorXd>& betas) {
    std::vector<std::vector<SourceBlock>> studies(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
        for (int j = 0; j < J; ++j) {
            SourceBlock b = random_block(rng, link, basis, m, q, n, betas[static_cast<std::size_t>(k * J + j)]);
            b.study = k;
            b.source = j;
            studies[static_cast<std::size_t>(k)].push_back(std::move(b));
        }
    return std::make_shared<const StudyDataset>(std::move(studies));
}

inline VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

inline double rel_sup_error(const MatrixXd& a, const MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

}  // namespace testing

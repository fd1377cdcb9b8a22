#include "mfuse/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <thread>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "mfuse/error.hpp"
#include "mfuse/gmm.hpp"
#include "mfuse/meta.hpp"
#include "mfuse/path.hpp"

namespace mfuse {

// ---------------------------------------------------------------------------
// Design
// ---------------------------------------------------------------------------

void SimDesign::validate() {
    if (studies < 1 || sources < 1) throw InputError("design needs at least one study and one source");
    if (covariates < 1) throw InputError("design needs at least one covariate");
    if (static_cast<int>(source_dims.size()) != sources) throw InputError("source_dims must have J entries");
    if (static_cast<int>(study_sizes.size()) != studies) throw InputError("study_sizes must have K entries");
    if (static_cast<int>(assignment.size()) != studies * sources)
        throw InputError("assignment must have J*K entries");
    if (theta.rows() != covariates || theta.cols() < 1) throw InputError("theta must be q x G");
    std::vector<bool> used(static_cast<std::size_t>(theta.cols()), false);
    for (int g : assignment) {
        if (g < 1 || g > theta.cols()) throw InputError("assignment labels must lie in 1..G");
        used[static_cast<std::size_t>(g - 1)] = true;
    }
    if (std::find(used.begin(), used.end(), false) != used.end())
        throw InputError("every group in theta must have at least one source");
    if (latent_corr.empty()) latent_corr.assign(static_cast<std::size_t>(sources), 0.5);
    if (covariate_corr.empty()) covariate_corr = latent_corr;
    if (static_cast<int>(latent_corr.size()) != sources || static_cast<int>(covariate_corr.size()) != sources)
        throw InputError("correlation vectors must have J entries");
    if (lambdas.empty()) throw InputError("design needs a lambda grid");
    if (replicates < 1) throw InputError("replicates must be positive");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw InputError("ci_level must lie in (0, 1)");
    PenaltyConfig{0.0, delta, rho}.validate();
    admm.validate();
}

Index SimDesign::total_dimension() const {
    Index m = 0;
    for (Index d : source_dims) m += d;
    return m;
}

PartitionMap SimDesign::true_partition() const { return PartitionMap(assignment, covariates); }

VectorXd SimDesign::true_theta() const {
    const PartitionMap p = true_partition();
    VectorXd out(p.groups() * covariates);
    const auto members = p.members();
    for (int g = 0; g < p.groups(); ++g) {
        const int label = assignment[static_cast<std::size_t>(members[static_cast<std::size_t>(g)].front())];
        out.segment(g * covariates, covariates) = theta.col(label - 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t replicate, std::uint64_t stream) {
    return splitmix64(splitmix64(splitmix64(seed) ^ replicate) ^ stream);
}

MatrixXd gen_gaussian_latent(std::span<const Index> source_dims, std::span<const double> corr, LatentKind kind,
                             Index n, std::uint64_t seed) {
    if (source_dims.size() != corr.size()) throw InputError("one correlation per source is required");
    for (double c : corr) {
        const bool ok = kind == LatentKind::Ar1 ? (c > -1.0 && c < 1.0) : (c >= 0.0 && c < 1.0);
        if (!ok) throw InputError("requested latent correlation is not positive definite");
    }
    Index M = 0;
    for (Index d : source_dims) M += d;

    std::mt19937_64 engine(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixXd z(n, M);
    for (Index i = 0; i < n; ++i) {
        Index col = 0;
        for (std::size_t j = 0; j < source_dims.size(); ++j) {
            const double c = corr[j];
            const Index m = source_dims[j];
            if (kind == LatentKind::Ar1) {
                const double innovation = std::sqrt(1.0 - c * c);
                double prev = normal(engine);
                z(i, col) = prev;
                for (Index r = 1; r < m; ++r) {
                    prev = c * prev + innovation * normal(engine);
                    z(i, col + r) = prev;
                }
            } else {
                const double shared = std::sqrt(c) * normal(engine);
                const double own = std::sqrt(1.0 - c);
                for (Index r = 0; r < m; ++r) z(i, col + r) = shared + own * normal(engine);
            }
            col += m;
        }
    }
    return z;
}

double bernoulli_from_latent(double mu, double z) {
    if (mu >= 1.0) return 1.0;
    if (mu <= 0.0) return 0.0;
    const double cut = boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), mu);
    return z <= cut ? 1.0 : 0.0;
}

MatrixXd gen_bernoulli(const MatrixXd& mu, const MatrixXd& latent) {
    if (mu.rows() != latent.rows() || mu.cols() != latent.cols()) throw InputError("gen_bernoulli: shape mismatch");
    return mu.binaryExpr(latent, [](double m, double z) { return bernoulli_from_latent(m, z); });
}

double poisson_quantile(double u, double mu) {
    if (!(mu > 0.0)) throw InputError("Poisson mean must be positive");
    if (!(u >= 0.0 && u < 1.0)) throw InputError("Poisson quantile needs u in [0, 1)");
    // P(Y <= y) = Q(y + 1, mu), the regularized upper incomplete gamma.
    double y = 0.0;
    double term = std::exp(-mu);
    double cdf = term;
    while (cdf < u) {
        y += 1.0;
        term *= mu / y;
        cdf += term;
        if (term < 1e-300 && y > mu) {
            cdf = boost::math::gamma_q(y + 1.0, mu);
            if (cdf >= u) break;
        }
    }
    return y;
}

double poisson_from_latent(double mu, double z) {
    if (z <= 0.0) return poisson_quantile(normal_cdf(z), mu);
    // Upper tail: smallest y with P(Y > y) <= Phi(-z).
    const double tail = normal_cdf(-z);
    double y = std::floor(mu);
    while (y > 0.0 && boost::math::gamma_p(y, mu) <= tail) y -= 1.0;
    while (boost::math::gamma_p(y + 1.0, mu) > tail) y += 1.0;
    return y;
}

MatrixXd gen_poisson(const MatrixXd& mu, const MatrixXd& latent) {
    if (mu.rows() != latent.rows() || mu.cols() != latent.cols()) throw InputError("gen_poisson: shape mismatch");
    return mu.binaryExpr(latent, [](double m, double z) { return poisson_from_latent(m, z); });
}

StudyDataset simulate_dataset(const SimDesign& design, std::uint64_t replicate) {
    const Index q = design.covariates;
    const int J = design.sources;
    std::vector<std::vector<SourceBlock>> studies(static_cast<std::size_t>(design.studies));

    for (int k = 0; k < design.studies; ++k) {
        const Index n = design.study_sizes[static_cast<std::size_t>(k)];
        const std::uint64_t base = static_cast<std::uint64_t>(k) * 64;
        const MatrixXd latent = gen_gaussian_latent(design.source_dims, design.latent_corr, design.latent, n,
                                                    substream_seed(design.seed, replicate, base));
        std::vector<MatrixXd> fields;
        for (Index f = 1; f < q; ++f)
            fields.push_back(gen_gaussian_latent(design.source_dims, design.covariate_corr, design.latent, n,
                                                 substream_seed(design.seed, replicate, base + static_cast<std::uint64_t>(f))));

        Index col = 0;
        for (int j = 0; j < J; ++j) {
            const Index m = design.source_dims[static_cast<std::size_t>(j)];
            const int label = design.assignment[static_cast<std::size_t>(k * J + j)];
            const VectorXd beta = design.theta.col(label - 1);

            SourceBlock block;
            block.study = k;
            block.source = j;
            block.link = design.link;
            block.basis = BasisSet::make(design.basis, m, design.basis_order);
            block.responses.resize(n, m);
            block.design.resize(n * m, q);
            for (Index i = 0; i < n; ++i)
                for (Index r = 0; r < m; ++r) {
                    auto x = block.design.row(i * m + r);
                    x[0] = 1.0;
                    for (Index f = 1; f < q; ++f) x[f] = fields[static_cast<std::size_t>(f - 1)](i, col + r);
                    const double mu = design.link.mean(x.dot(beta));
                    const double z = latent(i, col + r);
                    double y = 0.0;
                    switch (design.link.kind()) {
                        case Link::Identity: y = mu + z; break;
                        case Link::Logit: y = bernoulli_from_latent(mu, z); break;
                        case Link::Log: y = poisson_from_latent(mu, z); break;
                    }
                    block.responses(i, r) = y;
                }
            studies[static_cast<std::size_t>(k)].push_back(std::move(block));
            col += m;
        }
    }
    return StudyDataset(std::move(studies));
}

// ---------------------------------------------------------------------------
// Replicates
// ---------------------------------------------------------------------------

ReplicateRecord run_replicate(const SimDesign& design, int replicate) {
    ReplicateRecord rec;
    rec.replicate = replicate;
    try {
        auto data = std::make_shared<const StudyDataset>(simulate_dataset(design, static_cast<std::uint64_t>(replicate)));
        const StackedSystem system(data);
        const PairSet pairs = PairSet::complete(design.sources, design.studies);
        const PenaltyConfig base{0.0, design.delta, design.rho};
        PathOptions options;
        options.exclude_homogeneous = design.exclude_homogeneous;
        const SolutionPath path = run_path(system, pairs, design.lambdas, base, design.admm, options);
        const PathRecord& best = path.best();

        rec.groups = best.groups;
        rec.lambda = best.lambda;
        rec.signature = best.partition.signature();
        rec.recovered = best.partition == design.true_partition();

        const GmmFit het = gmm_estimate(system, PartitionMap::singletons(system.sources(), system.covariates()),
                                        path.initial);
        rec.heterogeneous = het.theta;

        if (rec.recovered) {
            const MetaEstimate meta = meta_combine(system, best.partition, best.beta, design.ci_level);
            rec.theta = meta.theta;
            rec.standard_errors = meta.standard_errors();
            const GmmFit oracle = gmm_estimate(system, best.partition, meta.theta);
            rec.oracle = oracle.theta;
            rec.oracle_distance = (rec.theta - rec.oracle).norm() / rec.oracle.norm();
        }
    } catch (const std::exception& e) {
        rec = ReplicateRecord{};
        rec.replicate = replicate;
        rec.failed = true;
        rec.error = e.what();
    }
    return rec;
}

MetricsTable summarize(const SimDesign& design, const std::vector<ReplicateRecord>& records) {
    const Index q = design.covariates;
    const PartitionMap truth_partition = design.true_partition();
    const VectorXd truth = design.true_theta();
    const int G = truth_partition.groups();
    const double z = normal_quantile(0.5 + 0.5 * design.ci_level);
    const double oracle_tol = design.gate.oracle_tolerance.value_or(0.1);

    MetricsTable table;
    table.replicates = static_cast<int>(records.size());
    std::vector<const ReplicateRecord*> ok;
    std::vector<const ReplicateRecord*> recovered;
    double group_sum = 0.0;
    int oracle_hits = 0;
    for (const ReplicateRecord& r : records) {
        if (r.failed) {
            ++table.failures;
            continue;
        }
        ok.push_back(&r);
        group_sum += r.groups;
        if (r.recovered) {
            recovered.push_back(&r);
            if (r.oracle_distance <= oracle_tol) ++oracle_hits;
        }
    }
    table.recovered = static_cast<int>(recovered.size());
    table.recovery_rate = records.empty() ? 0.0 : static_cast<double>(recovered.size()) / static_cast<double>(records.size());
    table.mean_groups = ok.empty() ? 0.0 : group_sum / static_cast<double>(ok.size());
    table.oracle_fraction = recovered.empty() ? 0.0 : static_cast<double>(oracle_hits) / static_cast<double>(recovered.size());

    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double R = static_cast<double>(recovered.size());
    table.fused_rmse.assign(static_cast<std::size_t>(q), 0.0);
    for (int g = 0; g < G; ++g)
        for (Index c = 0; c < q; ++c) {
            const Index at = g * q + c;
            CoefficientMetrics row;
            row.group = g;
            row.coefficient = static_cast<int>(c);
            row.truth = truth[at];
            if (recovered.empty()) {
                row.rmse = row.ese = row.ase = row.bias = row.cp = nan;
            } else {
                double sum = 0.0, sq = 0.0, se = 0.0, hits = 0.0;
                for (const ReplicateRecord* r : recovered) {
                    const double err = r->theta[at] - row.truth;
                    sum += err;
                    sq += err * err;
                    se += r->standard_errors[at];
                    if (std::abs(err) <= z * r->standard_errors[at]) hits += 1.0;
                }
                row.bias = sum / R;
                row.rmse = std::sqrt(sq / R);
                row.ase = se / R;
                row.cp = hits / R;
                double dev = 0.0;
                for (const ReplicateRecord* r : recovered) {
                    const double d = r->theta[at] - row.truth - row.bias;
                    dev += d * d;
                }
                row.ese = recovered.size() > 1 ? std::sqrt(dev / (R - 1.0)) : 0.0;
            }
            table.fused_rmse[static_cast<std::size_t>(c)] += row.rmse / G;
            table.rows.push_back(row);
        }

    const VectorXd truth_beta = truth_partition.expand(truth);
    const int L = truth_partition.sources();
    table.het_rmse.assign(static_cast<std::size_t>(q), ok.empty() ? nan : 0.0);
    if (!ok.empty())
        for (int l = 0; l < L; ++l)
            for (Index c = 0; c < q; ++c) {
                double sq = 0.0;
                for (const ReplicateRecord* r : ok) {
                    const double err = r->heterogeneous[l * q + c] - truth_beta[l * q + c];
                    sq += err * err;
                }
                table.het_rmse[static_cast<std::size_t>(c)] += std::sqrt(sq / static_cast<double>(ok.size())) / L;
            }
    for (Index c = 0; c < q; ++c)
        table.rmse_ratio.push_back(table.het_rmse[static_cast<std::size_t>(c)] / table.fused_rmse[static_cast<std::size_t>(c)]);
    return table;
}

StudyResult run_study(const SimDesign& design, int threads) {
    StudyResult out;
    out.replicates.resize(static_cast<std::size_t>(design.replicates));
    const int workers = std::max(1, std::min(threads, design.replicates));
    std::atomic<int> next{0};
    auto work = [&] {
        for (int r = next++; r < design.replicates; r = next++)
            out.replicates[static_cast<std::size_t>(r)] = run_replicate(design, r);
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (std::thread& t : pool) t.join();
    }
    out.metrics = summarize(design, out.replicates);
    if (out.metrics.failures * 5 > design.replicates) {
        std::ostringstream msg;
        msg << out.metrics.failures << " of " << design.replicates << " replicates failed";
        for (const ReplicateRecord& r : out.replicates)
            if (r.failed) {
                msg << "; first failure: " << r.error;
                break;
            }
        throw NumericalError(msg.str());
    }
    return out;
}

std::vector<GateCheck> evaluate_gate(const SimDesign& design, const MetricsTable& metrics) {
    std::vector<GateCheck> checks;
    const GateSpec& gate = design.gate;
    auto fmt = [](const char* op, double v) {
        std::ostringstream s;
        s << op << ' ' << v;
        return s.str();
    };
    if (gate.min_recovery)
        checks.push_back({"recovery", metrics.recovery_rate, fmt(">=", *gate.min_recovery),
                          metrics.recovery_rate >= *gate.min_recovery});
    if (gate.cp_low || gate.cp_high) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const CoefficientMetrics& row : metrics.rows) {
            lo = std::min(lo, row.cp);
            hi = std::max(hi, row.cp);
        }
        if (metrics.rows.empty() || metrics.recovered == 0) lo = hi = std::numeric_limits<double>::quiet_NaN();
        if (gate.cp_low) checks.push_back({"min_cp", lo, fmt(">=", *gate.cp_low), lo >= *gate.cp_low});
        if (gate.cp_high) checks.push_back({"max_cp", hi, fmt("<=", *gate.cp_high), hi <= *gate.cp_high});
    }
    if (gate.min_rmse_ratio) {
        double lo = std::numeric_limits<double>::infinity();
        for (double r : metrics.rmse_ratio) lo = std::min(lo, std::isnan(r) ? -1.0 : r);
        checks.push_back({"min_rmse_ratio", lo, fmt(">=", *gate.min_rmse_ratio), lo >= *gate.min_rmse_ratio});
    }
    if (gate.max_bias_over_ese) {
        double worst = 0.0;
        for (const CoefficientMetrics& row : metrics.rows) {
            const double r = row.ese > 0.0 ? std::abs(row.bias) / row.ese : (row.bias == 0.0 ? 0.0 : INFINITY);
            worst = std::max(worst, std::isnan(r) ? INFINITY : r);
        }
        checks.push_back({"max_bias_over_ese", worst, fmt("<=", *gate.max_bias_over_ese), worst <= *gate.max_bias_over_ese});
    }
    if (gate.min_oracle_fraction)
        checks.push_back({"oracle_fraction", metrics.oracle_fraction, fmt(">=", *gate.min_oracle_fraction),
                          metrics.oracle_fraction >= *gate.min_oracle_fraction});
    return checks;
}

}  // namespace mfuse

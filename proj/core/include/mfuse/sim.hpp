#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mfuse/admm.hpp"
#include "mfuse/model.hpp"
#include "mfuse/partition.hpp"

namespace mfuse {

enum class LatentKind { Ar1, Exchangeable };

/// Acceptance thresholds checked by gate mode. Unset fields are not checked.
struct GateSpec {
    std::optional<double> min_recovery;
    std::optional<double> cp_low;
    std::optional<double> cp_high;
    std::optional<double> min_rmse_ratio;     // heterogeneous RMSE / fused RMSE, per coefficient
    std::optional<double> max_bias_over_ese;  // |BIAS| / ESE, per group and coefficient
    std::optional<double> oracle_tolerance;   // relative distance to the oracle estimate
    std::optional<double> min_oracle_fraction;
};

/// Replicated simulation design. Covariates are an intercept plus q-1
/// Gaussian fields sharing the per-source latent correlation structure.
struct SimDesign {
    std::string name = "design";
    int studies = 1;
    int sources = 1;
    Index covariates = 3;
    std::vector<Index> source_dims;  // m_j, size J
    std::vector<Index> study_sizes;  // n_k, size K
    std::vector<int> assignment;     // 1-based group label per source, k-major
    MatrixXd theta;                  // q x G, column g-1 is group label g
    LinkFamily link{Link::Log};
    LatentKind latent = LatentKind::Ar1;
    std::vector<double> latent_corr;     // per source; defaults to 0.5
    std::vector<double> covariate_corr;  // per source; defaults to latent_corr
    BasisKind basis = BasisKind::ArBand;
    int basis_order = 1;
    std::vector<double> lambdas;
    double delta = 3.0;
    double rho = 3.0;
    AdmmConfig admm;
    double ci_level = 0.95;
    bool exclude_homogeneous = false;
    int replicates = 1;
    std::uint64_t seed = 1;
    GateSpec gate;

    /// Fills defaults and throws InputError on inconsistent dimensions.
    void validate();
    int groups() const { return static_cast<int>(theta.cols()); }
    Index total_dimension() const;
    PartitionMap true_partition() const;
    /// Truth in canonical group order of true_partition(), as a Gq vector.
    VectorXd true_theta() const;
};

/// Deterministic substream seed for (seed, replicate, stream).
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t replicate, std::uint64_t stream);

/// n x M standard-normal draws with block-diagonal correlation across sources:
/// AR(1) with coefficient corr[j] or exchangeable with correlation corr[j].
MatrixXd gen_gaussian_latent(std::span<const Index> source_dims, std::span<const double> corr, LatentKind kind,
                             Index n, std::uint64_t seed);

/// y = 1 iff z <= Phi^{-1}(mu).
double bernoulli_from_latent(double mu, double z);
MatrixXd gen_bernoulli(const MatrixXd& mu, const MatrixXd& latent);

/// Smallest y with P(Y <= y) >= u for Y ~ Poisson(mu).
double poisson_quantile(double u, double mu);
/// poisson_quantile(Phi(z), mu), evaluated in the upper tail for z > 0.
double poisson_from_latent(double mu, double z);
MatrixXd gen_poisson(const MatrixXd& mu, const MatrixXd& latent);

/// One simulated dataset for replicate r.
StudyDataset simulate_dataset(const SimDesign& design, std::uint64_t replicate);

struct ReplicateRecord {
    int replicate = 0;
    bool failed = false;
    std::string error;
    bool recovered = false;
    int groups = 0;
    double lambda = 0.0;
    std::string signature;
    VectorXd theta;          // fused estimate (only when recovered)
    VectorXd standard_errors;
    VectorXd heterogeneous;  // JKq heterogeneous GMM estimate
    VectorXd oracle;         // oracle GMM estimate (only when recovered)
    double oracle_distance = 0.0;  // ||theta - oracle|| / ||oracle||
};

struct CoefficientMetrics {
    int group = 0;        // 0-based canonical group
    int coefficient = 0;  // 0-based
    double truth = 0.0;
    double rmse = 0.0;
    double ese = 0.0;
    double ase = 0.0;
    double bias = 0.0;
    double cp = 0.0;
};

struct MetricsTable {
    std::vector<CoefficientMetrics> rows;
    int replicates = 0;
    int failures = 0;
    int recovered = 0;
    double recovery_rate = 0.0;
    double mean_groups = 0.0;
    /// Per coefficient: average RMSE across sources of the heterogeneous
    /// estimator, average across groups of the fused estimator, and ratio.
    std::vector<double> het_rmse;
    std::vector<double> fused_rmse;
    std::vector<double> rmse_ratio;
    double oracle_fraction = 0.0;  // share of recovered replicates within gate.oracle_tolerance (0.1 default)
};

struct StudyResult {
    MetricsTable metrics;
    std::vector<ReplicateRecord> replicates;
};

/// Runs one replicate end to end (generate, path, select, combine, compare).
ReplicateRecord run_replicate(const SimDesign& design, int replicate);

/// Aggregates replicate records into the metrics table.
MetricsTable summarize(const SimDesign& design, const std::vector<ReplicateRecord>& records);

/// All replicates, in parallel over `threads` workers. Throws NumericalError
/// when more than 20% of replicates fail.
StudyResult run_study(const SimDesign& design, int threads = 1);

struct GateCheck {
    std::string name;
    double value = 0.0;
    std::string threshold;
    bool passed = false;
};
std::vector<GateCheck> evaluate_gate(const SimDesign& design, const MetricsTable& metrics);

}  // namespace mfuse

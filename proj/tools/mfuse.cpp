// mfuse command-line tool: fit, path, oracle, het, simulate, generate, verify.
#include <cstdlib>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mfuse/admm.hpp"
#include "mfuse/gmm.hpp"
#include "mfuse/io.hpp"
#include "mfuse/meta.hpp"
#include "mfuse/path.hpp"
#include "mfuse/sim.hpp"

namespace {

using namespace mfuse;

enum Exit { kOk = 0, kInput = 1, kNumerical = 2, kGate = 3 };

std::string num(double x) { return format_number(x); }
std::string num(int x) { return std::to_string(x); }
std::string num(Index x) { return std::to_string(x); }

// Flags that override fields of RunConfig. Strings stay empty when unset.
struct RunFlags {
    std::string config_path;
    std::string link, basis, lambdas;
    int basis_order = 0;
    double delta = 0, rho = 0, tol_primal = 0, tol_dual = 0, fuse_epsilon = -1, ci_level = 0;
    int max_iter = 0;
    std::uint64_t seed = 0;
    bool exclude_homogeneous = false;
    std::string out;
    std::vector<CLI::Option*> set;

    void attach(CLI::App& app) {
        app.add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
        set = {app.add_option("--link", link, "gaussian, logistic or poisson"),
               app.add_option("--basis", basis, "independence, exchangeable or ar"),
               app.add_option("--basis-order", basis_order, "working-correlation band order"),
               app.add_option("--lambdas", lambdas, "grid: 'a,b,c' or 'step:first:last'"),
               app.add_option("--delta", delta, "MCP concavity"),
               app.add_option("--rho", rho, "ADMM learning parameter"),
               app.add_option("--tol-primal", tol_primal),
               app.add_option("--tol-dual", tol_dual),
               app.add_option("--max-iter", max_iter, "ADMM iteration cap per lambda"),
               app.add_option("--fuse-epsilon", fuse_epsilon),
               app.add_option("--ci-level", ci_level),
               app.add_option("--seed", seed)};
        app.add_flag("--exclude-homogeneous", exclude_homogeneous, "never select the one-group partition");
        app.add_option("-o,--out", out, "output directory");
    }

    RunConfig resolve() const {
        RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (*set[0]) c.link = LinkFamily::parse(link);
        if (*set[1]) c.basis = BasisSet::parse_kind(basis);
        if (*set[2]) c.basis_order = basis_order;
        if (*set[3]) c.lambdas = parse_lambda_grid(lambdas);
        if (*set[4]) c.penalty.delta = delta;
        if (*set[5]) c.penalty.rho = rho;
        if (*set[6]) c.admm.tol_primal = tol_primal;
        if (*set[7]) c.admm.tol_dual = tol_dual;
        if (*set[8]) c.admm.max_iter = max_iter;
        if (*set[9]) c.admm.fuse_epsilon = fuse_epsilon;
        if (*set[10]) c.ci_level = ci_level;
        if (*set[11]) c.seed = seed;
        if (exclude_homogeneous) c.exclude_homogeneous = true;
        if (!out.empty()) c.output_dir = out;
        c.validate();
        return c;
    }
};

// The output directory does not enter the digest, so identical runs into
// different directories produce identical bytes.
std::string digest_config(RunConfig c) {
    c.output_dir.clear();
    return to_json(c);
}

struct Loaded {
    RunConfig config;
    std::shared_ptr<const StudyDataset> data;
    std::unique_ptr<StackedSystem> system;
};

Loaded load(const RunFlags& flags, const std::string& data_path) {
    Loaded l;
    l.config = flags.resolve();
    l.data = std::make_shared<const StudyDataset>(
        load_dataset(data_path, DatasetSpec{l.config.link, l.config.basis, l.config.basis_order}));
    l.system = std::make_unique<StackedSystem>(l.data);
    return l;
}

Table path_table(const SolutionPath& path) {
    Table t{{"lambda", "groups", "bic", "converged", "iterations", "primal_residual", "dual_residual", "partition",
             "selected"},
            {}};
    for (std::size_t l = 0; l < path.records.size(); ++l) {
        const PathRecord& r = path.records[l];
        t.add({num(r.lambda), num(r.groups), num(r.bic), r.converged ? "1" : "0", num(r.iterations),
               num(r.primal_residual), num(r.dual_residual), r.partition.signature(),
               l == path.selected ? "1" : "0"});
    }
    return t;
}

Table partition_table(const PartitionMap& p, int J) {
    Table t{{"study", "source", "group"}, {}};
    for (int l = 0; l < p.sources(); ++l) t.add({num(l / J + 1), num(l % J + 1), num(p.group_of(l) + 1)});
    return t;
}

Table estimate_table(const PartitionMap& p, const VectorXd& theta, const VectorXd& se, const MatrixXd& ci, int J) {
    Table t{{"group", "coefficient", "estimate", "se", "lower", "upper", "members"}, {}};
    const auto members = p.members();
    const Index q = p.covariates();
    for (int g = 0; g < p.groups(); ++g) {
        std::string who;
        for (int l : members[static_cast<std::size_t>(g)]) {
            if (!who.empty()) who += ' ';
            who += "k" + num(l / J + 1) + "j" + num(l % J + 1);
        }
        for (Index r = 0; r < q; ++r) {
            const Index a = g * q + r;
            t.add({num(g + 1), num(r + 1), num(theta[a]), num(se[a]), num(ci(a, 0)), num(ci(a, 1)), who});
        }
    }
    return t;
}

Table heterogeneous_table(const GmmFit& fit, double level, int J, Index q) {
    Table t{{"study", "source", "coefficient", "estimate", "se", "lower", "upper"}, {}};
    const VectorXd se = fit.standard_errors();
    const double z = normal_quantile(0.5 + 0.5 * level);
    for (Index a = 0; a < fit.theta.size(); ++a) {
        const int l = static_cast<int>(a / q);
        t.add({num(l / J + 1), num(l % J + 1), num(a % q + 1), num(fit.theta[a]), num(se[a]),
               num(fit.theta[a] - z * se[a]), num(fit.theta[a] + z * se[a])});
    }
    return t;
}

MatrixXd gmm_intervals(const GmmFit& fit, double level) {
    const VectorXd se = fit.standard_errors();
    const double z = normal_quantile(0.5 + 0.5 * level);
    MatrixXd ci(se.size(), 2);
    ci.col(0) = fit.theta - z * se;
    ci.col(1) = fit.theta + z * se;
    return ci;
}

// ---- subcommands ----------------------------------------------------------

int cmd_fit(const RunFlags& flags, const std::string& data_path, const std::string& trace_path, bool full) {
    Loaded in = load(flags, data_path);
    const StackedSystem& system = *in.system;
    const RunConfig& c = in.config;
    const int J = in.data->sources();

    RunArtifacts out(c.output_dir, full ? "fit" : "path", digest_config(c));
    out.add_input("data", data_path);
    const std::string digest = out.run_digest();

    std::string trace = "{\"run\":\"" + digest + "\"}\n";
    PathOptions options;
    options.exclude_homogeneous = c.exclude_homogeneous;
    options.qif = c.qif;
    if (!trace_path.empty())
        options.trace = [&](std::size_t index, const IterationRecord& r) {
            trace += "{\"lambda\":" + num(c.lambdas[index]) + ",\"iteration\":" + num(r.iteration) +
                     ",\"objective\":" + num(r.objective) + ",\"primal\":" + num(r.primal_residual) +
                     ",\"dual\":" + num(r.dual_residual) + ",\"groups\":" + num(r.groups) + "}\n";
        };
    PenaltyConfig base = c.penalty;
    base.lambda = 0.0;
    const PairSet pairs = PairSet::complete(J, in.data->studies());
    const SolutionPath path = run_path(system, pairs, c.lambdas, base, c.admm, options);
    const PathRecord& best = path.best();
    if (path.exclusion_fallback)
        std::cerr << "mfuse: every converged lambda gave one group; selecting without the exclusion\n";

    out.write_table("path.csv", path_table(path));
    out.write_table("partition.csv", partition_table(best.partition, J));
    if (full) {
        const MetaEstimate meta = meta_combine(system, best.partition, best.beta, c.ci_level);
        out.write_table("estimates.csv",
                        estimate_table(best.partition, meta.theta, meta.standard_errors(), meta.intervals, J));
        const GmmFit het = gmm_estimate(system, PartitionMap::singletons(system.sources(), system.covariates()),
                                        path.initial, c.gmm);
        out.write_table("heterogeneous.csv", heterogeneous_table(het, c.ci_level, J, system.covariates()));
    }
    if (!trace_path.empty()) out.write_text(trace_path, trace);
    out.finish();
    std::cout << "selected lambda " << num(best.lambda) << ", " << best.groups << " group(s): "
              << best.partition.signature() << "\n";
    return kOk;
}

int cmd_oracle(const RunFlags& flags, const std::string& data_path, const std::string& partition_path,
               const std::string& assignment) {
    Loaded in = load(flags, data_path);
    const StackedSystem& system = *in.system;
    const RunConfig& c = in.config;
    const int J = in.data->sources();
    const Index q = system.covariates();

    RunArtifacts out(c.output_dir, "oracle", digest_config(c));
    out.add_input("data", data_path);
    PartitionMap partition;
    if (!partition_path.empty()) {
        out.add_input("partition", partition_path);
        partition = parse_partition_table(read_table(partition_path, ""), J, in.data->studies(), q);
    } else {
        std::vector<int> labels;
        std::stringstream ss(assignment);
        for (std::string cell; std::getline(ss, cell, ',');) {
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cell.size() || v < 1) throw InputError("--assignment label '" + cell + "' is not a positive integer");
            labels.push_back(v);
        }
        if (static_cast<int>(labels.size()) != system.sources())
            throw InputError("--assignment needs one label per source (" + num(system.sources()) + ")");
        out.add_input_text("assignment", assignment);
        partition = PartitionMap(labels, q);
    }
    out.run_digest();

    const VectorXd init = qif_initial_estimates(system, c.qif);
    const MetaEstimate start = meta_combine(system, partition, init, c.ci_level);
    const GmmFit fit = gmm_estimate(system, partition, start.theta, c.gmm);
    out.write_table("partition.csv", partition_table(partition, J));
    out.write_table("estimates.csv",
                    estimate_table(partition, fit.theta, fit.standard_errors(), gmm_intervals(fit, c.ci_level), J));
    out.finish();
    return kOk;
}

int cmd_het(const RunFlags& flags, const std::string& data_path) {
    Loaded in = load(flags, data_path);
    const StackedSystem& system = *in.system;
    const RunConfig& c = in.config;
    RunArtifacts out(c.output_dir, "het", digest_config(c));
    out.add_input("data", data_path);
    out.run_digest();
    const GmmFit het = gmm_estimate(system, PartitionMap::singletons(system.sources(), system.covariates()),
                                    qif_initial_estimates(system, c.qif), c.gmm);
    out.write_table("heterogeneous.csv",
                    heterogeneous_table(het, c.ci_level, in.data->sources(), system.covariates()));
    out.finish();
    return kOk;
}

int default_threads() {
    if (const char* env = std::getenv("MFUSE_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (const std::exception&) {
        }
        throw InputError(std::string("MFUSE_THREADS must be a positive integer, got '") + env + "'");
    }
    return 1;
}

std::string clean_cell(std::string s) {
    for (char& ch : s)
        if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
    return s;
}

int cmd_simulate(const std::string& design_path, const std::string& out_dir, int threads, bool gate,
                 int replicates_override) {
    SimDesign design = load_design(design_path);
    if (replicates_override > 0) design.replicates = replicates_override;
    design.validate();
    RunArtifacts out(out_dir, "simulate", to_json(design));
    out.add_input("design", design_path);
    out.run_digest();

    const StudyResult result = run_study(design, threads);
    const MetricsTable& m = result.metrics;

    Table metrics{{"setting", "group", "covariate", "RMSE", "ESE", "ASE", "BIAS", "CP"}, {}};
    for (const CoefficientMetrics& r : m.rows)
        metrics.add({design.name, num(r.group + 1), num(r.coefficient + 1), num(r.rmse), num(r.ese), num(r.ase),
                     num(r.bias), num(r.cp)});
    out.write_table("metrics.csv", metrics);

    Table summary{{"metric", "value"}, {}};
    summary.add({"replicates", num(m.replicates)});
    summary.add({"failures", num(m.failures)});
    summary.add({"recovered", num(m.recovered)});
    summary.add({"recovery_rate", num(m.recovery_rate)});
    summary.add({"mean_groups", num(m.mean_groups)});
    summary.add({"oracle_fraction", num(m.oracle_fraction)});
    for (std::size_t r = 0; r < m.rmse_ratio.size(); ++r) {
        summary.add({"het_rmse_" + num(static_cast<int>(r + 1)), num(m.het_rmse[r])});
        summary.add({"fused_rmse_" + num(static_cast<int>(r + 1)), num(m.fused_rmse[r])});
        summary.add({"rmse_ratio_" + num(static_cast<int>(r + 1)), num(m.rmse_ratio[r])});
    }
    out.write_table("summary.csv", summary);

    Table reps{{"replicate", "failed", "recovered", "groups", "lambda", "partition", "oracle_distance", "error"}, {}};
    for (const ReplicateRecord& r : result.replicates)
        reps.add({num(r.replicate), r.failed ? "1" : "0", r.recovered ? "1" : "0", num(r.groups), num(r.lambda),
                  r.signature, num(r.oracle_distance), clean_cell(r.error)});
    out.write_table("replicates.csv", reps);

    bool passed = true;
    if (gate) {
        Table checks{{"check", "value", "threshold", "passed"}, {}};
        for (const GateCheck& g : evaluate_gate(design, m)) {
            checks.add({g.name, num(g.value), g.threshold, g.passed ? "1" : "0"});
            std::cout << (g.passed ? "PASS " : "FAIL ") << g.name << " = " << num(g.value) << " (" << g.threshold
                      << ")\n";
            passed = passed && g.passed;
        }
        out.write_table("gate.csv", checks);
    }
    out.finish();
    std::cout << design.name << ": recovery " << num(m.recovery_rate) << " over " << m.replicates
              << " replicates (" << m.failures << " failed)\n";
    return passed ? kOk : kGate;
}

int cmd_generate(const std::string& design_path, int replicate, const std::string& out_path) {
    SimDesign design = load_design(design_path);
    write_dataset(out_path, simulate_dataset(design, static_cast<std::uint64_t>(replicate)));
    return kOk;
}

int cmd_verify(const std::string& dir) {
    const VerifiedRun run = verify_artifacts(dir);
    std::cout << run.command << " run " << run.run_digest << ": " << run.artifacts.size()
              << " artifact(s) verified\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Model fusion for multi-source correlated outcomes"};
    app.set_version_flag("--version", std::string(mfuse::library_version()));
    app.require_subcommand(1);

    std::string data_path, trace_path, partition_path, assignment, design_path, dir;
    int threads = 0, replicate = 0, replicates = 0;
    bool gate = false;

    RunFlags fit_flags, path_flags, oracle_flags, het_flags;
    auto* fit = app.add_subcommand("fit", "solution path, BIC selection and fused estimates");
    auto* path = app.add_subcommand("path", "solution path and selected partition only");
    for (auto [sub, flags] : {std::pair{fit, &fit_flags}, std::pair{path, &path_flags}}) {
        sub->add_option("data", data_path, "long-format CSV")->required()->check(CLI::ExistingFile);
        sub->add_option("--trace", trace_path, "write per-iteration ADMM records (JSON lines) to this artifact");
        flags->attach(*sub);
    }
    auto* oracle = app.add_subcommand("oracle", "GMM fit under a known partition");
    oracle->add_option("data", data_path)->required()->check(CLI::ExistingFile);
    auto* part_opt =
        oracle->add_option("--partition", partition_path, "partition.csv from a previous fit")->check(CLI::ExistingFile);
    auto* assign_opt = oracle->add_option("--assignment", assignment, "group label per source, e.g. 1,1,2,2");
    part_opt->excludes(assign_opt);
    oracle_flags.attach(*oracle);
    auto* het = app.add_subcommand("het", "unpenalized per-source GMM fit");
    het->add_option("data", data_path)->required()->check(CLI::ExistingFile);
    het_flags.attach(*het);

    auto* simulate = app.add_subcommand("simulate", "replicated simulation study");
    simulate->add_option("design", design_path, "JSON design")->required()->check(CLI::ExistingFile);
    simulate->add_option("-o,--out", dir, "output directory")->required();
    simulate->add_option("--threads", threads, "worker threads (default MFUSE_THREADS or 1)");
    simulate->add_option("--replicates", replicates, "override the design's replicate count");
    simulate->add_flag("--gate", gate, "exit 3 unless the design's acceptance thresholds hold");

    auto* generate = app.add_subcommand("generate", "write one simulated dataset");
    generate->add_option("design", design_path)->required()->check(CLI::ExistingFile);
    generate->add_option("--replicate", replicate, "replicate index");
    generate->add_option("-o,--out", dir, "output CSV")->required();

    auto* verify = app.add_subcommand("verify", "re-check artifact digests");
    verify->add_option("dir", dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInput;
    }

    try {
        if (*fit) return cmd_fit(fit_flags, data_path, trace_path, true);
        if (*path) return cmd_fit(path_flags, data_path, trace_path, false);
        if (*oracle) {
            if (partition_path.empty() && assignment.empty())
                throw mfuse::InputError("oracle needs --partition or --assignment");
            return cmd_oracle(oracle_flags, data_path, partition_path, assignment);
        }
        if (*het) return cmd_het(het_flags, data_path);
        if (*simulate) return cmd_simulate(design_path, dir, threads > 0 ? threads : default_threads(), gate, replicates);
        if (*generate) return cmd_generate(design_path, replicate, dir);
        if (*verify) return cmd_verify(dir);
    } catch (const mfuse::InputError& e) {
        std::cerr << "mfuse: input error: " << e.what() << "\n";
        return kInput;
    } catch (const mfuse::NumericalError& e) {
        std::cerr << "mfuse: numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "mfuse: " << e.what() << "\n";
        return kInput;
    }
    return kInput;
}

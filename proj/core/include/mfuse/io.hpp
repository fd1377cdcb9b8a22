#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mfuse/admm.hpp"
#include "mfuse/error.hpp"
#include "mfuse/model.hpp"
#include "mfuse/path.hpp"
#include "mfuse/penalty.hpp"
#include "mfuse/sim.hpp"

namespace mfuse {

/// Parse failure in a delimited or structured input file.
class ParseError : public InputError {
public:
    ParseError(const std::string& what, std::size_t line) : InputError(what), line_(line) {}
    /// 1-based line number, 0 when the error is not tied to one line.
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Digest or schema mismatch when reloading artifacts.
class VerificationError : public InputError {
public:
    using InputError::InputError;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    LinkFamily link{Link::Logit};
    BasisKind basis = BasisKind::ArBand;
    int basis_order = 1;
    std::vector<double> lambdas{0.0};
    PenaltyConfig penalty;
    AdmmConfig admm;
    QifOptions qif;
    GmmOptions gmm;
    double ci_level = 0.95;
    std::uint64_t seed = 1;
    bool exclude_homogeneous = false;
    std::string output_dir = "mfuse-out";

    /// delta > 1/rho, lambda grid nonnegative ascending, level in (0, 1).
    void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(std::string_view json_text);
/// Canonical JSON (sorted keys, shortest round-trip numbers).
std::string to_json(const RunConfig& config);

/// "0,0.05,0.1" or "step:first:last" (arithmetic grid step*a, a = first..last).
std::vector<double> parse_lambda_grid(std::string_view text);

SimDesign load_design(const std::filesystem::path& path);
SimDesign parse_design(std::string_view json_text);
std::string to_json(const SimDesign& design);

// ---------------------------------------------------------------------------
// Long-format datasets
// ---------------------------------------------------------------------------

/// Model settings applied to every source of a loaded dataset.
struct DatasetSpec {
    LinkFamily link{Link::Logit};
    BasisKind basis = BasisKind::ArBand;
    int basis_order = 1;
};

/// Reads the comma-delimited long format with header
///   study,source,participant,position,y,x1,...,xq
/// Studies and sources are 1-based and contiguous; positions run 1..m_j for
/// every (participant, source). Participants are ordered by id (numerically
/// when every id is an integer), then source, then position.
StudyDataset load_dataset(const std::filesystem::path& path, const DatasetSpec& spec);
StudyDataset parse_dataset(std::string_view text, const DatasetSpec& spec);

/// Writes the long format; participant ids are 1..N in study order. Numbers
/// use the shortest representation that round-trips exactly.
std::string format_dataset(const StudyDataset& data);
void write_dataset(const std::filesystem::path& path, const StudyDataset& data);

// ---------------------------------------------------------------------------
// Formatting and artifacts
// ---------------------------------------------------------------------------

/// Shortest decimal text that parses back to exactly x ("nan", "inf", "-inf" otherwise).
std::string format_number(double x);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Writes via a temporary sibling file and rename.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);

/// One output table. The first line is "# run <digest>", then a CSV header.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row);
    std::string render(std::string_view run_digest) const;
};

/// Collects artifacts for one invocation and writes them together with
/// manifest.json. The run digest covers the command, inputs and config.
class RunArtifacts {
public:
    RunArtifacts(std::filesystem::path directory, std::string command, std::string config_json);

    /// Registers an input file by content digest.
    void add_input(const std::string& role, const std::filesystem::path& path);
    void add_input_text(const std::string& role, std::string_view bytes);

    /// Computes the run digest; must be called after every input is added.
    const std::string& run_digest();

    void write_table(const std::string& name, const Table& table);
    void write_text(const std::string& name, std::string_view bytes);
    /// Writes manifest.json last.
    void finish();

    const std::filesystem::path& directory() const noexcept { return directory_; }

private:
    std::filesystem::path directory_;
    std::string command_;
    std::string config_json_;
    std::vector<std::pair<std::string, std::string>> inputs_;  // role, sha256
    std::vector<std::pair<std::string, std::string>> outputs_;  // name, sha256
    std::string digest_;
};

struct VerifiedRun {
    std::string command;
    std::string run_digest;
    std::vector<std::string> artifacts;
};

/// Re-reads manifest.json in `directory`, recomputes every artifact digest and
/// checks that each table embeds the run digest. Throws VerificationError.
VerifiedRun verify_artifacts(const std::filesystem::path& directory);

/// Reads a table written by RunArtifacts, checking its embedded digest.
Table read_table(const std::filesystem::path& path, std::string_view expected_digest);

/// Parses a partition listing (columns study, source, group) for the given grid.
PartitionMap parse_partition_table(const Table& table, int sources_per_study, int studies, Index q);

std::string_view library_version() noexcept;

}  // namespace mfuse

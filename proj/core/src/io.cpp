#include "mfuse/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <openssl/evp.h>
#include <unistd.h>

#include "json.hpp"

namespace mfuse {

using nlohmann::json;

namespace {

constexpr std::string_view kVersion = "0.1.0";

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t at = line.find(sep, start);
        out.push_back(trim(line.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start)));
        if (at == std::string_view::npos) break;
        start = at + 1;
    }
    return out;
}

// Splits text into (1-based line number, content) skipping blanks and '#' comments.
std::vector<std::pair<std::size_t, std::string_view>> lines_of(std::string_view text) {
    std::vector<std::pair<std::size_t, std::string_view>> out;
    std::size_t number = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = text.find('\n', start);
        std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        ++number;
        line = trim(line);
        if (!line.empty() && line.front() != '#') out.emplace_back(number, line);
        if (end == std::string_view::npos) break;
        start = end + 1;
    }
    return out;
}

[[noreturn]] void fail_at(std::size_t line, const std::string& what) {
    throw ParseError("line " + std::to_string(line) + ": " + what, line);
}

double parse_double(std::string_view cell, std::size_t line, std::string_view column) {
    if (cell.empty()) fail_at(line, "missing value in column '" + std::string(column) + "'");
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc() || ptr != cell.data() + cell.size())
        fail_at(line, "column '" + std::string(column) + "': '" + std::string(cell) + "' is not a number");
    return v;
}

long parse_integer(std::string_view cell, std::size_t line, std::string_view column) {
    if (cell.empty()) fail_at(line, "missing value in column '" + std::string(column) + "'");
    long v = 0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || v < 1)
        fail_at(line, "column '" + std::string(column) + "': '" + std::string(cell) + "' is not a positive integer");
    return v;
}

// ---- JSON helpers ---------------------------------------------------------

template <typename T>
T get_as(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + what);
}

json parse_json(std::string_view text, const char* what) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        throw ParseError(std::string(what) + ": " + e.what(), 0);
    }
}

std::vector<double> lambdas_from(const json& j) {
    if (j.is_string()) return parse_lambda_grid(j.get<std::string>());
    try {
        return j.get<std::vector<double>>();
    } catch (const json::exception&) {
        throw ConfigError("lambdas must be an array of numbers or a 'step:first:last' string");
    }
}

std::string latent_name(LatentKind kind) { return kind == LatentKind::Ar1 ? "ar1" : "exchangeable"; }

LatentKind parse_latent(const std::string& name) {
    if (name == "ar1") return LatentKind::Ar1;
    if (name == "exchangeable") return LatentKind::Exchangeable;
    throw ConfigError("unknown latent correlation kind '" + name + "'");
}

template <typename T>
std::vector<T> scalar_or_list(const json& j, std::size_t count, const char* key) {
    if (j.is_array()) {
        auto v = j.get<std::vector<T>>();
        if (v.size() != count) throw ConfigError(std::string(key) + " must have " + std::to_string(count) + " entries");
        return v;
    }
    if (j.is_number()) return std::vector<T>(count, j.get<T>());
    throw ConfigError(std::string(key) + " must be a number or an array");
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
    penalty.validate();
    admm.validate();
    if (lambdas.empty()) throw ConfigError("lambda grid is empty");
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
        if (!(lambdas[l] >= 0.0) || !std::isfinite(lambdas[l])) throw ConfigError("lambda values must be finite and nonnegative");
        if (l > 0 && lambdas[l] < lambdas[l - 1]) throw ConfigError("lambda grid must be ascending");
    }
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("ci_level must lie in (0, 1)");
    if (basis_order < 1) throw ConfigError("basis_order must be at least 1");
    if (!(qif.tolerance > 0.0) || qif.max_iterations < 1) throw ConfigError("invalid QIF solver settings");
    if (!(gmm.tolerance > 0.0) || gmm.max_iterations < 1) throw ConfigError("invalid GMM solver settings");
}

std::vector<double> parse_lambda_grid(std::string_view text) {
    text = trim(text);
    if (text.empty()) throw ConfigError("empty lambda grid");
    if (text.find(':') != std::string_view::npos) {
        const auto parts = split(text, ':');
        if (parts.size() != 3) throw ConfigError("lambda grid must look like step:first:last");
        double step = 0.0;
        long first = 0, last = 0;
        auto bad = [&] { throw ConfigError("lambda grid '" + std::string(text) + "' is malformed"); };
        if (std::from_chars(parts[0].data(), parts[0].data() + parts[0].size(), step).ec != std::errc()) bad();
        if (std::from_chars(parts[1].data(), parts[1].data() + parts[1].size(), first).ec != std::errc()) bad();
        if (std::from_chars(parts[2].data(), parts[2].data() + parts[2].size(), last).ec != std::errc()) bad();
        if (!(step > 0.0) || first < 0 || last < first) bad();
        return arithmetic_grid(step, static_cast<int>(first), static_cast<int>(last));
    }
    std::vector<double> out;
    for (std::string_view cell : split(text, ',')) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size())
            throw ConfigError("lambda value '" + std::string(cell) + "' is not a number");
        out.push_back(v);
    }
    return out;
}

RunConfig parse_run_config(std::string_view json_text) {
    const json j = parse_json(json_text, "run config");
    reject_unknown(j,
                   {"link", "basis", "basis_order", "lambdas", "delta", "rho", "tol_primal", "tol_dual", "max_iter",
                    "fuse_epsilon", "qif_tolerance", "qif_max_iter", "gmm_tolerance", "gmm_max_iter", "ci_level",
                    "seed", "exclude_homogeneous", "output_dir"},
                   "run config");
    RunConfig c;
    if (j.contains("link")) c.link = LinkFamily::parse(get_as<std::string>(j, "link"));
    if (j.contains("basis")) c.basis = BasisSet::parse_kind(get_as<std::string>(j, "basis"));
    if (j.contains("basis_order")) c.basis_order = get_as<int>(j, "basis_order");
    if (j.contains("lambdas")) c.lambdas = lambdas_from(j.at("lambdas"));
    if (j.contains("delta")) c.penalty.delta = get_as<double>(j, "delta");
    if (j.contains("rho")) c.penalty.rho = get_as<double>(j, "rho");
    if (j.contains("tol_primal")) c.admm.tol_primal = get_as<double>(j, "tol_primal");
    if (j.contains("tol_dual")) c.admm.tol_dual = get_as<double>(j, "tol_dual");
    if (j.contains("max_iter")) c.admm.max_iter = get_as<int>(j, "max_iter");
    if (j.contains("fuse_epsilon")) c.admm.fuse_epsilon = get_as<double>(j, "fuse_epsilon");
    if (j.contains("qif_tolerance")) c.qif.tolerance = get_as<double>(j, "qif_tolerance");
    if (j.contains("qif_max_iter")) c.qif.max_iterations = get_as<int>(j, "qif_max_iter");
    if (j.contains("gmm_tolerance")) c.gmm.tolerance = get_as<double>(j, "gmm_tolerance");
    if (j.contains("gmm_max_iter")) c.gmm.max_iterations = get_as<int>(j, "gmm_max_iter");
    if (j.contains("ci_level")) c.ci_level = get_as<double>(j, "ci_level");
    if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed");
    if (j.contains("exclude_homogeneous")) c.exclude_homogeneous = get_as<bool>(j, "exclude_homogeneous");
    if (j.contains("output_dir")) c.output_dir = get_as<std::string>(j, "output_dir");
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

std::string to_json(const RunConfig& c) {
    json j;
    j["link"] = std::string(c.link.name());
    j["basis"] = std::string(BasisSet::kind_name(c.basis));
    j["basis_order"] = c.basis_order;
    j["lambdas"] = c.lambdas;
    j["delta"] = c.penalty.delta;
    j["rho"] = c.penalty.rho;
    j["tol_primal"] = c.admm.tol_primal;
    j["tol_dual"] = c.admm.tol_dual;
    j["max_iter"] = c.admm.max_iter;
    j["fuse_epsilon"] = c.admm.fuse_epsilon;
    j["qif_tolerance"] = c.qif.tolerance;
    j["qif_max_iter"] = c.qif.max_iterations;
    j["gmm_tolerance"] = c.gmm.tolerance;
    j["gmm_max_iter"] = c.gmm.max_iterations;
    j["ci_level"] = c.ci_level;
    j["seed"] = c.seed;
    j["exclude_homogeneous"] = c.exclude_homogeneous;
    j["output_dir"] = c.output_dir;
    return j.dump();
}

// ---------------------------------------------------------------------------
// SimDesign
// ---------------------------------------------------------------------------

SimDesign parse_design(std::string_view json_text) {
    const json j = parse_json(json_text, "design");
    reject_unknown(j,
                   {"name", "studies", "sources", "covariates", "source_dims", "study_sizes", "assignment", "theta",
                    "link", "latent", "latent_corr", "covariate_corr", "basis", "basis_order", "lambdas", "delta",
                    "rho", "tol_primal", "tol_dual", "max_iter", "fuse_epsilon", "ci_level", "exclude_homogeneous",
                    "replicates", "seed", "gate"},
                   "design");
    SimDesign d;
    try {
        if (j.contains("name")) d.name = j.at("name").get<std::string>();
        d.studies = get_as<int>(j, "studies");
        d.sources = get_as<int>(j, "sources");
        if (j.contains("covariates")) d.covariates = get_as<Index>(j, "covariates");
        if (d.studies < 1 || d.sources < 1) throw ConfigError("studies and sources must be positive");
        d.source_dims = scalar_or_list<Index>(j.at("source_dims"), static_cast<std::size_t>(d.sources), "source_dims");
        d.study_sizes = scalar_or_list<Index>(j.at("study_sizes"), static_cast<std::size_t>(d.studies), "study_sizes");
        d.assignment = get_as<std::vector<int>>(j, "assignment");
        const auto theta = get_as<std::vector<std::vector<double>>>(j, "theta");
        if (theta.empty()) throw ConfigError("theta must list at least one group");
        d.theta.resize(d.covariates, static_cast<Index>(theta.size()));
        for (std::size_t g = 0; g < theta.size(); ++g) {
            if (static_cast<Index>(theta[g].size()) != d.covariates)
                throw ConfigError("theta group " + std::to_string(g + 1) + " must have q entries");
            for (Index r = 0; r < d.covariates; ++r) d.theta(r, static_cast<Index>(g)) = theta[g][static_cast<std::size_t>(r)];
        }
        if (j.contains("link")) d.link = LinkFamily::parse(get_as<std::string>(j, "link"));
        if (j.contains("latent")) d.latent = parse_latent(get_as<std::string>(j, "latent"));
        if (j.contains("latent_corr"))
            d.latent_corr = scalar_or_list<double>(j.at("latent_corr"), static_cast<std::size_t>(d.sources), "latent_corr");
        if (j.contains("covariate_corr"))
            d.covariate_corr =
                scalar_or_list<double>(j.at("covariate_corr"), static_cast<std::size_t>(d.sources), "covariate_corr");
        if (j.contains("basis")) d.basis = BasisSet::parse_kind(get_as<std::string>(j, "basis"));
        if (j.contains("basis_order")) d.basis_order = get_as<int>(j, "basis_order");
        d.lambdas = lambdas_from(j.at("lambdas"));
        if (j.contains("delta")) d.delta = get_as<double>(j, "delta");
        if (j.contains("rho")) d.rho = get_as<double>(j, "rho");
        if (j.contains("tol_primal")) d.admm.tol_primal = get_as<double>(j, "tol_primal");
        if (j.contains("tol_dual")) d.admm.tol_dual = get_as<double>(j, "tol_dual");
        if (j.contains("max_iter")) d.admm.max_iter = get_as<int>(j, "max_iter");
        if (j.contains("fuse_epsilon")) d.admm.fuse_epsilon = get_as<double>(j, "fuse_epsilon");
        if (j.contains("ci_level")) d.ci_level = get_as<double>(j, "ci_level");
        if (j.contains("exclude_homogeneous")) d.exclude_homogeneous = get_as<bool>(j, "exclude_homogeneous");
        if (j.contains("replicates")) d.replicates = get_as<int>(j, "replicates");
        if (j.contains("seed")) d.seed = get_as<std::uint64_t>(j, "seed");
        if (j.contains("gate")) {
            const json& g = j.at("gate");
            reject_unknown(g,
                           {"min_recovery", "cp_low", "cp_high", "min_rmse_ratio", "max_bias_over_ese",
                            "oracle_tolerance", "min_oracle_fraction"},
                           "gate");
            auto opt = [&](const char* key, std::optional<double>& out) {
                if (g.contains(key)) out = get_as<double>(g, key);
            };
            opt("min_recovery", d.gate.min_recovery);
            opt("cp_low", d.gate.cp_low);
            opt("cp_high", d.gate.cp_high);
            opt("min_rmse_ratio", d.gate.min_rmse_ratio);
            opt("max_bias_over_ese", d.gate.max_bias_over_ese);
            opt("oracle_tolerance", d.gate.oracle_tolerance);
            opt("min_oracle_fraction", d.gate.min_oracle_fraction);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("design: ") + e.what());
    }
    try {
        d.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const InputError& e) {
        throw ConfigError(std::string("design: ") + e.what());
    }
    return d;
}

SimDesign load_design(const std::filesystem::path& path) { return parse_design(read_file(path)); }

std::string to_json(const SimDesign& d) {
    json j;
    j["name"] = d.name;
    j["studies"] = d.studies;
    j["sources"] = d.sources;
    j["covariates"] = d.covariates;
    j["source_dims"] = d.source_dims;
    j["study_sizes"] = d.study_sizes;
    j["assignment"] = d.assignment;
    json theta = json::array();
    for (Index g = 0; g < d.theta.cols(); ++g) {
        std::vector<double> col(d.theta.col(g).data(), d.theta.col(g).data() + d.theta.rows());
        theta.push_back(col);
    }
    j["theta"] = theta;
    j["link"] = std::string(d.link.name());
    j["latent"] = latent_name(d.latent);
    j["latent_corr"] = d.latent_corr;
    j["covariate_corr"] = d.covariate_corr;
    j["basis"] = std::string(BasisSet::kind_name(d.basis));
    j["basis_order"] = d.basis_order;
    j["lambdas"] = d.lambdas;
    j["delta"] = d.delta;
    j["rho"] = d.rho;
    j["tol_primal"] = d.admm.tol_primal;
    j["tol_dual"] = d.admm.tol_dual;
    j["max_iter"] = d.admm.max_iter;
    j["fuse_epsilon"] = d.admm.fuse_epsilon;
    j["ci_level"] = d.ci_level;
    j["exclude_homogeneous"] = d.exclude_homogeneous;
    j["replicates"] = d.replicates;
    j["seed"] = d.seed;
    json gate = json::object();
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) gate[key] = *v;
    };
    put("min_recovery", d.gate.min_recovery);
    put("cp_low", d.gate.cp_low);
    put("cp_high", d.gate.cp_high);
    put("min_rmse_ratio", d.gate.min_rmse_ratio);
    put("max_bias_over_ese", d.gate.max_bias_over_ese);
    put("oracle_tolerance", d.gate.oracle_tolerance);
    put("min_oracle_fraction", d.gate.min_oracle_fraction);
    j["gate"] = gate;
    return j.dump();
}

// ---------------------------------------------------------------------------
// Long-format datasets
// ---------------------------------------------------------------------------

StudyDataset parse_dataset(std::string_view text, const DatasetSpec& spec) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw ParseError("dataset is empty", 0);

    // Header.
    const auto [header_line, header_text] = lines.front();
    const auto header = split(header_text, ',');
    std::map<std::string, std::size_t, std::less<>> column;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (!column.emplace(std::string(header[c]), c).second)
            fail_at(header_line, "duplicate column '" + std::string(header[c]) + "'");
    }
    for (const char* required : {"study", "source", "participant", "position", "y"})
        if (!column.count(required)) fail_at(header_line, std::string("header lacks column '") + required + "'");
    std::vector<std::size_t> xcols;
    for (std::size_t r = 1;; ++r) {
        const auto it = column.find("x" + std::to_string(r));
        if (it == column.end()) break;
        xcols.push_back(it->second);
    }
    if (xcols.empty()) fail_at(header_line, "header lacks covariate columns x1..xq");
    if (header.size() != 5 + xcols.size()) fail_at(header_line, "header has unexpected columns");
    const Index q = static_cast<Index>(xcols.size());

    struct Record {
        std::size_t line;
        int study;
        int source;
        std::string participant;
        long position;
        double y;
        std::vector<double> x;
    };
    std::vector<Record> records;
    records.reserve(lines.size() - 1);
    using Key = std::tuple<int, std::string, int, long>;
    std::map<Key, std::size_t> seen;
    std::map<std::string, std::pair<int, std::size_t>> home;  // participant -> (study, first line)

    for (std::size_t at = 1; at < lines.size(); ++at) {
        const auto [line, content] = lines[at];
        const auto cells = split(content, ',');
        if (cells.size() != header.size())
            fail_at(line, "expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()));
        Record rec;
        rec.line = line;
        rec.study = static_cast<int>(parse_integer(cells[column.at("study")], line, "study"));
        rec.source = static_cast<int>(parse_integer(cells[column.at("source")], line, "source"));
        rec.participant = std::string(cells[column.at("participant")]);
        if (rec.participant.empty()) fail_at(line, "missing value in column 'participant'");
        rec.position = parse_integer(cells[column.at("position")], line, "position");
        rec.y = parse_double(cells[column.at("y")], line, "y");
        if (!spec.link.in_support(rec.y))
            fail_at(line, "response " + std::string(cells[column.at("y")]) + " is not supported by the " +
                              std::string(spec.link.name()) + " family");
        rec.x.resize(static_cast<std::size_t>(q));
        for (Index r = 0; r < q; ++r) {
            const std::string name = "x" + std::to_string(r + 1);
            rec.x[static_cast<std::size_t>(r)] = parse_double(cells[xcols[static_cast<std::size_t>(r)]], line, name);
            if (!std::isfinite(rec.x[static_cast<std::size_t>(r)])) fail_at(line, "covariate " + name + " is not finite");
        }

        const Key key{rec.study, rec.participant, rec.source, rec.position};
        if (const auto it = seen.find(key); it != seen.end())
            fail_at(line, "duplicate key (study " + std::to_string(rec.study) + ", participant " + rec.participant +
                              ", source " + std::to_string(rec.source) + ", position " + std::to_string(rec.position) +
                              ") also on line " + std::to_string(records[it->second].line));
        const auto [h, fresh] = home.try_emplace(rec.participant, rec.study, line);
        if (!fresh && h->second.first != rec.study)
            fail_at(line, "participant " + rec.participant + " appears in study " + std::to_string(rec.study) +
                              " but was assigned to study " + std::to_string(h->second.first) + " on line " +
                              std::to_string(h->second.second));
        seen.emplace(key, records.size());
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw ParseError("dataset has no records", 0);

    int K = 0, J = 0;
    for (const Record& r : records) {
        K = std::max(K, r.study);
        J = std::max(J, r.source);
    }
    // Participants per study, in deterministic order.
    bool numeric_ids = true;
    for (const auto& [id, where] : home) {
        long v = 0;
        const auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), v);
        if (ec != std::errc() || ptr != id.data() + id.size()) numeric_ids = false;
    }
    std::vector<std::vector<std::string>> members(static_cast<std::size_t>(K));
    for (const auto& [id, where] : home) members[static_cast<std::size_t>(where.first - 1)].push_back(id);
    for (auto& list : members) {
        if (numeric_ids)
            std::sort(list.begin(), list.end(), [](const std::string& a, const std::string& b) {
                return std::stol(a) < std::stol(b);
            });
    }
    for (int k = 0; k < K; ++k)
        if (members[static_cast<std::size_t>(k)].empty())
            throw ParseError("study " + std::to_string(k + 1) + " has no participants (studies must be numbered 1..K)", 0);

    // Dimensions m_j from the largest position, then completeness checks.
    std::vector<long> dims(static_cast<std::size_t>(J), 0);
    for (const Record& r : records) dims[static_cast<std::size_t>(r.source - 1)] = std::max(dims[static_cast<std::size_t>(r.source - 1)], r.position);
    for (int j = 0; j < J; ++j)
        if (dims[static_cast<std::size_t>(j)] == 0)
            throw ParseError("source " + std::to_string(j + 1) + " has no records (sources must be numbered 1..J)", 0);

    std::vector<std::vector<SourceBlock>> studies(static_cast<std::size_t>(K));
    std::map<std::string, Index> row_of;
    for (int k = 0; k < K; ++k) {
        const auto& ids = members[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = static_cast<Index>(i);
        for (int j = 0; j < J; ++j) {
            SourceBlock block;
            block.study = k;
            block.source = j;
            block.link = spec.link;
            const Index m = dims[static_cast<std::size_t>(j)];
            try {
                block.basis = BasisSet::make(spec.basis, m, spec.basis_order);
            } catch (const InputError& e) {
                throw ParseError("source " + std::to_string(j + 1) + ": " + e.what(), 0);
            }
            block.responses = MatrixXd::Constant(static_cast<Index>(ids.size()), m, std::nan(""));
            block.design = MatrixXd::Constant(static_cast<Index>(ids.size()) * m, q, std::nan(""));
            studies[static_cast<std::size_t>(k)].push_back(std::move(block));
        }
    }
    for (const Record& r : records) {
        SourceBlock& b = studies[static_cast<std::size_t>(r.study - 1)][static_cast<std::size_t>(r.source - 1)];
        const Index i = row_of.at(r.participant);
        const Index a = r.position - 1;
        b.responses(i, a) = r.y;
        for (Index c = 0; c < q; ++c) b.design(i * b.dimension() + a, c) = r.x[static_cast<std::size_t>(c)];
    }
    for (int k = 0; k < K; ++k)
        for (int j = 0; j < J; ++j) {
            const SourceBlock& b = studies[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
            for (Index i = 0; i < b.participants(); ++i)
                for (Index a = 0; a < b.dimension(); ++a)
                    if (std::isnan(b.responses(i, a))) {
                        const std::string& id = members[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
                        throw ParseError("participant " + id + " (first seen on line " +
                                             std::to_string(home.at(id).second) + ") lacks source " +
                                             std::to_string(j + 1) + " position " + std::to_string(a + 1) +
                                             " (ragged positions)",
                                         home.at(id).second);
                    }
        }
    return StudyDataset(std::move(studies));
}

StudyDataset load_dataset(const std::filesystem::path& path, const DatasetSpec& spec) {
    return parse_dataset(read_file(path), spec);
}

std::string format_dataset(const StudyDataset& data) {
    std::string out = "study,source,participant,position,y";
    for (Index c = 0; c < data.covariates(); ++c) out += ",x" + std::to_string(c + 1);
    out += '\n';
    long id = 0;
    for (int k = 0; k < data.studies(); ++k) {
        for (Index i = 0; i < data.study_size(k); ++i) {
            ++id;
            for (int j = 0; j < data.sources(); ++j) {
                const SourceBlock& b = data.block(j, k);
                for (Index a = 0; a < b.dimension(); ++a) {
                    out += std::to_string(k + 1) + ',' + std::to_string(j + 1) + ',' + std::to_string(id) + ',' +
                           std::to_string(a + 1) + ',' + format_number(b.responses(i, a));
                    for (Index c = 0; c < b.covariates(); ++c) {
                        out += ',';
                        out += format_number(b.design(i * b.dimension() + a, c));
                    }
                    out += '\n';
                }
            }
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& path, const StudyDataset& data) {
    write_atomic(path, format_dataset(data));
}

// ---------------------------------------------------------------------------
// Formatting, digests, artifacts
// ---------------------------------------------------------------------------

std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    if (x == 0.0) return "0";
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    if (ec != std::errc()) throw NumericalError("number formatting failed");
    return std::string(buf, ptr);
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
        throw NumericalError("SHA-256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * length);
    for (unsigned int b = 0; b < length; ++b) {
        out += hex[digest[b] >> 4];
        out += hex[digest[b] & 0xF];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp-" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw InputError("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

void Table::add(std::vector<std::string> row) {
    if (row.size() != columns.size()) throw InputError("table row has the wrong number of cells");
    rows.push_back(std::move(row));
}

std::string Table::render(std::string_view run_digest) const {
    std::string out = "# run ";
    out += run_digest;
    out += '\n';
    auto emit = [&out](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (c) out += ',';
            out += cells[c];
        }
        out += '\n';
    };
    emit(columns);
    for (const auto& row : rows) emit(row);
    return out;
}

RunArtifacts::RunArtifacts(std::filesystem::path directory, std::string command, std::string config_json)
    : directory_(std::move(directory)), command_(std::move(command)), config_json_(std::move(config_json)) {}

void RunArtifacts::add_input(const std::string& role, const std::filesystem::path& path) {
    inputs_.emplace_back(role, sha256_file(path));
    digest_.clear();
}

void RunArtifacts::add_input_text(const std::string& role, std::string_view bytes) {
    inputs_.emplace_back(role, sha256_hex(bytes));
    digest_.clear();
}

namespace {

json digest_basis(const std::string& command, const json& config, const json& inputs) {
    json j;
    j["tool"] = "mfuse";
    j["version"] = std::string(kVersion);
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = inputs;
    return j;
}

json inputs_json(const std::vector<std::pair<std::string, std::string>>& inputs) {
    json arr = json::array();
    for (const auto& [role, digest] : inputs) arr.push_back(json{{"role", role}, {"sha256", digest}});
    return arr;
}

}  // namespace

const std::string& RunArtifacts::run_digest() {
    if (digest_.empty())
        digest_ = sha256_hex(digest_basis(command_, json::parse(config_json_), inputs_json(inputs_)).dump());
    return digest_;
}

void RunArtifacts::write_table(const std::string& name, const Table& table) {
    write_text(name, table.render(run_digest()));
}

void RunArtifacts::write_text(const std::string& name, std::string_view bytes) {
    if (bytes.find(run_digest()) == std::string_view::npos)
        throw InputError("artifact '" + name + "' does not embed the run digest");
    write_atomic(directory_ / name, bytes);
    outputs_.emplace_back(name, sha256_hex(bytes));
}

void RunArtifacts::finish() {
    json j = digest_basis(command_, json::parse(config_json_), inputs_json(inputs_));
    j["run_digest"] = run_digest();
    json arts = json::array();
    for (const auto& [name, digest] : outputs_) arts.push_back(json{{"name", name}, {"sha256", digest}});
    j["artifacts"] = arts;
    write_atomic(directory_ / "manifest.json", j.dump(2) + "\n");
}

VerifiedRun verify_artifacts(const std::filesystem::path& directory) {
    const std::filesystem::path manifest_path = directory / "manifest.json";
    json j;
    try {
        j = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
        throw VerificationError("manifest is not valid JSON: " + std::string(e.what()));
    }
    VerifiedRun out;
    try {
        out.command = j.at("command").get<std::string>();
        out.run_digest = j.at("run_digest").get<std::string>();
        const std::string expected =
            sha256_hex(digest_basis(out.command, j.at("config"), j.at("inputs")).dump());
        if (j.at("version").get<std::string>() != kVersion)
            throw VerificationError("manifest was written by version " + j.at("version").get<std::string>());
        if (expected != out.run_digest) throw VerificationError("run digest does not match the manifest contents");
        for (const json& a : j.at("artifacts")) {
            const std::string name = a.at("name").get<std::string>();
            const std::string bytes = read_file(directory / name);
            if (sha256_hex(bytes) != a.at("sha256").get<std::string>())
                throw VerificationError("artifact '" + name + "' does not match its recorded digest");
            if (bytes.find(out.run_digest) == std::string::npos)
                throw VerificationError("artifact '" + name + "' does not embed the run digest");
            out.artifacts.push_back(name);
        }
    } catch (const json::exception& e) {
        throw VerificationError("manifest is malformed: " + std::string(e.what()));
    }
    return out;
}

Table read_table(const std::filesystem::path& path, std::string_view expected_digest) {
    const std::string text = read_file(path);
    const std::size_t eol = text.find('\n');
    const std::string_view first = trim(std::string_view(text).substr(0, eol));
    constexpr std::string_view prefix = "# run ";
    if (first.substr(0, prefix.size()) != prefix) throw VerificationError("'" + path.string() + "' lacks a run digest line");
    if (!expected_digest.empty() && first.substr(prefix.size()) != expected_digest)
        throw VerificationError("'" + path.string() + "' belongs to a different run");
    Table t;
    const auto lines = lines_of(text);
    if (lines.empty()) throw ParseError("'" + path.string() + "' has no header", 0);
    for (std::string_view c : split(lines.front().second, ',')) t.columns.emplace_back(c);
    for (std::size_t at = 1; at < lines.size(); ++at) {
        std::vector<std::string> row;
        for (std::string_view c : split(lines[at].second, ',')) row.emplace_back(c);
        if (row.size() != t.columns.size()) fail_at(lines[at].first, "wrong number of cells");
        t.rows.push_back(std::move(row));
    }
    return t;
}

PartitionMap parse_partition_table(const Table& table, int sources_per_study, int studies, Index q) {
    auto index_of = [&](const char* name) {
        const auto it = std::find(table.columns.begin(), table.columns.end(), name);
        if (it == table.columns.end()) throw ParseError(std::string("partition table lacks column '") + name + "'", 0);
        return static_cast<std::size_t>(it - table.columns.begin());
    };
    const std::size_t ck = index_of("study"), cj = index_of("source"), cg = index_of("group");
    std::vector<int> assignment(static_cast<std::size_t>(sources_per_study * studies), 0);
    std::vector<bool> filled(assignment.size(), false);
    std::size_t line = 2;
    for (const auto& row : table.rows) {
        ++line;
        const long k = parse_integer(row[ck], line, "study");
        const long j = parse_integer(row[cj], line, "source");
        const long g = parse_integer(row[cg], line, "group");
        if (k > studies || j > sources_per_study) fail_at(line, "source outside the dataset grid");
        const std::size_t l = static_cast<std::size_t>((k - 1) * sources_per_study + (j - 1));
        if (filled[l]) fail_at(line, "source listed twice");
        filled[l] = true;
        assignment[l] = static_cast<int>(g);
    }
    if (std::find(filled.begin(), filled.end(), false) != filled.end())
        throw ParseError("partition table does not list every source", 0);
    return PartitionMap(std::move(assignment), q);
}

std::string_view library_version() noexcept { return kVersion; }

}  // namespace mfuse

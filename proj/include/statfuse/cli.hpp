#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "statfuse/analysis.hpp"
#include "statfuse/common.hpp"
#include "statfuse/microdata.hpp"
#include "statfuse/pipeline.hpp"
#include "statfuse/synthbench.hpp"
#include "statfuse/validation.hpp"

// Command-line front end: train, fuse, analyze, validate, simulate.

namespace statfuse::cli {

enum ExitCode : int { kOk = 0, kContract = 1, kIo = 2 };

struct RunConfig {
    std::string subcommand;
    std::string donor, recipient, schema, spec, bundle, implicates_dir, config, out;
    int threads = 0;
    double memory_mb = 0.0;
    std::size_t chunk_rows = 0;
    std::uint64_t seed = 1;
    bool seed_set = false;
    int implicates = 10;
    std::string format = "per-implicate";
    bool approximate = false;
    // analyze
    std::string stat = "mean", variable, by;
    bool replicate_weights = false;
    double confidence = 0.90;
    double replicate_factor = 4.0;
    // validate
    std::string subset_vars;
    bool verbose = false, quiet = false;
};

namespace detail {

/// STATFUSE_THREADS wins over --threads; 0 means all hardware threads.
inline int resolve_threads(int flag) {
    if (const char* env = std::getenv("STATFUSE_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ContractError("STATFUSE_THREADS must be a positive integer");
        return static_cast<int>(v);
    }
    if (flag < 0) throw ContractError("--threads must be at least 1");
    if (flag == 0) return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
    return flag;
}

inline void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ContractError("missing --" + what);
    if (!std::filesystem::exists(path)) throw IoError(what + " not found: " + path);
}

inline Microdata load_table(const std::string& path, const std::string& schema, const std::string& what) {
    require_file(path, what);
    if (!schema.empty()) {
        require_file(schema, "schema");
        return load_microdata(path, load_schema(schema));
    }
    return load_microdata(path);
}

inline void ensure_dir(const std::string& dir) {
    if (dir.empty()) throw ContractError("missing --out");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
    const auto probe = std::filesystem::path(dir) / ".statfuse_write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw IoError("output directory is not writable: " + dir);
    }
    std::filesystem::remove(probe, ec);
}

inline std::string timestamp() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

/// Config hash over every setting that can change outputs.
inline std::string config_hash(const RunConfig& c, const std::vector<std::string>& config_files) {
    Fnv1a h;
    for (const std::string& s : {c.subcommand, c.stat, c.variable, c.by, c.subset_vars, c.format})
        h.update(s + '\x1f');
    for (double v : {static_cast<double>(c.seed), static_cast<double>(c.implicates), c.confidence, c.replicate_factor,
                     c.replicate_weights ? 1.0 : 0.0, c.approximate ? 1.0 : 0.0})
        h.update(v);
    for (const auto& f : config_files)
        if (!f.empty() && std::filesystem::is_regular_file(f)) h.update(read_file(f));
    return hex64(h.digest());
}

/// Rows that fit in the memory budget, from a per-row byte estimate of the
/// recipient columns, the expectation matrices and the M output tables.
inline std::size_t chunk_rows_for_budget(double budget_mb, const FusionBundle& b, const Microdata& recipient,
                                         int implicates) {
    std::size_t expectation_cols = 0;
    for (const auto& s : b.steps)
        for (const auto& v : s.variables)
            expectation_cols += v.spec.kind == ColumnKind::categorical ? v.spec.levels.size()
                                                                       : b.spec.percentiles.size() + 2;
    const double per_row = 8.0 * static_cast<double>(recipient.columns().size() + b.predictor_specs.size() +
                                                     2 * expectation_cols +
                                                     static_cast<std::size_t>(implicates) * b.fusion_specs().size()) +
                           64.0;
    const double rows = budget_mb * 1024.0 * 1024.0 / per_row;
    if (rows < 1.0) throw ContractError("--memory-mb is too small to hold a single row");
    return static_cast<std::size_t>(std::min(rows, 1e9));
}

class Manifest {
public:
    Manifest(const RunConfig& cfg, int threads) : start_(std::chrono::steady_clock::now()) {
        j_["tool"] = "statfuse";
        j_["version"] = kVersion;
        j_["subcommand"] = cfg.subcommand;
        j_["started_at"] = timestamp();
        j_["threads"] = threads;
        j_["seed"] = cfg.seed;
        j_["inputs"] = nlohmann::json::object();
    }
    void input(const std::string& role, const std::string& path, const std::string& fingerprint) {
        j_["inputs"][role] = {{"path", path}, {"fingerprint", fingerprint}};
    }
    nlohmann::json& operator[](const std::string& k) { return j_[k]; }
    void write(const std::string& dir, const std::string& hash) {
        j_["config_hash"] = hash;
        j_["wall_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        const auto path = (std::filesystem::path(dir) / "run_manifest.json").string();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        out << j_.dump(2) << '\n';
        if (!out) throw IoError("write failed: " + path);
    }

private:
    nlohmann::json j_;
    std::chrono::steady_clock::time_point start_;
};

inline std::string file_fingerprint(const std::string& path) {
    Fnv1a h;
    h.update(read_file(path));
    return hex64(h.digest());
}

inline std::string dir_fingerprint(const std::string& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Fnv1a h;
    for (const auto& f : files) {
        h.update(f.filename().string());
        h.update(read_file(f.string()));
    }
    return hex64(h.digest());
}

}  // namespace detail

// ============================================================================
// Subcommands
// ============================================================================

inline void cmd_train(const RunConfig& c, int threads) {
    detail::require_file(c.spec, "spec");
    const Microdata donor = detail::load_table(c.donor, c.schema, "donor");
    FusionSpec spec = load_fusion_spec(c.spec);
    if (c.seed_set) spec.seed = c.seed;
    detail::ensure_dir(c.out);
    detail::Manifest man(c, threads);
    man.input("donor", c.donor, donor.fingerprint());
    man.input("spec", c.spec, detail::file_fingerprint(c.spec));
    const FusionBundle bundle = train_fusion(donor, spec, TrainOptions{threads});
    save_bundle(bundle, c.out);
    man["models"] = bundle.model_count();
    man["degenerate_models"] = bundle.manifest.value("degenerate_models", nlohmann::json::array());
    man.write(c.out, detail::config_hash(c, {c.spec}));
    log_event(LogLevel::info, "train_done", "out=" + c.out + " models=" + std::to_string(bundle.model_count()));
}

inline void cmd_fuse(const RunConfig& c, int threads) {
    if (c.bundle.empty()) throw ContractError("missing --bundle");
    if (!std::filesystem::is_directory(c.bundle)) throw IoError("bundle directory not found: " + c.bundle);
    const FusionBundle bundle = load_bundle(c.bundle);
    const Microdata recipient = detail::load_table(c.recipient, c.schema, "recipient");
    if (c.implicates < 1) throw ContractError("--implicates must be at least 1");
    if (const auto rep = check_compatibility(bundle, recipient); !rep.ok())
        throw ContractError("recipient incompatible with bundle: " + join(rep.violations, "; "));
    ImplicateFormat format;
    if (c.format == "per-implicate") format = ImplicateFormat::per_implicate;
    else if (c.format == "long") format = ImplicateFormat::long_format;
    else throw ContractError("--format must be per-implicate or long");
    FuseOptions opt;
    opt.implicates = c.implicates;
    opt.seed = c.seed_set ? c.seed : bundle.spec.seed;
    opt.threads = threads;
    opt.knn = c.approximate ? match::KnnMode::approximate : match::KnnMode::exact;
    opt.chunk_rows = bundle.spec.chunk_rows;
    if (c.chunk_rows > 0) opt.chunk_rows = c.chunk_rows;
    else if (c.memory_mb > 0.0) opt.chunk_rows = detail::chunk_rows_for_budget(c.memory_mb, bundle, recipient, c.implicates);
    detail::ensure_dir(c.out);
    detail::Manifest man(c, threads);
    man.input("bundle", c.bundle, detail::dir_fingerprint(c.bundle));
    man.input("recipient", c.recipient, recipient.fingerprint());
    const std::vector<std::string> ids = recipient.row_ids();
    ImplicateWriter writer(c.out, format, bundle.fusion_specs(), static_cast<std::size_t>(c.implicates));
    std::size_t chunks = 0;
    fuse_stream(bundle, recipient, opt, [&](std::size_t lo, const std::vector<Matrix>& chunk) {
        writer.write_chunk(ids, lo, chunk);
        ++chunks;
    });
    writer.finish();
    man["chunk_rows"] = opt.chunk_rows;
    man["chunks"] = chunks;
    man["implicates"] = c.implicates;
    man["seed"] = opt.seed;
    man.write(c.out, detail::config_hash(c, {}));
    log_event(LogLevel::info, "fuse_done", "out=" + c.out + " rows=" + std::to_string(recipient.rows()) +
                                               " chunks=" + std::to_string(chunks));
}

inline void cmd_analyze(const RunConfig& c, int threads) {
    if (c.implicates_dir.empty()) throw ContractError("missing --implicates-dir");
    if (!std::filesystem::is_directory(c.implicates_dir))
        throw IoError("implicate directory not found: " + c.implicates_dir);
    const ImplicateSet set = load_implicates(c.implicates_dir);
    const Microdata recipient = detail::load_table(c.recipient, c.schema, "recipient");
    if (c.variable.empty()) throw ContractError("missing --var");
    analysis::AnalysisRequest req;
    req.statistic = analysis::parse_statistic(c.stat);
    req.variable = c.variable;
    req.by = split_list(c.by);
    req.use_replicate_weights = c.replicate_weights;
    req.confidence = c.confidence;
    req.replicate_factor = c.replicate_factor;
    req.seed = c.seed;
    detail::ensure_dir(c.out);
    detail::Manifest man(c, threads);
    man.input("implicates", c.implicates_dir, detail::dir_fingerprint(c.implicates_dir));
    man.input("recipient", c.recipient, recipient.fingerprint());
    const auto rows = analysis::estimate(set, recipient, req);
    analysis::write_estimates((std::filesystem::path(c.out) / "estimates.csv").string(), req, rows);
    man["subgroups"] = rows.size();
    man.write(c.out, detail::config_hash(c, {}));
    log_event(LogLevel::info, "analyze_done", "out=" + c.out + " rows=" + std::to_string(rows.size()));
}

inline void cmd_validate(const RunConfig& c, int threads) {
    if (c.bundle.empty()) throw ContractError("missing --bundle");
    if (!std::filesystem::is_directory(c.bundle)) throw IoError("bundle directory not found: " + c.bundle);
    const FusionBundle bundle = load_bundle(c.bundle);
    const Microdata donor = detail::load_table(c.donor, c.schema, "donor");
    validation::ValidationOptions opt;
    opt.implicates = c.implicates;
    opt.seed = c.seed_set ? c.seed : bundle.spec.seed;
    opt.threads = threads;
    opt.confidence = c.confidence;
    if (c.chunk_rows > 0) opt.chunk_rows = c.chunk_rows;
    detail::ensure_dir(c.out);
    detail::Manifest man(c, threads);
    man.input("bundle", c.bundle, detail::dir_fingerprint(c.bundle));
    man.input("donor", c.donor, donor.fingerprint());
    const auto result = validation::internal_validate(bundle, donor, split_list(c.subset_vars), opt);
    const auto curves = validation::build_curves(result.cells);
    validation::emit_report(result.cells, curves, c.out);
    man["subsets"] = result.subsets;
    man["cells"] = result.cells.size();
    man["skipped_small_subsets"] = result.skipped_small;
    nlohmann::json excluded = nlohmann::json::object();
    for (const auto& cv : curves) excluded[validation::to_string(cv.metric)] = cv.excluded;
    man["excluded_cells"] = excluded;
    man.write(c.out, detail::config_hash(c, {}));
    log_event(LogLevel::info, "validate_done", "out=" + c.out + " cells=" + std::to_string(result.cells.size()));
}

inline void cmd_simulate(const RunConfig& c, int threads) {
    detail::require_file(c.config, "config");
    synth::SynthConfig cfg = synth::load_config(c.config);
    if (c.seed_set) cfg.seed = c.seed;
    detail::ensure_dir(c.out);
    detail::Manifest man(c, threads);
    man.input("config", c.config, detail::file_fingerprint(c.config));
    const synth::SynthSample s = synth::generate_population(cfg);
    namespace fs = std::filesystem;
    save_microdata((fs::path(c.out) / "donor.csv").string(), s.donor);
    save_microdata((fs::path(c.out) / "recipient.csv").string(), s.recipient);
    synth::write_truth((fs::path(c.out) / "truth_donor.csv").string(), s.donor_truth);
    synth::write_truth((fs::path(c.out) / "truth_recipient.csv").string(), s.recipient_truth);
    nlohmann::json truth;
    truth["seed"] = cfg.seed;
    truth["donor_rows"] = s.donor.rows();
    truth["recipient_rows"] = s.recipient.rows();
    const auto& w = s.recipient.weights();
    const double sw = analysis::weight_sum(w);
    for (const auto& v : s.recipient_truth.variables) {
        nlohmann::json jv;
        if (v.link == synth::Link::multiclass) {
            for (std::size_t l = 0; l < v.levels.size(); ++l) {
                double acc = 0.0;
                for (std::size_t r = 0; r < w.size(); ++r) acc += w[r] * v.probs(r, l);
                jv["share"][v.levels[l]] = acc / sw;
            }
        } else {
            double acc = 0.0;
            for (std::size_t r = 0; r < w.size(); ++r) acc += w[r] * v.mean[r];
            jv["mean"] = acc / sw;
            if (v.link == synth::Link::zero_inflated) {
                double z = 0.0;
                for (std::size_t r = 0; r < w.size(); ++r) z += w[r] * v.zero[r];
                jv["zero_share"] = z / sw;
            }
        }
        truth["recipient_full_sample"][v.name] = jv;
    }
    {
        const auto path = (fs::path(c.out) / "truth.json").string();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        out << truth.dump(2) << '\n';
    }
    man.write(c.out, detail::config_hash(c, {c.config}));
    log_event(LogLevel::info, "simulate_done", "out=" + c.out);
}

// ============================================================================
// Entry point
// ============================================================================

/// Parses argv, runs the subcommand and maps failures to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"statfuse: donor-to-recipient survey data fusion"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    RunConfig c;
    auto common = [&](CLI::App* s) {
        s->add_option("--out", c.out, "Output directory")->required();
        s->add_option("--threads", c.threads, "Worker threads (0 = all cores; STATFUSE_THREADS overrides)");
        s->add_option("--seed", c.seed, "Random seed")->each([&](const std::string&) { c.seed_set = true; });
        s->add_flag("-v,--verbose", c.verbose, "Debug logging");
        s->add_flag("-q,--quiet", c.quiet, "Errors only");
    };
    auto* train = app.add_subcommand("train", "Train a fusion bundle on donor microdata");
    train->add_option("--donor", c.donor, "Donor CSV")->required();
    train->add_option("--schema", c.schema, "Schema file (default: sidecar .schema)");
    train->add_option("--spec", c.spec, "Fusion spec file")->required();
    common(train);

    auto* fuse_cmd = app.add_subcommand("fuse", "Simulate fusion variables onto a recipient");
    fuse_cmd->add_option("--bundle", c.bundle, "Bundle directory")->required();
    fuse_cmd->add_option("--recipient", c.recipient, "Recipient CSV")->required();
    fuse_cmd->add_option("--schema", c.schema, "Schema file (default: sidecar .schema)");
    fuse_cmd->add_option("--implicates", c.implicates, "Number of implicates");
    fuse_cmd->add_option("--format", c.format, "per-implicate or long");
    fuse_cmd->add_option("--chunk-rows", c.chunk_rows, "Rows per prediction chunk");
    fuse_cmd->add_option("--memory-mb", c.memory_mb, "Memory budget in MiB; sets chunk rows");
    fuse_cmd->add_flag("--approximate", c.approximate, "Approximate kd-tree search");
    common(fuse_cmd);

    auto* analyze = app.add_subcommand("analyze", "Pooled estimates over implicates");
    analyze->add_option("--implicates-dir", c.implicates_dir, "Directory written by fuse")->required();
    analyze->add_option("--recipient", c.recipient, "Recipient CSV")->required();
    analyze->add_option("--schema", c.schema, "Schema file (default: sidecar .schema)");
    analyze->add_option("--stat", c.stat, "mean, proportion, sum, count or median");
    analyze->add_option("--var", c.variable, "Target variable")->required();
    analyze->add_option("--by", c.by, "Comma-separated subgroup variables");
    analyze->add_flag("--replicate-weights", c.replicate_weights, "Add replicate-weight variance");
    analyze->add_option("--confidence", c.confidence, "Confidence level");
    analyze->add_option("--replicate-factor", c.replicate_factor, "Replicate variance factor");
    common(analyze);

    auto* validate = app.add_subcommand("validate", "Internal validation on the donor");
    validate->add_option("--bundle", c.bundle, "Bundle directory")->required();
    validate->add_option("--donor", c.donor, "Donor CSV")->required();
    validate->add_option("--schema", c.schema, "Schema file (default: sidecar .schema)");
    validate->add_option("--subset-vars", c.subset_vars, "Comma-separated subset variables")->required();
    validate->add_option("--implicates", c.implicates, "Number of implicates");
    validate->add_option("--chunk-rows", c.chunk_rows, "Rows per prediction chunk");
    validate->add_option("--confidence", c.confidence, "Confidence level");
    common(validate);

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic donor and recipient");
    simulate->add_option("--config", c.config, "Synthetic population config")->required();
    common(simulate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << '\n';
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return kContract;
    }
    c.subcommand = app.get_subcommands().front()->get_name();
    set_log_level(c.quiet ? LogLevel::quiet : c.verbose ? LogLevel::debug : LogLevel::info);
    try {
        const int threads = detail::resolve_threads(c.threads);
        log_event(LogLevel::info, "start", "subcommand=" + c.subcommand + " threads=" + std::to_string(threads));
        if (c.subcommand == "train") cmd_train(c, threads);
        else if (c.subcommand == "fuse") cmd_fuse(c, threads);
        else if (c.subcommand == "analyze") cmd_analyze(c, threads);
        else if (c.subcommand == "validate") cmd_validate(c, threads);
        else cmd_simulate(c, threads);
        return kOk;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kIo;
    } catch (const ContractError& e) {
        err << "error: " << e.what() << '\n';
        return kContract;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kContract;
    }
}

}  // namespace statfuse::cli

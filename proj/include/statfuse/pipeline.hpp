#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"
#include "statfuse/common.hpp"
#include "statfuse/gbdt.hpp"
#include "statfuse/matchcore.hpp"
#include "statfuse/microdata.hpp"
#include "statfuse/prescreen.hpp"

// Training and fusion orchestration.

namespace statfuse {

// ============================================================================
// Fusion specification
// ============================================================================

struct FusionStep {
    std::vector<std::string> variables;  // more than one: fused as a block
    bool is_block() const { return variables.size() > 1; }
    bool operator==(const FusionStep&) const = default;
};

struct FusionSpec {
    std::vector<FusionStep> steps;
    std::vector<double> percentiles{0.166, 0.5, 0.833};
    std::size_t K = 500;
    std::size_t block_k = 10;
    int implicates = 1;
    std::uint64_t seed = 1;
    std::size_t reduction = 0;       // k-means anchors; 0 disables
    std::size_t chunk_rows = 50000;
    std::vector<std::string> predictors;  // empty: every donor column with the predictor role
    bool prescreen = true;
    double screen_threshold = 0.95;
    gbdt::TrainParams train;

    std::vector<std::string> fusion_variables() const {
        std::vector<std::string> out;
        for (const auto& s : steps) out.insert(out.end(), s.variables.begin(), s.variables.end());
        return out;
    }

    void validate() const {
        if (steps.empty()) throw ContractError("fusion spec: no steps");
        std::set<std::string> seen;
        for (const auto& s : steps) {
            if (s.variables.empty()) throw ContractError("fusion spec: empty step");
            for (const auto& v : s.variables)
                if (!seen.insert(v).second) throw ContractError("fusion spec: variable '" + v + "' appears twice");
        }
        if (percentiles.empty()) throw ContractError("fusion spec: percentiles must not be empty");
        for (std::size_t i = 0; i < percentiles.size(); ++i) {
            if (!(percentiles[i] > 0.0 && percentiles[i] < 1.0))
                throw ContractError("fusion spec: percentiles must lie strictly inside (0, 1)");
            if (i > 0 && !(percentiles[i] > percentiles[i - 1]))
                throw ContractError("fusion spec: percentiles must be strictly increasing");
        }
        if (K < 1) throw ContractError("fusion spec: K must be positive");
        if (block_k < 1) throw ContractError("fusion spec: block_k must be positive");
        if (implicates < 1) throw ContractError("fusion spec: implicates must be at least 1");
        if (chunk_rows < 1) throw ContractError("fusion spec: chunk_rows must be positive");
        if (!(screen_threshold >= 0.0 && screen_threshold <= 1.0))
            throw ContractError("fusion spec: screen_threshold must lie in [0, 1]");
        train.validate();
    }
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& text, const std::string& key) {
    std::vector<double> out;
    for (const auto& tok : split_list(text)) {
        double v;
        if (!parse_double(tok, v)) throw ContractError("fusion spec: bad number '" + tok + "' in " + key);
        out.push_back(v);
    }
    return out;
}

template <class T>
T parse_integer(const std::string& text, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(text, &pos);
        if (pos != trim(text).size() || v < 0) throw std::invalid_argument(key);
        return static_cast<T>(v);
    } catch (const std::exception&) {
        throw ContractError("fusion spec: '" + key + "' must be a non-negative integer");
    }
}

inline bool parse_bool(const std::string& text, const std::string& key) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ContractError("fusion spec: '" + key + "' must be true or false");
}

}  // namespace detail

/// INI text. `[fusion] steps = a, b+c, d` declares three steps, the second a
/// block of b and c. Learner settings live under `[training]`.
inline FusionSpec parse_fusion_spec(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ContractError(std::string("fusion spec: ") + e.what());
    }
    FusionSpec spec;
    const auto fusion = tree.get_child_optional("fusion");
    if (!fusion) throw ContractError("fusion spec: missing [fusion] section");
    static const std::set<std::string> fusion_keys{"steps",      "percentiles", "K",         "block_k",
                                                   "implicates", "seed",        "reduction", "chunk_rows",
                                                   "predictors", "prescreen",   "screen_threshold"};
    for (const auto& [key, node] : *fusion) {
        if (!fusion_keys.count(key)) throw ContractError("fusion spec: unknown key '" + key + "'");
        const std::string v = node.get_value<std::string>();
        if (key == "steps") {
            for (const auto& step : split_list(v)) {
                FusionStep s;
                for (const auto& var : split(step, '+'))
                    if (!trim(var).empty()) s.variables.push_back(trim(var));
                spec.steps.push_back(std::move(s));
            }
        } else if (key == "percentiles") {
            spec.percentiles = detail::parse_double_list(v, key);
        } else if (key == "K") {
            spec.K = detail::parse_integer<std::size_t>(v, key);
        } else if (key == "block_k") {
            spec.block_k = detail::parse_integer<std::size_t>(v, key);
        } else if (key == "implicates") {
            spec.implicates = detail::parse_integer<int>(v, key);
        } else if (key == "seed") {
            spec.seed = detail::parse_integer<std::uint64_t>(v, key);
        } else if (key == "reduction") {
            spec.reduction = detail::parse_integer<std::size_t>(v, key);
        } else if (key == "chunk_rows") {
            spec.chunk_rows = detail::parse_integer<std::size_t>(v, key);
        } else if (key == "predictors") {
            spec.predictors = split_list(v);
        } else if (key == "prescreen") {
            spec.prescreen = detail::parse_bool(v, key);
        } else if (key == "screen_threshold") {
            const auto d = detail::parse_double_list(v, key);
            if (d.size() != 1) throw ContractError("fusion spec: screen_threshold takes one value");
            spec.screen_threshold = d[0];
        }
    }
    if (const auto training = tree.get_child_optional("training")) {
        for (const auto& [key, node] : *training) {
            const std::string v = node.get_value<std::string>();
            auto& t = spec.train;
            if (key == "leaf_grid") {
                t.leaf_grid.clear();
                for (double d : detail::parse_double_list(v, key)) t.leaf_grid.push_back(static_cast<int>(d));
            } else if (key == "feature_subsample") {
                t.feature_subsample = detail::parse_double_list(v, key).at(0);
            } else if (key == "min_node_frac") {
                t.min_node_frac = detail::parse_double_list(v, key).at(0);
            } else if (key == "min_node_floor") {
                t.min_node_floor = detail::parse_integer<int>(v, key);
            } else if (key == "folds") {
                t.folds = detail::parse_integer<int>(v, key);
            } else if (key == "max_iterations") {
                t.max_iterations = detail::parse_integer<int>(v, key);
            } else if (key == "learning_rate") {
                t.learning_rate = detail::parse_double_list(v, key).at(0);
            } else if (key == "early_stopping_rounds") {
                t.early_stopping_rounds = detail::parse_integer<int>(v, key);
            } else {
                throw ContractError("fusion spec: unknown training key '" + key + "'");
            }
        }
    }
    spec.train.seed = spec.seed;
    spec.validate();
    return spec;
}

inline FusionSpec load_fusion_spec(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("spec file not found: " + path);
    return parse_fusion_spec(read_file(path));
}

inline std::string format_fusion_spec(const FusionSpec& spec) {
    std::ostringstream out;
    std::vector<std::string> steps;
    for (const auto& s : spec.steps) steps.push_back(join(s.variables, "+"));
    std::vector<std::string> pct, grid;
    for (double p : spec.percentiles) pct.push_back(format_double(p));
    for (int l : spec.train.leaf_grid) grid.push_back(std::to_string(l));
    out << "[fusion]\n"
        << "steps = " << join(steps, ", ") << "\n"
        << "percentiles = " << join(pct, ", ") << "\n"
        << "K = " << spec.K << "\n"
        << "block_k = " << spec.block_k << "\n"
        << "implicates = " << spec.implicates << "\n"
        << "seed = " << spec.seed << "\n"
        << "reduction = " << spec.reduction << "\n"
        << "chunk_rows = " << spec.chunk_rows << "\n";
    if (!spec.predictors.empty()) out << "predictors = " << join(spec.predictors, ", ") << "\n";
    out << "prescreen = " << (spec.prescreen ? "true" : "false") << "\n"
        << "screen_threshold = " << format_double(spec.screen_threshold) << "\n\n"
        << "[training]\n"
        << "leaf_grid = " << join(grid, ", ") << "\n"
        << "feature_subsample = " << format_double(spec.train.feature_subsample) << "\n"
        << "min_node_frac = " << format_double(spec.train.min_node_frac) << "\n"
        << "min_node_floor = " << spec.train.min_node_floor << "\n"
        << "folds = " << spec.train.folds << "\n"
        << "max_iterations = " << spec.train.max_iterations << "\n"
        << "learning_rate = " << format_double(spec.train.learning_rate) << "\n"
        << "early_stopping_rounds = " << spec.train.early_stopping_rounds << "\n";
    return out.str();
}

/// Predictors the spec draws on: explicit list or every donor predictor column.
inline std::vector<std::string> spec_predictors(const FusionSpec& spec, const Microdata& donor) {
    if (!spec.predictors.empty()) return spec.predictors;
    return donor.names_with_role(ColumnRole::predictor);
}

inline CompatibilityReport check_compatibility(const Microdata& donor, const Microdata& recipient,
                                               const FusionSpec& spec) {
    return check_compatibility(donor, recipient, spec_predictors(spec, donor), spec.fusion_variables());
}

// ============================================================================
// Bundle model
// ============================================================================

struct ScreenInfo {
    std::string target;           // "classifier" or "conditional"
    std::string family;
    std::vector<std::string> selected;
    double deviance_at_selection = 0.0;
    double full_deviance = 0.0;
    bool flagged = false;
    bool skipped = false;         // screening disabled or too few rows
};

struct VariableModels {
    ColumnSpec spec;
    std::vector<std::string> classifier_features;   // categorical model or zero stage
    std::vector<std::string> conditional_features;  // mean and quantile models
    std::optional<gbdt::TreeEnsemble> classifier;
    std::vector<gbdt::TreeEnsemble> conditional;    // mean, then one per percentile
    std::vector<ScreenInfo> screens;

    bool is_categorical() const { return spec.kind == ColumnKind::categorical; }
    bool is_semicontinuous() const { return spec.kind == ColumnKind::semicontinuous; }
};

struct StepBundle {
    std::vector<VariableModels> variables;
    bool block = false;
    std::optional<match::ScalingParams> scaling;
    std::optional<match::DonorPools> pools;   // single continuous or semicontinuous
    Matrix block_scaled;                      // block: scaled donor expectations
    Matrix block_records;                     // block: donor values, level codes for categoricals

    std::vector<std::string> features() const {
        std::vector<std::string> out;
        for (const auto& v : variables) {
            for (const auto& f : v.classifier_features)
                if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
            for (const auto& f : v.conditional_features)
                if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
        }
        return out;
    }
};

struct FusionBundle {
    FusionSpec spec;
    std::vector<ColumnSpec> predictor_specs;  // donor-side kinds and levels of model inputs
    std::vector<StepBundle> steps;
    nlohmann::json manifest;

    std::vector<ColumnSpec> fusion_specs() const {
        std::vector<ColumnSpec> out;
        for (const auto& s : steps)
            for (const auto& v : s.variables) out.push_back(v.spec);
        return out;
    }

    std::size_t model_count() const {
        std::size_t n = 0;
        for (const auto& s : steps)
            for (const auto& v : s.variables) n += (v.classifier ? 1 : 0) + v.conditional.size();
        return n;
    }
};

/// Recipient-side check against what the bundle's models actually consume.
inline CompatibilityReport check_compatibility(const FusionBundle& bundle, const Microdata& recipient) {
    CompatibilityReport report;
    for (const auto& p : bundle.predictor_specs) {
        const Column* r = recipient.find(p.name);
        if (!r) {
            report.violations.push_back("predictor '" + p.name + "' missing from recipient");
            continue;
        }
        if (r->spec.kind != p.kind) {
            report.violations.push_back("predictor '" + p.name + "' kind differs: donor " + to_string(p.kind) +
                                        ", recipient " + to_string(r->spec.kind));
            continue;
        }
        if (p.kind == ColumnKind::categorical) {
            const std::size_t before = report.violations.size();
            for (const auto& level : p.levels)
                if (r->spec.level_index(level) < 0)
                    report.violations.push_back("predictor '" + p.name + "': donor level '" + level +
                                                "' absent in recipient");
            for (const auto& level : r->spec.levels)
                if (p.level_index(level) < 0)
                    report.violations.push_back("predictor '" + p.name + "': recipient level '" + level +
                                                "' absent in donor");
            if (report.violations.size() == before && p.levels != r->spec.levels)
                report.violations.push_back("predictor '" + p.name + "': level order differs");
        }
    }
    for (const auto& f : bundle.fusion_specs())
        if (recipient.has(f.name)) report.violations.push_back("fusion variable '" + f.name + "' present in recipient");
    return report;
}

// ============================================================================
// Feature frames
// ============================================================================

namespace detail {

inline gbdt::FeatureColumn feature_from(const Column& col, std::size_t lo, std::size_t hi) {
    gbdt::FeatureColumn f;
    f.name = col.spec.name;
    f.categorical = col.spec.is_categorical();
    f.levels = col.spec.levels;
    f.values.reserve(hi - lo);
    for (std::size_t r = lo; r < hi; ++r)
        f.values.push_back(f.categorical ? static_cast<double>(col.codes[r]) : col.values[r]);
    return f;
}

inline gbdt::FeatureFrame frame_from(const Microdata& data, const std::vector<std::string>& names, std::size_t lo,
                                     std::size_t hi) {
    gbdt::FeatureFrame frame;
    for (const auto& n : names) frame.columns.push_back(feature_from(data.column(n), lo, hi));
    return frame;
}

inline gbdt::FeatureFrame frame_from(const Microdata& data, const std::vector<std::string>& names) {
    return frame_from(data, names, 0, data.rows());
}

inline std::vector<double> target_values(const Column& col) {
    if (col.spec.is_categorical()) return {col.codes.begin(), col.codes.end()};
    return col.values;
}

inline nlohmann::json model_summary(const std::string& role, const gbdt::TreeEnsemble& m, const std::string& file) {
    return {{"role", role},
            {"objective", m.objective.name()},
            {"percentile", m.objective.kind == gbdt::ObjectiveKind::pinball ? m.objective.percentile : 0.0},
            {"n_iterations", m.n_iterations},
            {"num_leaves", m.num_leaves},
            {"cv_loss", std::isfinite(m.cv_loss) ? nlohmann::json(m.cv_loss) : nlohmann::json(nullptr)},
            {"degenerate", m.degenerate},
            {"features", m.feature_names()},
            {"file", file}};
}

inline nlohmann::json screen_summary(const ScreenInfo& s) {
    return {{"target", s.target},         {"family", s.family},
            {"selected", s.selected},     {"deviance_at_selection", s.deviance_at_selection},
            {"full_deviance", s.full_deviance}, {"flagged", s.flagged},
            {"skipped", s.skipped}};
}

}  // namespace detail

// ============================================================================
// Expectations
// ============================================================================

/// Conditional-expectation columns for one variable. Categorical: v level
/// probabilities. Continuous: mean then quantiles. Semicontinuous: the same,
/// preceded by P(nonzero) when `with_zero_stage` is set.
inline Matrix variable_expectations(const VariableModels& v, const gbdt::FeatureFrame& frame, bool with_zero_stage) {
    const std::size_t n = frame.rows();
    if (v.is_categorical()) {
        const Matrix probs = gbdt::predict(*v.classifier, frame);
        if (v.classifier->objective.kind != gbdt::ObjectiveKind::binary_logloss) return probs;
        Matrix out(n, 2);
        for (std::size_t r = 0; r < n; ++r) {
            out(r, 0) = 1.0 - probs(r, 0);
            out(r, 1) = probs(r, 0);
        }
        return out;
    }
    const bool zero = v.is_semicontinuous() && with_zero_stage;
    Matrix out(n, v.conditional.size() + (zero ? 1 : 0));
    std::size_t c = 0;
    if (zero) {
        const Matrix p = gbdt::predict(*v.classifier, frame);
        for (std::size_t r = 0; r < n; ++r) out(r, 0) = p(r, 0);
        c = 1;
    }
    for (const auto& m : v.conditional) {
        const Matrix pred = gbdt::predict(m, frame);
        for (std::size_t r = 0; r < n; ++r) out(r, c) = pred(r, 0);
        ++c;
    }
    return out;
}

inline Matrix hconcat(const std::vector<Matrix>& parts) {
    if (parts.empty()) return {};
    std::size_t cols = 0;
    for (const auto& p : parts) cols += p.cols;
    Matrix out(parts.front().rows, cols);
    for (std::size_t r = 0; r < out.rows; ++r) {
        std::size_t c = 0;
        for (const auto& p : parts)
            for (std::size_t j = 0; j < p.cols; ++j) out(r, c++) = p(r, j);
    }
    return out;
}

// ============================================================================
// Training
// ============================================================================

struct TrainOptions {
    int threads = 1;
};

namespace detail {

inline ScreenInfo run_screen(const Microdata& data, const std::vector<std::string>& candidates,
                             const std::vector<double>& y, prescreen::Family family, int classes,
                             const FusionSpec& spec, const std::string& target) {
    ScreenInfo info;
    info.target = target;
    info.family = prescreen::to_string(family);
    if (!spec.prescreen || candidates.empty() || data.rows() < 10) {
        info.selected = candidates;
        info.skipped = true;
        return info;
    }
    const prescreen::Design design = prescreen::expand_predictors(data, candidates);
    const prescreen::LassoPath path = prescreen::lasso_path(design, y, family, data.weights(), classes);
    const prescreen::ScreenResult res = prescreen::screen_predictors(path, spec.screen_threshold);
    info.deviance_at_selection = res.deviance_at_selection;
    info.full_deviance = res.full_deviance;
    info.flagged = res.flagged;
    // keep the caller's predictor order
    for (const auto& c : candidates)
        if (std::find(res.selected.begin(), res.selected.end(), c) != res.selected.end()) info.selected.push_back(c);
    return info;
}

inline std::vector<std::string> with_chained(std::vector<std::string> selected, const std::vector<std::string>& chained) {
    selected.insert(selected.end(), chained.begin(), chained.end());
    return selected;
}

inline gbdt::TreeEnsemble fit_logged(const gbdt::FeatureFrame& frame, const std::vector<double>& y,
                                     const std::vector<double>& w, const gbdt::Objective& obj,
                                     const gbdt::TrainParams& params, const std::string& label) {
    gbdt::TreeEnsemble m = gbdt::fit_gbm(frame, y, w, obj, params);
    log_event(LogLevel::debug, "model_fitted",
              "model=" + label + " objective=" + obj.name() + " iterations=" + std::to_string(m.n_iterations) +
                  " leaves=" + std::to_string(m.num_leaves) + " degenerate=" + (m.degenerate ? "1" : "0"));
    return m;
}

/// Mean model then one pinball model per percentile.
inline std::vector<gbdt::TreeEnsemble> fit_conditional(const gbdt::FeatureFrame& frame, const std::vector<double>& y,
                                                       const std::vector<double>& w, const FusionSpec& spec,
                                                       const gbdt::TrainParams& params, const std::string& name) {
    std::vector<gbdt::TreeEnsemble> out;
    out.push_back(fit_logged(frame, y, w, gbdt::Objective::squared_error(), params, name + ":mean"));
    for (double P : spec.percentiles)
        out.push_back(fit_logged(frame, y, w, gbdt::Objective::pinball(P), params, name + ":q" + format_double(P)));
    return out;
}

inline VariableModels train_variable(const Microdata& donor, const std::string& name,
                                     const std::vector<std::string>& candidates,
                                     const std::vector<std::string>& chained, const FusionSpec& spec,
                                     const gbdt::TrainParams& params) {
    const Column& col = donor.column(name);
    if (col.spec.role == ColumnRole::weight || col.spec.role == ColumnRole::id ||
        col.spec.role == ColumnRole::replicate_weight)
        throw ContractError("fusion variable '" + name + "' has role " + to_string(col.spec.role));
    VariableModels v;
    v.spec = col.spec;
    const std::vector<double>& w = donor.weights();
    switch (col.spec.kind) {
        case ColumnKind::categorical: {
            const int levels = static_cast<int>(col.spec.levels.size());
            if (levels < 2) throw ContractError("fusion variable '" + name + "' needs at least 2 levels");
            const std::vector<double> y = target_values(col);
            const bool binary = levels == 2;
            ScreenInfo s = run_screen(donor, candidates, y,
                                      binary ? prescreen::Family::binomial : prescreen::Family::multinomial, levels,
                                      spec, "classifier");
            v.classifier_features = with_chained(s.selected, chained);
            v.screens.push_back(std::move(s));
            const auto frame = frame_from(donor, v.classifier_features);
            v.classifier = fit_logged(frame, y, w,
                                      binary ? gbdt::Objective::binary() : gbdt::Objective::multiclass(levels),
                                      params, name);
            break;
        }
        case ColumnKind::continuous: {
            if (spec.percentiles.size() < 2)
                throw ContractError("continuous fusion needs at least 2 percentiles (variable '" + name + "')");
            ScreenInfo s = run_screen(donor, candidates, col.values, prescreen::Family::gaussian, 1, spec,
                                      "conditional");
            v.conditional_features = with_chained(s.selected, chained);
            v.screens.push_back(std::move(s));
            const auto frame = frame_from(donor, v.conditional_features);
            v.conditional = fit_conditional(frame, col.values, w, spec, params, name);
            break;
        }
        case ColumnKind::semicontinuous: {
            if (spec.percentiles.size() < 2)
                throw ContractError("continuous fusion needs at least 2 percentiles (variable '" + name + "')");
            std::vector<double> nonzero(col.values.size());
            std::vector<std::size_t> nz_rows;
            for (std::size_t r = 0; r < col.values.size(); ++r) {
                nonzero[r] = col.values[r] != 0.0 ? 1.0 : 0.0;
                if (col.values[r] != 0.0) nz_rows.push_back(r);
            }
            if (nz_rows.size() < static_cast<std::size_t>(std::max(10, params.folds)))
                throw ContractError("semicontinuous variable '" + name + "' has too few nonzero donor values");
            ScreenInfo s0 = run_screen(donor, candidates, nonzero, prescreen::Family::binomial, 2, spec, "classifier");
            v.classifier_features = with_chained(s0.selected, chained);
            v.screens.push_back(std::move(s0));
            v.classifier = fit_logged(frame_from(donor, v.classifier_features), nonzero, w, gbdt::Objective::binary(),
                                      params, name + ":nonzero");
            const Microdata sub = donor.select_rows(nz_rows);
            const Column& zc = sub.column(name);
            ScreenInfo s1 = run_screen(sub, candidates, zc.values, prescreen::Family::gaussian, 1, spec, "conditional");
            v.conditional_features = with_chained(s1.selected, chained);
            v.screens.push_back(std::move(s1));
            v.conditional = fit_conditional(frame_from(sub, v.conditional_features), zc.values, sub.weights(), spec,
                                            params, name);
            break;
        }
    }
    return v;
}

}  // namespace detail

inline FusionBundle train_fusion(const Microdata& donor, const FusionSpec& spec, TrainOptions opt = {}) {
    spec.validate();
    FusionBundle bundle;
    bundle.spec = spec;
    const std::vector<std::string> candidates = spec_predictors(spec, donor);
    const std::vector<std::string> fusion = spec.fusion_variables();
    for (const auto& p : candidates) {
        const Column& c = donor.column(p);
        if (std::find(fusion.begin(), fusion.end(), p) != fusion.end())
            throw ContractError("'" + p + "' is both a predictor and a fusion variable");
        if (c.spec.role == ColumnRole::weight || c.spec.role == ColumnRole::id ||
            c.spec.role == ColumnRole::replicate_weight)
            throw ContractError("predictor '" + p + "' has role " + to_string(c.spec.role));
    }
    for (const auto& f : fusion)
        if (!donor.has(f)) throw ContractError("fusion variable '" + f + "' missing from donor");

    gbdt::TrainParams params = spec.train;
    params.seed = spec.seed;
    params.threads = opt.threads;
    std::vector<std::string> chained;
    std::set<std::string> used_predictors;

    for (std::size_t si = 0; si < spec.steps.size(); ++si) {
        const FusionStep& step = spec.steps[si];
        log_event(LogLevel::info, "train_step",
                  "step=" + std::to_string(si + 1) + " variables=" + join(step.variables, "+"));
        StepBundle sb;
        sb.block = step.is_block();
        for (const auto& var : step.variables) {
            gbdt::TrainParams p = params;
            p.seed = hash_combine(spec.seed, fnv1a(var));
            sb.variables.push_back(detail::train_variable(donor, var, candidates, chained, spec, p));
        }
        for (const auto& f : sb.features())
            if (std::find(chained.begin(), chained.end(), f) == chained.end()) used_predictors.insert(f);

        const gbdt::FeatureFrame frame = detail::frame_from(donor, sb.features());
        match::PoolOptions popt;
        popt.K = spec.K;
        popt.reduction = spec.reduction;
        popt.seed = hash_combine(spec.seed, 0x9001 + si);
        popt.threads = opt.threads;
        if (sb.block) {
            std::vector<Matrix> parts;
            for (const auto& v : sb.variables) parts.push_back(variable_expectations(v, frame, true));
            const Matrix D = hconcat(parts);
            sb.scaling = match::robust_scale_fit(D);
            sb.block_scaled = match::robust_scale_apply(*sb.scaling, D);
            sb.block_records = Matrix(donor.rows(), sb.variables.size());
            for (std::size_t j = 0; j < sb.variables.size(); ++j) {
                const Column& c = donor.column(sb.variables[j].spec.name);
                for (std::size_t r = 0; r < donor.rows(); ++r) sb.block_records(r, j) = donor.numeric(c, r);
            }
        } else if (!sb.variables.front().is_categorical()) {
            const VariableModels& v = sb.variables.front();
            const Column& zc = donor.column(v.spec.name);
            std::vector<std::size_t> rows;
            for (std::size_t r = 0; r < donor.rows(); ++r)
                if (!v.is_semicontinuous() || zc.values[r] != 0.0) rows.push_back(r);
            const Microdata sub = v.is_semicontinuous() ? donor.select_rows(rows) : donor;
            const gbdt::FeatureFrame sub_frame = detail::frame_from(sub, v.conditional_features);
            const Matrix D = variable_expectations(v, sub_frame, false);
            sb.scaling = match::robust_scale_fit(D);
            const Matrix scaled = match::robust_scale_apply(*sb.scaling, D);
            sb.pools = match::build_donor_pools(scaled, D, *sb.scaling, sub.column(v.spec.name).values,
                                                spec.percentiles, popt);
        }
        for (const auto& var : step.variables) chained.push_back(var);
        bundle.steps.push_back(std::move(sb));
    }
    for (const auto& name : used_predictors) bundle.predictor_specs.push_back(donor.column(name).spec);

    nlohmann::json m;
    m["format"] = "statfuse-bundle";
    m["format_version"] = 1;
    m["software_version"] = kVersion;
    m["donor_fingerprint"] = donor.fingerprint();
    m["donor_rows"] = donor.rows();
    m["spec"] = format_fusion_spec(spec);
    m["degenerate_models"] = nlohmann::json::array();
    for (std::size_t si = 0; si < bundle.steps.size(); ++si)
        for (const auto& v : bundle.steps[si].variables) {
            if (v.classifier && v.classifier->degenerate) m["degenerate_models"].push_back(v.spec.name + ":classifier");
            for (std::size_t j = 0; j < v.conditional.size(); ++j)
                if (v.conditional[j].degenerate)
                    m["degenerate_models"].push_back(v.spec.name + ":conditional" + std::to_string(j));
        }
    bundle.manifest = std::move(m);
    return bundle;
}

// ============================================================================
// Bundle persistence
// ============================================================================

inline constexpr char kBlockMagic[8] = {'S', 'F', 'B', 'L', 'O', 'C', 'K', '1'};

namespace detail {

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write failed: " + p.string());
}

template <class Fn>
void write_binary_file(const std::filesystem::path& p, Fn&& fn) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    fn(out);
    if (!out) throw IoError("write failed: " + p.string());
}

inline std::ifstream open_input(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    return in;
}

inline nlohmann::json spec_json(const ColumnSpec& c) {
    return {{"name", c.name}, {"kind", to_string(c.kind)}, {"role", to_string(c.role)}, {"levels", c.levels}};
}

inline ColumnSpec spec_from_json(const nlohmann::json& j) {
    ColumnSpec c;
    c.name = j.at("name").get<std::string>();
    c.kind = parse_kind(j.at("kind").get<std::string>());
    c.role = parse_role(j.at("role").get<std::string>());
    c.levels = j.at("levels").get<std::vector<std::string>>();
    return c;
}

}  // namespace detail

/// Bundle directory: manifest.json, spec.cfg, one text file per ensemble and
/// binary scaling, pool and block records.
inline void save_bundle(const FusionBundle& b, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create bundle directory " + dir + ": " + ec.message());
    nlohmann::json m = b.manifest;
    m["predictors"] = nlohmann::json::array();
    for (const auto& p : b.predictor_specs) m["predictors"].push_back(detail::spec_json(p));
    m["steps"] = nlohmann::json::array();
    detail::write_text_file(fs::path(dir) / "spec.cfg", format_fusion_spec(b.spec));
    for (std::size_t si = 0; si < b.steps.size(); ++si) {
        const StepBundle& s = b.steps[si];
        const std::string prefix = "step" + std::to_string(si + 1);
        nlohmann::json js;
        js["block"] = s.block;
        js["variables"] = nlohmann::json::array();
        for (std::size_t vi = 0; vi < s.variables.size(); ++vi) {
            const VariableModels& v = s.variables[vi];
            nlohmann::json jv;
            jv["spec"] = detail::spec_json(v.spec);
            jv["classifier_features"] = v.classifier_features;
            jv["conditional_features"] = v.conditional_features;
            jv["screens"] = nlohmann::json::array();
            for (const auto& sc : v.screens) jv["screens"].push_back(detail::screen_summary(sc));
            jv["models"] = nlohmann::json::array();
            const std::string vbase = prefix + "_v" + std::to_string(vi + 1);
            if (v.classifier) {
                const std::string file = vbase + "_classifier.model";
                detail::write_binary_file(fs::path(dir) / file, [&](std::ostream& o) { gbdt::save_ensemble(o, *v.classifier); });
                jv["models"].push_back(detail::model_summary("classifier", *v.classifier, file));
            }
            for (std::size_t j = 0; j < v.conditional.size(); ++j) {
                const std::string role = j == 0 ? "mean" : "quantile";
                const std::string file = vbase + "_" + (j == 0 ? std::string("mean") : "q" + std::to_string(j)) + ".model";
                detail::write_binary_file(fs::path(dir) / file, [&](std::ostream& o) { gbdt::save_ensemble(o, v.conditional[j]); });
                jv["models"].push_back(detail::model_summary(role, v.conditional[j], file));
            }
            js["variables"].push_back(std::move(jv));
        }
        if (s.scaling) {
            const std::string file = prefix + ".scaling";
            detail::write_binary_file(fs::path(dir) / file, [&](std::ostream& o) { match::save_scaling(o, *s.scaling); });
            js["scaling"] = file;
        }
        if (s.pools) {
            const std::string file = prefix + ".pools";
            detail::write_binary_file(fs::path(dir) / file, [&](std::ostream& o) { match::save_pools(o, *s.pools); });
            js["pools"] = file;
            js["anchors"] = s.pools->size();
            std::vector<double> ks(s.pools->k_star.begin(), s.pools->k_star.end());
            js["k_star_median"] = median(ks);
        }
        if (s.block) {
            const std::string file = prefix + ".block";
            detail::write_binary_file(fs::path(dir) / file, [&](std::ostream& o) {
                match::binio::put_magic(o, kBlockMagic);
                match::binio::put_matrix(o, s.block_scaled);
                match::binio::put_matrix(o, s.block_records);
            });
            js["block_file"] = file;
        }
        m["steps"].push_back(std::move(js));
    }
    detail::write_text_file(fs::path(dir) / "manifest.json", m.dump(2) + "\n");
}

inline FusionBundle load_bundle(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    if (!fs::exists(manifest_path)) throw IoError("bundle manifest not found: " + manifest_path.string());
    FusionBundle b;
    try {
        b.manifest = nlohmann::json::parse(read_file(manifest_path.string()));
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("bundle manifest unreadable: " + std::string(e.what()));
    }
    const nlohmann::json& m = b.manifest;
    if (m.value("format", "") != "statfuse-bundle" || m.value("format_version", 0) != 1)
        throw ContractError("unsupported bundle format in " + dir);
    b.spec = parse_fusion_spec(read_file((fs::path(dir) / "spec.cfg").string()));
    for (const auto& p : m.at("predictors")) b.predictor_specs.push_back(detail::spec_from_json(p));
    for (const auto& js : m.at("steps")) {
        StepBundle s;
        s.block = js.at("block").get<bool>();
        for (const auto& jv : js.at("variables")) {
            VariableModels v;
            v.spec = detail::spec_from_json(jv.at("spec"));
            v.classifier_features = jv.at("classifier_features").get<std::vector<std::string>>();
            v.conditional_features = jv.at("conditional_features").get<std::vector<std::string>>();
            for (const auto& sc : jv.at("screens")) {
                ScreenInfo info;
                info.target = sc.at("target").get<std::string>();
                info.family = sc.at("family").get<std::string>();
                info.selected = sc.at("selected").get<std::vector<std::string>>();
                info.deviance_at_selection = sc.at("deviance_at_selection").get<double>();
                info.full_deviance = sc.at("full_deviance").get<double>();
                info.flagged = sc.at("flagged").get<bool>();
                info.skipped = sc.at("skipped").get<bool>();
                v.screens.push_back(std::move(info));
            }
            for (const auto& jm : jv.at("models")) {
                auto in = detail::open_input(fs::path(dir) / jm.at("file").get<std::string>());
                gbdt::TreeEnsemble e = gbdt::load_ensemble(in);
                if (jm.at("role").get<std::string>() == "classifier") v.classifier = std::move(e);
                else v.conditional.push_back(std::move(e));
            }
            s.variables.push_back(std::move(v));
        }
        if (js.contains("scaling")) {
            auto in = detail::open_input(fs::path(dir) / js.at("scaling").get<std::string>());
            s.scaling = match::load_scaling(in);
        }
        if (js.contains("pools")) {
            auto in = detail::open_input(fs::path(dir) / js.at("pools").get<std::string>());
            s.pools = match::load_pools(in);
        }
        if (js.contains("block_file")) {
            auto in = detail::open_input(fs::path(dir) / js.at("block_file").get<std::string>());
            match::binio::expect_magic(in, kBlockMagic);
            s.block_scaled = match::binio::get_matrix(in);
            s.block_records = match::binio::get_matrix(in);
        }
        b.steps.push_back(std::move(s));
    }
    if (b.steps.size() != b.spec.steps.size()) throw ContractError("bundle steps do not match its spec");
    return b;
}

// ============================================================================
// Fusion
// ============================================================================

/// Simulated fusion variables: one N x V matrix per implicate, categorical
/// cells as level codes, rows aligned with `ids`.
struct ImplicateSet {
    std::vector<std::string> ids;
    std::vector<ColumnSpec> variables;
    std::vector<Matrix> implicates;

    std::size_t rows() const { return ids.size(); }
    std::size_t count() const { return implicates.size(); }

    std::size_t variable_index(const std::string& name) const {
        for (std::size_t j = 0; j < variables.size(); ++j)
            if (variables[j].name == name) return j;
        throw ContractError("implicate set has no variable '" + name + "'");
    }
};

/// Inverse-CDF draw over levels in declared order; rows are renormalized.
inline std::size_t fuse_categorical(std::span<const double> probs, StreamRng& rng) {
    double total = 0.0;
    for (double p : probs) total += std::max(p, 0.0);
    if (!(total > 0.0)) throw ContractError("fuse_categorical: probabilities sum to zero");
    const double u = rng.uniform() * total;
    double cum = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        cum += std::max(probs[k], 0.0);
        if (u < cum) return k;
    }
    for (std::size_t k = probs.size(); k-- > 0;)
        if (probs[k] > 0.0) return k;
    return probs.size() - 1;
}

struct FuseOptions {
    int implicates = 1;
    std::uint64_t seed = 1;
    std::size_t chunk_rows = 50000;
    int threads = 1;
    match::KnnMode knn = match::KnnMode::exact;
};

/// Receives one finished chunk: rows [lo, lo + n) for every implicate.
using ChunkSink = std::function<void(std::size_t lo, const std::vector<Matrix>& chunk)>;

namespace detail {

struct StepPrep {
    std::vector<Matrix> probs;              // per variable: categorical probabilities
    std::vector<std::vector<double>> p_nonzero;  // per variable: semicontinuous zero stage
    std::vector<std::uint32_t> anchor;      // single continuous step
    match::KnnResult block_nn;              // block step
};

inline StepPrep prepare_step(const StepBundle& s, const FusionSpec& spec, const gbdt::FeatureFrame& frame,
                             const FuseOptions& opt) {
    StepPrep prep;
    const std::size_t n = frame.rows();
    if (s.block) {
        std::vector<Matrix> parts;
        for (const auto& v : s.variables) parts.push_back(variable_expectations(v, frame, true));
        const Matrix scaled = match::robust_scale_apply(*s.scaling, hconcat(parts));
        const std::size_t k = std::min(spec.block_k, s.block_scaled.rows);
        prep.block_nn = match::knn_search(s.block_scaled, scaled, k, opt.knn, 1);
        return prep;
    }
    const VariableModels& v = s.variables.front();
    prep.probs.resize(1);
    prep.p_nonzero.resize(1);
    if (v.is_categorical()) {
        prep.probs[0] = variable_expectations(v, frame, false);
        return prep;
    }
    if (v.is_semicontinuous()) {
        const Matrix p = gbdt::predict(*v.classifier, frame);
        prep.p_nonzero[0] = p.column(0);
    }
    const Matrix scaled = match::robust_scale_apply(*s.scaling, variable_expectations(v, frame, false));
    prep.anchor = match::nearest_anchor(*s.pools, scaled, 1, opt.knn);
    (void)n;
    return prep;
}

/// Draws the step's variables for every chunk row into `out` (columns at `col`).
inline void draw_step(const StepBundle& s, const StepPrep& prep, std::vector<StreamRng>& rngs, Matrix& out,
                      std::size_t col) {
    const std::size_t n = rngs.size();
    if (s.block) {
        const std::size_t k = prep.block_nn.k;
        for (std::size_t r = 0; r < n; ++r) {
            const std::uint32_t donor = prep.block_nn.neighbors(r)[rngs[r].below(k)];
            for (std::size_t j = 0; j < s.variables.size(); ++j) out(r, col + j) = s.block_records(donor, j);
        }
        return;
    }
    const VariableModels& v = s.variables.front();
    if (v.is_categorical()) {
        for (std::size_t r = 0; r < n; ++r)
            out(r, col) = static_cast<double>(
                fuse_categorical(std::span<const double>(prep.probs[0].row(r), prep.probs[0].cols), rngs[r]));
        return;
    }
    for (std::size_t r = 0; r < n; ++r) {
        if (v.is_semicontinuous() && !(rngs[r].uniform() < prep.p_nonzero[0][r])) {
            out(r, col) = 0.0;
            continue;
        }
        out(r, col) = match::draw_from_pool(*s.pools, prep.anchor[r], rngs[r]);
    }
}

inline bool step_uses(const StepBundle& s, const std::set<std::string>& names) {
    for (const auto& f : s.features())
        if (names.count(f)) return true;
    return false;
}

}  // namespace detail

/// Chunked multi-implicate fusion. Every (row id, implicate) pair owns one
/// random stream consumed in step order, so output does not depend on chunking,
/// thread count or row order.
inline void fuse_stream(const FusionBundle& bundle, const Microdata& recipient, const FuseOptions& opt,
                        const ChunkSink& sink) {
    if (opt.implicates < 1) throw ContractError("fuse: implicates must be at least 1");
    if (opt.chunk_rows < 1) throw ContractError("fuse: chunk_rows must be positive");
    for (const auto& p : bundle.predictor_specs) {
        const Column* c = recipient.find(p.name);
        if (!c) throw ContractError("fuse: recipient lacks predictor '" + p.name + "'");
        if (c->spec.kind != p.kind) throw ContractError("fuse: predictor '" + p.name + "' kind differs from donor");
    }
    const std::vector<ColumnSpec> vars = bundle.fusion_specs();
    std::set<std::string> fusion_names;
    for (const auto& v : vars) fusion_names.insert(v.name);
    std::vector<std::size_t> step_col;
    {
        std::size_t c = 0;
        for (const auto& s : bundle.steps) {
            step_col.push_back(c);
            c += s.variables.size();
        }
    }
    std::vector<std::string> x_names;
    for (const auto& p : bundle.predictor_specs) x_names.push_back(p.name);
    const std::vector<std::string> ids = recipient.row_ids();
    std::vector<std::uint64_t> id_hash(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) id_hash[r] = fnv1a(ids[r]);
    const auto M = static_cast<std::size_t>(opt.implicates);

    for (std::size_t lo = 0; lo < recipient.rows(); lo += opt.chunk_rows) {
        const std::size_t hi = std::min(recipient.rows(), lo + opt.chunk_rows);
        const std::size_t n = hi - lo;
        const gbdt::FeatureFrame x_frame = detail::frame_from(recipient, x_names, lo, hi);
        // Steps whose models see no fusion variable are predicted once per chunk.
        std::vector<std::optional<detail::StepPrep>> shared(bundle.steps.size());
        for (std::size_t si = 0; si < bundle.steps.size(); ++si)
            if (!detail::step_uses(bundle.steps[si], fusion_names))
                shared[si] = detail::prepare_step(bundle.steps[si], bundle.spec, x_frame, opt);

        std::vector<Matrix> chunk(M);
        parallel_for(M, opt.threads, [&](std::size_t m) {
            Matrix out(n, vars.size());
            std::vector<StreamRng> rngs(n);
            for (std::size_t r = 0; r < n; ++r) rngs[r] = StreamRng(opt.seed, m + 1, id_hash[lo + r]);
            gbdt::FeatureFrame frame = x_frame;
            for (std::size_t si = 0; si < bundle.steps.size(); ++si) {
                const StepBundle& s = bundle.steps[si];
                if (shared[si]) {
                    detail::draw_step(s, *shared[si], rngs, out, step_col[si]);
                } else {
                    const detail::StepPrep prep = detail::prepare_step(s, bundle.spec, frame, opt);
                    detail::draw_step(s, prep, rngs, out, step_col[si]);
                }
                for (std::size_t j = 0; j < s.variables.size(); ++j) {
                    const ColumnSpec& spec = s.variables[j].spec;
                    gbdt::FeatureColumn f;
                    f.name = spec.name;
                    f.categorical = spec.kind == ColumnKind::categorical;
                    f.levels = spec.levels;
                    f.values = out.column(step_col[si] + j);
                    frame.columns.push_back(std::move(f));
                }
            }
            chunk[m] = std::move(out);
        });
        log_event(LogLevel::debug, "fuse_chunk", "lo=" + std::to_string(lo) + " rows=" + std::to_string(n));
        sink(lo, chunk);
    }
}

inline ImplicateSet fuse(const FusionBundle& bundle, const Microdata& recipient, const FuseOptions& opt) {
    ImplicateSet set;
    set.ids = recipient.row_ids();
    set.variables = bundle.fusion_specs();
    set.implicates.assign(static_cast<std::size_t>(opt.implicates), Matrix(recipient.rows(), set.variables.size()));
    fuse_stream(bundle, recipient, opt, [&](std::size_t lo, const std::vector<Matrix>& chunk) {
        for (std::size_t m = 0; m < chunk.size(); ++m)
            for (std::size_t r = 0; r < chunk[m].rows; ++r)
                std::copy(chunk[m].row(r), chunk[m].row(r) + chunk[m].cols, set.implicates[m].row(lo + r));
    });
    return set;
}

// ============================================================================
// Implicate files
// ============================================================================

enum class ImplicateFormat { per_implicate, long_format };

namespace detail {

inline std::string format_cell(const ColumnSpec& spec, double v) {
    if (spec.kind == ColumnKind::categorical) return csv_escape(spec.levels.at(static_cast<std::size_t>(v)));
    return format_double(v);
}

inline std::string implicate_file_name(std::size_t m) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "implicate_%03zu.csv", m + 1);
    return buf;
}

}  // namespace detail

inline constexpr const char* kIncompleteMarker = "_INCOMPLETE";

/// Append-only writer for fused output. A marker file exists until finish().
class ImplicateWriter {
public:
    ImplicateWriter(std::string dir, ImplicateFormat format, std::vector<ColumnSpec> variables, std::size_t implicates)
        : dir_(std::move(dir)), format_(format), vars_(std::move(variables)), M_(implicates) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create output directory " + dir_ + ": " + ec.message());
        detail::write_text_file(fs::path(dir_) / kIncompleteMarker, "fusion output incomplete\n");
        std::vector<std::string> header{"id"};
        if (format_ == ImplicateFormat::long_format) header.push_back("implicate");
        for (const auto& v : vars_) header.push_back(csv_escape(v.name));
        const std::string head = join(header, ",") + "\n";
        if (format_ == ImplicateFormat::long_format) {
            files_.emplace_back(fs::path(dir_) / "implicates.csv", std::ios::binary);
        } else {
            for (std::size_t m = 0; m < M_; ++m)
                files_.emplace_back(fs::path(dir_) / detail::implicate_file_name(m), std::ios::binary);
        }
        for (auto& f : files_) {
            if (!f) throw IoError("cannot open output file in " + dir_);
            f << head;
        }
    }

    void write_chunk(const std::vector<std::string>& ids, std::size_t lo, const std::vector<Matrix>& chunk) {
        const std::size_t n = chunk.empty() ? 0 : chunk.front().rows;
        if (format_ == ImplicateFormat::long_format) {
            std::string buf;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t m = 0; m < chunk.size(); ++m) buf += line(ids[lo + r], static_cast<int>(m + 1), chunk[m], r);
            files_[0] << buf;
        } else {
            for (std::size_t m = 0; m < chunk.size(); ++m) {
                std::string buf;
                for (std::size_t r = 0; r < n; ++r) buf += line(ids[lo + r], 0, chunk[m], r);
                files_[m] << buf;
            }
        }
        rows_ += n;
        for (auto& f : files_)
            if (!f) throw IoError("write failed in " + dir_ + " (partial output left with marker)");
    }

    void finish() {
        namespace fs = std::filesystem;
        for (auto& f : files_) {
            f.flush();
            if (!f) throw IoError("write failed in " + dir_ + " (partial output left with marker)");
            f.close();
        }
        Schema schema = vars_;
        for (auto& c : schema) c.role = ColumnRole::fusion;
        std::ostringstream idx;
        idx << "format," << (format_ == ImplicateFormat::long_format ? "long" : "per_implicate") << "\n";
        idx << "implicates," << M_ << "\nrows," << rows_ << "\n";
        if (format_ == ImplicateFormat::long_format) idx << "file,implicates.csv\n";
        else
            for (std::size_t m = 0; m < M_; ++m) idx << "file," << detail::implicate_file_name(m) << "\n";
        detail::write_text_file(fs::path(dir_) / "index.csv", idx.str());
        write_fused_schema(schema);
        fs::remove(fs::path(dir_) / kIncompleteMarker);
    }

private:
    std::string line(const std::string& id, int implicate, const Matrix& m, std::size_t r) const {
        std::string s = csv_escape(id);
        if (implicate > 0) s += "," + std::to_string(implicate);
        for (std::size_t j = 0; j < vars_.size(); ++j) s += "," + detail::format_cell(vars_[j], m(r, j));
        s += '\n';
        return s;
    }

    void write_fused_schema(const Schema& schema) const {
        std::ostringstream out;
        for (const auto& c : schema) {
            out << "[" << c.name << "]\nrole = fusion\nkind = " << to_string(c.kind) << "\n";
            if (c.kind == ColumnKind::categorical) out << "levels = " << join(c.levels, ", ") << "\n";
            out << "\n";
        }
        detail::write_text_file(std::filesystem::path(dir_) / "variables.schema", out.str());
    }

    std::string dir_;
    ImplicateFormat format_;
    std::vector<ColumnSpec> vars_;
    std::size_t M_;
    std::vector<std::ofstream> files_;
    std::size_t rows_ = 0;
};

/// Reads an implicate directory written by ImplicateWriter.
inline ImplicateSet load_implicates(const std::string& dir) {
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(dir) / kIncompleteMarker))
        throw ContractError("implicate directory " + dir + " holds incomplete output");
    const fs::path index = fs::path(dir) / "index.csv";
    if (!fs::exists(index)) throw IoError("implicate index not found: " + index.string());
    std::string format;
    std::size_t M = 0;
    std::vector<std::string> files;
    {
        std::istringstream in(read_file(index.string()));
        std::string line;
        while (std::getline(in, line)) {
            const auto parts = parse_csv_line(line);
            if (parts.size() != 2) continue;
            if (parts[0] == "format") format = parts[1];
            else if (parts[0] == "implicates") M = std::stoul(parts[1]);
            else if (parts[0] == "file") files.push_back(parts[1]);
        }
    }
    ImplicateSet set;
    {
        Schema schema;
        namespace pt = boost::property_tree;
        pt::ptree tree;
        const std::string sp = (fs::path(dir) / "variables.schema").string();
        if (!fs::exists(sp)) throw IoError("implicate schema not found: " + sp);
        pt::read_ini(sp, tree);
        for (const auto& [name, sec] : tree) {
            ColumnSpec c;
            c.name = name;
            c.role = ColumnRole::fusion;
            c.kind = parse_kind(sec.get<std::string>("kind"));
            if (auto lv = sec.get_optional<std::string>("levels")) c.levels = split_list(*lv);
            set.variables.push_back(std::move(c));
        }
    }
    const std::size_t V = set.variables.size();
    auto parse_row = [&](const std::vector<std::string>& cells, std::size_t offset, double* dst, const std::string& where) {
        if (cells.size() != offset + V) throw ContractError(where + ": wrong number of cells");
        for (std::size_t j = 0; j < V; ++j) {
            const ColumnSpec& c = set.variables[j];
            if (c.kind == ColumnKind::categorical) {
                const int code = c.level_index(cells[offset + j]);
                if (code < 0) throw ContractError(where + ": undeclared level '" + cells[offset + j] + "'");
                dst[j] = code;
            } else if (!parse_double(cells[offset + j], dst[j])) {
                throw ContractError(where + ": unparsable number '" + cells[offset + j] + "'");
            }
        }
    };
    if (format == "long") {
        std::ifstream in(fs::path(dir) / files.at(0));
        if (!in) throw IoError("cannot open " + files.at(0));
        std::string line;
        std::getline(in, line);
        std::size_t ln = 1;
        std::vector<std::vector<std::vector<double>>> per(M);
        while (std::getline(in, line)) {
            ++ln;
            if (line.empty()) continue;
            const auto cells = parse_csv_line(line);
            if (cells.size() < 2) throw ContractError("implicates.csv line " + std::to_string(ln) + ": too few cells");
            const std::size_t m = std::stoul(cells[1]);
            if (m < 1 || m > M) throw ContractError("implicates.csv line " + std::to_string(ln) + ": bad implicate");
            if (m == 1) set.ids.push_back(cells[0]);
            std::vector<double> v(V);
            parse_row(cells, 2, v.data(), "implicates.csv line " + std::to_string(ln));
            per[m - 1].push_back(std::move(v));
        }
        for (std::size_t m = 0; m < M; ++m) {
            if (per[m].size() != set.ids.size()) throw ContractError("implicates.csv: ragged implicates");
            Matrix mat(set.ids.size(), V);
            for (std::size_t r = 0; r < per[m].size(); ++r) std::copy(per[m][r].begin(), per[m][r].end(), mat.row(r));
            set.implicates.push_back(std::move(mat));
        }
        return set;
    }
    for (std::size_t m = 0; m < files.size(); ++m) {
        std::ifstream in(fs::path(dir) / files[m]);
        if (!in) throw IoError("cannot open " + files[m]);
        std::string line;
        std::getline(in, line);
        std::vector<std::string> ids;
        std::vector<double> data;
        std::size_t ln = 1;
        while (std::getline(in, line)) {
            ++ln;
            if (line.empty()) continue;
            const auto cells = parse_csv_line(line);
            ids.push_back(cells.at(0));
            data.resize(data.size() + V);
            parse_row(cells, 1, data.data() + data.size() - V, files[m] + " line " + std::to_string(ln));
        }
        if (m == 0) set.ids = ids;
        else if (ids != set.ids) throw ContractError(files[m] + ": row ids differ from first implicate");
        Matrix mat(ids.size(), V);
        mat.data = std::move(data);
        set.implicates.push_back(std::move(mat));
    }
    return set;
}

}  // namespace statfuse

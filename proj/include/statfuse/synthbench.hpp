#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "statfuse/analysis.hpp"
#include "statfuse/common.hpp"
#include "statfuse/microdata.hpp"
#include "statfuse/pipeline.hpp"
#include "statfuse/validation.hpp"

// Synthetic populations with analytically known conditional moments.

namespace statfuse::synth {

/// Coefficient on a continuous predictor, or on one level indicator of a
/// categorical predictor.
struct Term {
    std::string predictor;
    std::string level;
    double coef = 0.0;
};

struct PredictorDef {
    std::string name;
    bool categorical = false;
    std::vector<std::string> levels;
    std::vector<double> probs;
    double mean = 0.0;  // continuous: mean + sum(terms) + sd * N(0,1)
    double sd = 1.0;
    std::vector<Term> terms;
};

enum class Link { linear, multiclass, zero_inflated };

struct ResponseDef {
    std::string name;
    Link link = Link::linear;
    double intercept = 0.0;
    std::vector<Term> terms;
    double noise = 1.0;
    // multiclass: first level is the reference with zero linear predictor
    std::vector<std::string> levels;
    std::vector<double> class_intercepts;
    std::vector<std::vector<Term>> class_terms;
    // zero_inflated: P(zero | X) = logistic(zero_intercept + zero_terms)
    double zero_intercept = 0.0;
    std::vector<Term> zero_terms;
};

enum class WeightScheme { uniform, gamma };

struct SynthConfig {
    std::size_t population = 0;  // 0 means donor + recipient
    std::size_t donor = 1000;
    std::size_t recipient = 1000;
    std::uint64_t seed = 1;
    WeightScheme weights = WeightScheme::uniform;
    double weight_shape = 2.0;
    int replicates = 0;
    double replicate_scale = 0.3;
    std::vector<PredictorDef> predictors;
    std::vector<ResponseDef> responses;

    std::size_t population_size() const { return population == 0 ? donor + recipient : population; }

    void validate() const {
        if (donor < 2 || recipient < 2) throw ContractError("synth: donor and recipient need at least 2 rows");
        if (donor + recipient > population_size()) throw ContractError("synth: donor + recipient exceed population");
        if (weight_shape <= 0.0) throw ContractError("synth: weight_shape must be positive");
        if (replicates < 0 || replicate_scale < 0.0 || replicate_scale >= 1.0)
            throw ContractError("synth: replicate settings out of range");
        std::set<std::string> names;
        for (const auto& p : predictors) {
            if (!names.insert(p.name).second) throw ContractError("synth: duplicate variable '" + p.name + "'");
            if (p.categorical) {
                if (p.levels.empty() || p.levels.size() != p.probs.size())
                    throw ContractError("synth: predictor '" + p.name + "' needs matching levels and probs");
                double total = 0.0;
                for (double q : p.probs) {
                    if (!(q >= 0.0)) throw ContractError("synth: negative probability in '" + p.name + "'");
                    total += q;
                }
                if (std::abs(total - 1.0) > 1e-9) throw ContractError("synth: probs of '" + p.name + "' must sum to 1");
            } else if (p.sd < 0.0) {
                throw ContractError("synth: predictor '" + p.name + "' has negative sd");
            }
        }
        for (const auto& r : responses) {
            if (!names.insert(r.name).second) throw ContractError("synth: duplicate variable '" + r.name + "'");
            if (r.noise < 0.0) throw ContractError("synth: response '" + r.name + "' has negative noise");
            if (r.link == Link::multiclass && r.levels.size() < 2)
                throw ContractError("synth: multiclass response '" + r.name + "' needs at least 2 levels");
        }
        auto check_terms = [&](const std::vector<Term>& terms, const std::string& owner) {
            for (const auto& t : terms) {
                auto it = std::find_if(predictors.begin(), predictors.end(),
                                       [&](const PredictorDef& p) { return p.name == t.predictor; });
                if (it == predictors.end())
                    throw ContractError("synth: '" + owner + "' references unknown predictor '" + t.predictor + "'");
                if (it->categorical &&
                    std::find(it->levels.begin(), it->levels.end(), t.level) == it->levels.end())
                    throw ContractError("synth: '" + owner + "' references unknown level '" + t.predictor + ":" +
                                        t.level + "'");
            }
        };
        for (std::size_t i = 0; i < predictors.size(); ++i) {
            for (const auto& t : predictors[i].terms) {
                auto it = std::find_if(predictors.begin(), predictors.begin() + static_cast<long>(i),
                                       [&](const PredictorDef& p) { return p.name == t.predictor; });
                if (it == predictors.begin() + static_cast<long>(i))
                    throw ContractError("synth: predictor '" + predictors[i].name +
                                        "' may only depend on earlier predictors");
            }
        }
        for (const auto& r : responses) {
            check_terms(r.terms, r.name);
            check_terms(r.zero_terms, r.name);
            for (const auto& ct : r.class_terms) check_terms(ct, r.name);
        }
    }
};

namespace detail {

inline Term parse_term(const std::string& key, double value) {
    Term t;
    t.coef = value;
    const auto colon = key.find(':');
    t.predictor = key.substr(0, colon);
    if (colon != std::string::npos) t.level = key.substr(colon + 1);
    return t;
}

inline double get_double(const boost::property_tree::ptree& section, const std::string& key, double fallback) {
    for (const auto& [k, v] : section)
        if (k == key) {
            double out = 0.0;
            if (!parse_double(trim(v.data()), out))
                throw ContractError("synth: '" + key + "' is not a number: " + v.data());
            return out;
        }
    return fallback;
}

inline std::string get_string(const boost::property_tree::ptree& section, const std::string& key,
                              const std::string& fallback) {
    for (const auto& [k, v] : section)
        if (k == key) return trim(v.data());
    return fallback;
}

inline bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace detail

/// Parses the INI config.
///
///     [population]
///     donor = 5000
///     recipient = 20000
///     weights = gamma
///
///     [predictor:x1]
///     kind = continuous
///     mean = 0
///     sd = 1
///
///     [response:y]
///     link = linear
///     intercept = 2
///     coef.x1 = 1.5
///     coef.region:north = 0.4
///     noise = 1
///
/// Multiclass responses use `levels` plus `class.<level>.intercept` and
/// `class.<level>.coef.<term>`; zero-inflated ones use `zero_rate` or
/// `zero.intercept` with `zero.coef.<term>`, and log-scale magnitude terms.
inline SynthConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ContractError(std::string("synth config parse error: ") + e.what());
    }
    SynthConfig cfg;
    for (const auto& [name, section] : tree) {
        using detail::get_double;
        using detail::get_string;
        using detail::starts_with;
        if (name == "population") {
            cfg.population = static_cast<std::size_t>(get_double(section, "size", 0));
            cfg.donor = static_cast<std::size_t>(get_double(section, "donor", 1000));
            cfg.recipient = static_cast<std::size_t>(get_double(section, "recipient", 1000));
            cfg.seed = static_cast<std::uint64_t>(get_double(section, "seed", 1));
            const std::string w = get_string(section, "weights", "uniform");
            if (w == "uniform") cfg.weights = WeightScheme::uniform;
            else if (w == "gamma") cfg.weights = WeightScheme::gamma;
            else throw ContractError("synth: unknown weight scheme '" + w + "'");
            cfg.weight_shape = get_double(section, "weight_shape", 2.0);
            cfg.replicates = static_cast<int>(get_double(section, "replicates", 0));
            cfg.replicate_scale = get_double(section, "replicate_scale", 0.3);
        } else if (starts_with(name, "predictor:")) {
            PredictorDef p;
            p.name = name.substr(10);
            p.categorical = get_string(section, "kind", "continuous") == "categorical";
            p.levels = split_list(get_string(section, "levels", ""));
            for (const auto& s : split_list(get_string(section, "probs", ""))) {
                double v = 0.0;
                if (!parse_double(s, v)) throw ContractError("synth: bad probability '" + s + "'");
                p.probs.push_back(v);
            }
            if (p.categorical && p.probs.empty() && !p.levels.empty())
                p.probs.assign(p.levels.size(), 1.0 / static_cast<double>(p.levels.size()));
            p.mean = get_double(section, "mean", 0.0);
            p.sd = get_double(section, "sd", 1.0);
            for (const auto& [k, v] : section)
                if (starts_with(k, "coef.")) p.terms.push_back(detail::parse_term(k.substr(5), get_double(section, k, 0)));
            cfg.predictors.push_back(std::move(p));
        } else if (starts_with(name, "response:")) {
            ResponseDef r;
            r.name = name.substr(9);
            const std::string link = get_string(section, "link", "linear");
            if (link == "linear") r.link = Link::linear;
            else if (link == "multiclass") r.link = Link::multiclass;
            else if (link == "zero_inflated") r.link = Link::zero_inflated;
            else throw ContractError("synth: unknown link '" + link + "'");
            r.intercept = get_double(section, "intercept", 0.0);
            r.noise = get_double(section, "noise", 1.0);
            r.levels = split_list(get_string(section, "levels", ""));
            r.class_intercepts.assign(r.levels.size(), 0.0);
            r.class_terms.assign(r.levels.size(), {});
            const double rate = get_double(section, "zero_rate", std::numeric_limits<double>::quiet_NaN());
            if (std::isfinite(rate)) {
                if (!(rate > 0.0 && rate < 1.0)) throw ContractError("synth: zero_rate must lie in (0,1)");
                r.zero_intercept = std::log(rate / (1.0 - rate));
            }
            r.zero_intercept = get_double(section, "zero.intercept", r.zero_intercept);
            for (const auto& [k, v] : section) {
                if (!starts_with(k, "coef.") && !starts_with(k, "zero.coef.") && !starts_with(k, "class.")) continue;
                const double value = get_double(section, k, 0.0);
                if (starts_with(k, "coef.")) {
                    r.terms.push_back(detail::parse_term(k.substr(5), value));
                } else if (starts_with(k, "zero.coef.")) {
                    r.zero_terms.push_back(detail::parse_term(k.substr(10), value));
                } else if (starts_with(k, "class.")) {
                    const std::string rest = k.substr(6);
                    const auto dot = rest.find('.');
                    if (dot == std::string::npos) throw ContractError("synth: malformed key '" + k + "'");
                    const auto it = std::find(r.levels.begin(), r.levels.end(), rest.substr(0, dot));
                    if (it == r.levels.end()) throw ContractError("synth: key '" + k + "' names an unknown level");
                    const auto li = static_cast<std::size_t>(it - r.levels.begin());
                    const std::string field = rest.substr(dot + 1);
                    if (field == "intercept") r.class_intercepts[li] = value;
                    else if (starts_with(field, "coef.")) r.class_terms[li].push_back(detail::parse_term(field.substr(5), value));
                    else throw ContractError("synth: malformed key '" + k + "'");
                }
            }
            cfg.responses.push_back(std::move(r));
        } else {
            throw ContractError("synth: unknown section [" + name + "]");
        }
    }
    cfg.validate();
    return cfg;
}

inline SynthConfig load_config(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("synth config not found: " + path);
    return parse_config(read_file(path));
}

// ============================================================================
// Truth
// ============================================================================

/// Closed-form conditional distribution of one response for each sampled row.
struct TruthVariable {
    std::string name;
    Link link = Link::linear;
    std::vector<std::string> levels;
    std::vector<double> mean;      // E[Z | X]; numeric links only
    std::vector<double> location;  // linear: mean; zero_inflated: log-scale location
    double noise = 0.0;
    std::vector<double> zero;      // P(Z = 0 | X); zero_inflated only
    Matrix probs;                  // class probabilities; multiclass only

    std::size_t rows() const { return link == Link::multiclass ? probs.rows : mean.size(); }

    /// Conditional quantile at p for a numeric response.
    double quantile(std::size_t r, double p) const {
        if (link == Link::multiclass) throw ContractError("truth: quantile of a categorical response");
        if (link == Link::linear) return noise == 0.0 ? location[r] : location[r] + noise * normal_quantile(p);
        if (p <= zero[r]) return 0.0;
        const double pp = (p - zero[r]) / (1.0 - zero[r]);
        return std::exp(location[r] + (noise == 0.0 ? 0.0 : noise * normal_quantile(pp)));
    }

    double variance(std::size_t r) const {
        if (link == Link::linear) return noise * noise;
        if (link == Link::zero_inflated) {
            const double s2 = noise * noise;
            const double m2 = std::exp(2.0 * location[r] + 2.0 * s2);
            const double second = (1.0 - zero[r]) * m2;
            return second - mean[r] * mean[r];
        }
        throw ContractError("truth: variance of a categorical response");
    }
};

struct Truth {
    std::vector<std::string> ids;
    std::vector<TruthVariable> variables;

    const TruthVariable& variable(const std::string& name) const {
        for (const auto& v : variables)
            if (v.name == name) return v;
        throw ContractError("truth has no variable '" + name + "'");
    }
};

struct SynthSample {
    Microdata donor;
    Microdata recipient;
    Truth donor_truth;
    Truth recipient_truth;
    SynthConfig config;
};

namespace detail {

inline constexpr std::uint64_t kRowStream = 0x53594E54;    // population row draws
inline constexpr std::uint64_t kSampleStream = 0x53414D50;  // sample selection

inline double standard_normal(StreamRng& rng) {
    const double u = (static_cast<double>(rng.next() >> 11) + 0.5) * 0x1.0p-53;
    return normal_quantile(u);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct RowState {
    std::vector<double> numeric;  // continuous predictor values
    std::vector<int> code;        // categorical predictor codes
};

inline double linear_term(const SynthConfig& cfg, const std::vector<Term>& terms, const RowState& row) {
    double s = 0.0;
    for (const auto& t : terms) {
        for (std::size_t j = 0; j < cfg.predictors.size(); ++j) {
            const auto& p = cfg.predictors[j];
            if (p.name != t.predictor) continue;
            if (p.categorical) {
                if (row.code[j] >= 0 && p.levels[static_cast<std::size_t>(row.code[j])] == t.level) s += t.coef;
            } else {
                s += t.coef * row.numeric[j];
            }
        }
    }
    return s;
}

/// Distinct sorted population indices via Floyd's algorithm.
inline std::vector<std::uint64_t> sample_indices(std::uint64_t population, std::size_t count, StreamRng& rng) {
    std::unordered_set<std::uint64_t> chosen;
    chosen.reserve(count * 2);
    for (std::uint64_t j = population - count; j < population; ++j) {
        const std::uint64_t t = rng.below(j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::vector<std::uint64_t> out(chosen.begin(), chosen.end());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// Draws donor and recipient as disjoint samples from the declared population.
/// Every population row is a pure function of (seed, row index).
inline SynthSample generate_population(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t P = cfg.population_size();
    StreamRng select(cfg.seed, detail::kSampleStream, 0);
    std::vector<std::uint64_t> idx = detail::sample_indices(P, cfg.donor + cfg.recipient, select);
    std::shuffle(idx.begin(), idx.end(), select);
    std::vector<std::uint64_t> donor_idx(idx.begin(), idx.begin() + static_cast<long>(cfg.donor));
    std::vector<std::uint64_t> recip_idx(idx.begin() + static_cast<long>(cfg.donor), idx.end());
    std::sort(donor_idx.begin(), donor_idx.end());
    std::sort(recip_idx.begin(), recip_idx.end());
    const double base_weight = static_cast<double>(P) / static_cast<double>(cfg.donor + cfg.recipient);
    const std::size_t width = std::to_string(P).size();

    auto build = [&](const std::vector<std::uint64_t>& rows, bool donor, Truth& truth) {
        const std::size_t n = rows.size();
        const std::size_t np = cfg.predictors.size();
        std::vector<Column> cols;
        Column id;
        id.spec = {"id", ColumnKind::categorical, ColumnRole::id, {}};
        cols.push_back(id);
        for (const auto& p : cfg.predictors) {
            Column c;
            c.spec.name = p.name;
            c.spec.kind = p.categorical ? ColumnKind::categorical : ColumnKind::continuous;
            c.spec.role = ColumnRole::predictor;
            c.spec.levels = p.categorical ? p.levels : std::vector<std::string>{};
            cols.push_back(std::move(c));
        }
        truth.variables.clear();
        for (const auto& r : cfg.responses) {
            TruthVariable tv;
            tv.name = r.name;
            tv.link = r.link;
            tv.levels = r.levels;
            tv.noise = r.noise;
            if (r.link == Link::multiclass) tv.probs = Matrix(n, r.levels.size());
            truth.variables.push_back(std::move(tv));
            if (donor) {
                Column c;
                c.spec.name = r.name;
                c.spec.role = ColumnRole::fusion;
                c.spec.kind = r.link == Link::multiclass      ? ColumnKind::categorical
                              : r.link == Link::zero_inflated ? ColumnKind::semicontinuous
                                                              : ColumnKind::continuous;
                c.spec.levels = r.link == Link::multiclass ? r.levels : std::vector<std::string>{};
                cols.push_back(std::move(c));
            }
        }
        Column weight;
        weight.spec = {"weight", ColumnKind::continuous, ColumnRole::weight, {}};
        std::vector<Column> reps;
        if (!donor)
            for (int k = 0; k < cfg.replicates; ++k) {
                Column c;
                c.spec = {"repwt" + std::to_string(k + 1), ColumnKind::continuous, ColumnRole::replicate_weight, {}};
                reps.push_back(std::move(c));
            }
        truth.ids.clear();

        detail::RowState row;
        for (std::size_t i = 0; i < n; ++i) {
            StreamRng rng(cfg.seed, detail::kRowStream, rows[i]);
            std::string rid = std::to_string(rows[i] + 1);
            rid = "P" + std::string(width - std::min(width, rid.size()), '0') + rid;
            cols[0].text.push_back(rid);
            truth.ids.push_back(rid);
            row.numeric.assign(np, 0.0);
            row.code.assign(np, -1);
            for (std::size_t j = 0; j < np; ++j) {
                const auto& p = cfg.predictors[j];
                Column& c = cols[1 + j];
                if (p.categorical) {
                    const double u = rng.uniform();
                    double acc = 0.0;
                    int code = static_cast<int>(p.levels.size()) - 1;
                    for (std::size_t l = 0; l < p.probs.size(); ++l) {
                        acc += p.probs[l];
                        if (u < acc) {
                            code = static_cast<int>(l);
                            break;
                        }
                    }
                    row.code[j] = code;
                    c.codes.push_back(code);
                } else {
                    const double v = p.mean + detail::linear_term(cfg, p.terms, row) + p.sd * detail::standard_normal(rng);
                    row.numeric[j] = v;
                    c.values.push_back(v);
                }
            }
            std::size_t out_col = 1 + np;
            for (std::size_t k = 0; k < cfg.responses.size(); ++k) {
                const auto& r = cfg.responses[k];
                TruthVariable& tv = truth.variables[k];
                double value = 0.0;
                int code = -1;
                if (r.link == Link::linear) {
                    const double mu = r.intercept + detail::linear_term(cfg, r.terms, row);
                    tv.mean.push_back(mu);
                    tv.location.push_back(mu);
                    value = mu + r.noise * detail::standard_normal(rng);
                } else if (r.link == Link::zero_inflated) {
                    const double p0 = detail::logistic(r.zero_intercept + detail::linear_term(cfg, r.zero_terms, row));
                    const double loc = r.intercept + detail::linear_term(cfg, r.terms, row);
                    tv.zero.push_back(p0);
                    tv.location.push_back(loc);
                    tv.mean.push_back((1.0 - p0) * std::exp(loc + 0.5 * r.noise * r.noise));
                    const double u = rng.uniform();
                    const double e = detail::standard_normal(rng);
                    value = u < p0 ? 0.0 : std::exp(loc + r.noise * e);
                } else {
                    std::vector<double> eta(r.levels.size());
                    for (std::size_t l = 0; l < eta.size(); ++l)
                        eta[l] = l == 0 ? 0.0 : r.class_intercepts[l] + detail::linear_term(cfg, r.class_terms[l], row);
                    const double mx = *std::max_element(eta.begin(), eta.end());
                    double total = 0.0;
                    for (double& e : eta) total += (e = std::exp(e - mx));
                    for (std::size_t l = 0; l < eta.size(); ++l) tv.probs(i, l) = eta[l] / total;
                    const double u = rng.uniform();
                    double acc = 0.0;
                    code = static_cast<int>(eta.size()) - 1;
                    for (std::size_t l = 0; l < eta.size(); ++l) {
                        acc += tv.probs(i, l);
                        if (u < acc) {
                            code = static_cast<int>(l);
                            break;
                        }
                    }
                }
                if (donor) {
                    Column& c = cols[out_col++];
                    if (r.link == Link::multiclass) c.codes.push_back(code);
                    else c.values.push_back(value);
                }
            }
            double w = base_weight;
            if (cfg.weights == WeightScheme::gamma) {
                std::gamma_distribution<double> g(cfg.weight_shape, 1.0 / cfg.weight_shape);
                w *= std::max(g(rng), 1e-3);
            }
            weight.values.push_back(w);
            for (auto& c : reps) c.values.push_back(w * (1.0 + cfg.replicate_scale * ((rng.next() & 1) ? 1.0 : -1.0)));
        }
        cols.push_back(std::move(weight));
        for (auto& c : reps) cols.push_back(std::move(c));
        return Microdata(std::move(cols));
    };

    SynthSample s;
    s.config = cfg;
    s.donor = build(donor_idx, true, s.donor_truth);
    s.recipient = build(recip_idx, false, s.recipient_truth);
    return s;
}

/// Donor rows stripped of fusion variables, as a recipient table.
inline Microdata as_recipient(const Microdata& donor) {
    return donor.without_columns(donor.names_with_role(ColumnRole::fusion));
}

// ============================================================================
// Scoring
// ============================================================================

/// Weighted mean of the truth measure over the rows of one subgroup.
struct RecoveryRow {
    std::string variable;
    std::string measure;   // mean, zero_share, level=<name>, joint=<a>|<b>
    std::string subgroup;  // empty for the full sample
    std::size_t n = 0;
    double truth = 0.0;
    double estimate = 0.0;
    double abs_error = 0.0;
    double moe = 0.0;
    bool covered = false;
    double value_added = 0.0;  // against the full-sample truth
};

struct RecoveryOptions {
    std::vector<std::string> by;                                 // categorical recipient columns
    std::vector<std::pair<std::string, std::string>> joint_pairs;  // categorical fused pairs
    std::size_t min_subgroup = 200;
    double confidence = 0.90;
};

struct RecoveryReport {
    std::vector<RecoveryRow> rows;
    double coverage = 0.0;     // over rows with n >= min_subgroup
    std::size_t covered_cells = 0;
    std::size_t coverage_cells = 0;

    const RecoveryRow& find(const std::string& variable, const std::string& measure,
                            const std::string& subgroup = "") const {
        for (const auto& r : rows)
            if (r.variable == variable && r.measure == measure && r.subgroup == subgroup) return r;
        throw ContractError("recovery report has no row " + variable + "/" + measure + "/" + subgroup);
    }
};

/// Compares pooled estimates from the implicates against analytic truth, for
/// the full sample and each level of every `by` column.
inline RecoveryReport score_recovery(const ImplicateSet& set, const Microdata& recipient, const Truth& truth,
                                     const RecoveryOptions& opt = {}) {
    if (set.rows() != recipient.rows() || truth.ids.size() != recipient.rows())
        throw ContractError("score_recovery: implicates, recipient and truth must align");
    for (std::size_t r = 0; r < set.rows(); ++r)
        if (set.ids[r] != truth.ids[r]) throw ContractError("score_recovery: row ids differ at row " + std::to_string(r));
    const std::vector<double>& w = recipient.weights();
    const std::size_t n = recipient.rows();
    const std::size_t M = set.count();

    struct Group {
        std::string label;
        std::vector<std::size_t> rows;
    };
    std::vector<Group> groups;
    {
        Group all{"", std::vector<std::size_t>(n)};
        std::iota(all.rows.begin(), all.rows.end(), 0);
        groups.push_back(std::move(all));
    }
    for (const auto& b : opt.by) {
        const Column& c = recipient.column(b);
        if (!c.spec.is_categorical()) throw ContractError("score_recovery: by-variable '" + b + "' must be categorical");
        for (std::size_t l = 0; l < c.spec.levels.size(); ++l) {
            Group g{b + "=" + c.spec.levels[l], {}};
            for (std::size_t r = 0; r < n; ++r)
                if (c.codes[r] == static_cast<int>(l)) g.rows.push_back(r);
            groups.push_back(std::move(g));
        }
    }

    struct Measure {
        std::string variable, label;
        bool proportion;
        std::function<double(std::size_t)> truth;                  // per-row truth
        std::function<double(const Matrix&, std::size_t)> value;   // per-row implicate value
    };
    std::vector<Measure> measures;
    for (const auto& tv : truth.variables) {
        const std::size_t col = set.variable_index(tv.name);
        const TruthVariable* t = &tv;
        if (tv.link == Link::multiclass) {
            for (std::size_t l = 0; l < tv.levels.size(); ++l)
                measures.push_back({tv.name, "level=" + tv.levels[l], true,
                                    [t, l](std::size_t r) { return t->probs(r, l); },
                                    [col, l](const Matrix& m, std::size_t r) {
                                        return static_cast<std::size_t>(m(r, col)) == l ? 1.0 : 0.0;
                                    }});
        } else {
            measures.push_back({tv.name, "mean", false, [t](std::size_t r) { return t->mean[r]; },
                                [col](const Matrix& m, std::size_t r) { return m(r, col); }});
            if (tv.link == Link::zero_inflated)
                measures.push_back({tv.name, "zero_share", true, [t](std::size_t r) { return t->zero[r]; },
                                    [col](const Matrix& m, std::size_t r) { return m(r, col) == 0.0 ? 1.0 : 0.0; }});
        }
    }
    for (const auto& [a, b] : opt.joint_pairs) {
        const TruthVariable* ta = &truth.variable(a);
        const TruthVariable* tb = &truth.variable(b);
        if (ta->link != Link::multiclass || tb->link != Link::multiclass)
            throw ContractError("score_recovery: joint pairs must be categorical");
        const std::size_t ca = set.variable_index(a), cb = set.variable_index(b);
        for (std::size_t la = 0; la < ta->levels.size(); ++la)
            for (std::size_t lb = 0; lb < tb->levels.size(); ++lb)
                measures.push_back({a + "|" + b, "joint=" + ta->levels[la] + "|" + tb->levels[lb], true,
                                    [ta, tb, la, lb](std::size_t r) { return ta->probs(r, la) * tb->probs(r, lb); },
                                    [ca, cb, la, lb](const Matrix& m, std::size_t r) {
                                        return static_cast<std::size_t>(m(r, ca)) == la &&
                                                       static_cast<std::size_t>(m(r, cb)) == lb
                                                   ? 1.0
                                                   : 0.0;
                                    }});
    }

    RecoveryReport report;
    std::vector<double> full_truth(measures.size());
    for (const auto& g : groups) {
        if (g.rows.size() < 2) continue;
        std::vector<double> ww(g.rows.size()), y(g.rows.size());
        double sw = 0.0;
        for (std::size_t i = 0; i < g.rows.size(); ++i) sw += (ww[i] = w[g.rows[i]]);
        for (std::size_t k = 0; k < measures.size(); ++k) {
            const Measure& me = measures[k];
            double tsum = 0.0;
            for (std::size_t i = 0; i < g.rows.size(); ++i) tsum += ww[i] * me.truth(g.rows[i]);
            const double t = tsum / sw;
            if (g.label.empty()) full_truth[k] = t;
            std::vector<analysis::Estimate> per(M);
            for (std::size_t m = 0; m < M; ++m) {
                for (std::size_t i = 0; i < g.rows.size(); ++i) y[i] = me.value(set.implicates[m], g.rows[i]);
                per[m] = me.proportion ? analysis::proportion_se(y, ww) : analysis::weighted_mean_se(y, ww);
            }
            const analysis::PooledEstimate pooled = analysis::pool_rubin(per, opt.confidence);
            RecoveryRow row;
            row.variable = me.variable;
            row.measure = me.label;
            row.subgroup = g.label;
            row.n = g.rows.size();
            row.truth = t;
            row.estimate = pooled.point;
            row.abs_error = std::abs(pooled.point - t);
            row.moe = pooled.moe;
            row.covered = row.abs_error <= pooled.moe;
            row.value_added = validation::value_added(pooled.point, t, full_truth[k]);
            if (row.n >= opt.min_subgroup) {
                ++report.coverage_cells;
                if (row.covered) ++report.covered_cells;
            }
            report.rows.push_back(std::move(row));
        }
    }
    report.coverage = report.coverage_cells == 0
                          ? std::numeric_limits<double>::quiet_NaN()
                          : static_cast<double>(report.covered_cells) / static_cast<double>(report.coverage_cells);
    return report;
}

inline void write_recovery(const std::string& path, const RecoveryReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "variable,measure,subgroup,n,truth,estimate,abs_error,moe,covered,value_added\n";
    for (const auto& r : report.rows)
        out << csv_escape(r.variable) << ',' << csv_escape(r.measure) << ',' << csv_escape(r.subgroup) << ',' << r.n
            << ',' << format_double(r.truth) << ',' << format_double(r.estimate) << ',' << format_double(r.abs_error)
            << ',' << format_double(r.moe) << ',' << (r.covered ? 1 : 0) << ',' << format_double(r.value_added)
            << '\n';
    if (!out) throw IoError("write failed: " + path);
}

/// Per-row truth table: id, then the conditional mean, zero probability or
/// class probabilities of each response.
inline void write_truth(const std::string& path, const Truth& truth) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "id";
    for (const auto& v : truth.variables) {
        if (v.link == Link::multiclass)
            for (const auto& l : v.levels) out << ',' << csv_escape(v.name + ":p_" + l);
        else out << ',' << csv_escape(v.name + ":mean");
        if (v.link == Link::zero_inflated) out << ',' << csv_escape(v.name + ":p_zero");
    }
    out << '\n';
    for (std::size_t r = 0; r < truth.ids.size(); ++r) {
        out << csv_escape(truth.ids[r]);
        for (const auto& v : truth.variables) {
            if (v.link == Link::multiclass)
                for (std::size_t l = 0; l < v.levels.size(); ++l) out << ',' << format_double(v.probs(r, l));
            else out << ',' << format_double(v.mean[r]);
            if (v.link == Link::zero_inflated) out << ',' << format_double(v.zero[r]);
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace statfuse::synth

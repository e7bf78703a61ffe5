#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "statfuse/common.hpp"
#include "statfuse/microdata.hpp"
#include "statfuse/pipeline.hpp"

// Pooled estimation over implicates with 90% margins of error.

namespace statfuse::analysis {

struct Estimate {
    double estimate = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    std::string flag;  // empty, "boundary", "bootstrap", "large_n", "undefined_se"
};

inline double weight_sum(std::span<const double> w) { return std::accumulate(w.begin(), w.end(), 0.0); }

/// Effective sample size (sum w)^2 / sum w^2.
inline double effective_n(std::span<const double> w) {
    double s = 0.0, s2 = 0.0;
    for (double x : w) {
        s += x;
        s2 += x * x;
    }
    return s2 > 0.0 ? s * s / s2 : 0.0;
}

/// Weighted mean with the ratio-estimator variance approximation; the
/// expanded form collapses to n / ((n-1) (sum w)^2) * sum w_i^2 (y_i - ybar)^2.
inline Estimate weighted_mean_se(std::span<const double> y, std::span<const double> w) {
    if (y.size() != w.size()) throw ContractError("weighted_mean_se: length mismatch");
    Estimate e;
    const std::size_t n = y.size();
    if (n == 0) {
        e.flag = "undefined_se";
        return e;
    }
    const double sw = weight_sum(w);
    double swy = 0.0;
    for (std::size_t i = 0; i < n; ++i) swy += w[i] * y[i];
    e.estimate = swy / sw;
    if (n < 2) {
        e.flag = "undefined_se";
        return e;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = w[i] * (y[i] - e.estimate);
        acc += t * t;
    }
    const double nd = static_cast<double>(n);
    e.se = std::sqrt(nd / ((nd - 1.0) * sw * sw) * acc);
    return e;
}

/// Weighted share with SE sqrt(p (1 - p) / n_eff).
inline Estimate proportion_se(std::span<const double> indicator, std::span<const double> w) {
    if (indicator.size() != w.size()) throw ContractError("proportion_se: length mismatch");
    Estimate e;
    if (indicator.empty()) {
        e.flag = "undefined_se";
        return e;
    }
    const double sw = weight_sum(w);
    double s = 0.0;
    for (std::size_t i = 0; i < indicator.size(); ++i) {
        if (indicator[i] != 0.0 && indicator[i] != 1.0) throw ContractError("proportion_se: values must be 0 or 1");
        s += w[i] * indicator[i];
    }
    e.estimate = s / sw;
    const double neff = effective_n(w);
    e.se = std::sqrt(std::max(0.0, e.estimate * (1.0 - e.estimate)) / neff);
    if (e.estimate <= 0.0 || e.estimate >= 1.0) {
        e.se = 0.0;
        e.flag = "boundary";
    }
    return e;
}

inline double weighted_median(std::span<const double> y, std::span<const double> w) {
    std::vector<std::pair<double, double>> vw;
    vw.reserve(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) vw.emplace_back(y[i], w[i]);
    return weighted_quantile(std::move(vw), 0.5);
}

inline constexpr int kBootstrapResamples = 200;

/// Weighted median. Large samples (n >= 100 with >= 20 distinct values) use
/// 1 / (2 f(m) sqrt(n_eff)) with a Gaussian-kernel density; smaller ones a
/// 200-resample bootstrap.
inline Estimate median_se(std::span<const double> y, std::span<const double> w, std::uint64_t seed = 1) {
    if (y.size() != w.size()) throw ContractError("median_se: length mismatch");
    Estimate e;
    const std::size_t n = y.size();
    if (n == 0) {
        e.flag = "undefined_se";
        return e;
    }
    e.estimate = weighted_median(y, w);
    if (n < 2) {
        e.flag = "undefined_se";
        return e;
    }
    std::vector<double> sorted(y.begin(), y.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    if (distinct == 1) {
        e.se = 0.0;
        return e;
    }
    const double neff = effective_n(w);
    if (n >= 100 && distinct >= 20) {
        e.flag = "large_n";
        const double sw = weight_sum(w);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += w[i] * y[i];
        mean /= sw;
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += w[i] * (y[i] - mean) * (y[i] - mean);
        const double sd = std::sqrt(var / sw);
        std::vector<std::pair<double, double>> vw;
        for (std::size_t i = 0; i < n; ++i) vw.emplace_back(y[i], w[i]);
        const double iqr = weighted_quantile(vw, 0.75) - weighted_quantile(vw, 0.25);
        double spread = std::min(sd, iqr / 1.34);
        if (!(spread > 0.0)) spread = sd;
        const double h = 0.9 * spread * std::pow(neff, -0.2);
        double f = 0.0;
        for (std::size_t i = 0; i < n; ++i) f += w[i] * normal_pdf((e.estimate - y[i]) / h);
        f /= sw * h;
        e.se = 1.0 / (2.0 * f * std::sqrt(neff));
        return e;
    }
    e.flag = "bootstrap";
    StreamRng rng(seed, 0xB007ULL, n);
    std::vector<double> reps;
    std::vector<double> by(n), bw(n);
    for (int b = 0; b < kBootstrapResamples; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = rng.below(n);
            by[i] = y[k];
            bw[i] = w[k];
        }
        reps.push_back(weighted_median(by, bw));
    }
    const double mean = std::accumulate(reps.begin(), reps.end(), 0.0) / static_cast<double>(reps.size());
    double ss = 0.0;
    for (double r : reps) ss += (r - mean) * (r - mean);
    e.se = std::sqrt(ss / static_cast<double>(reps.size() - 1));
    return e;
}

// ============================================================================
// Pooling
// ============================================================================

struct PooledEstimate {
    std::string subgroup;
    std::string level;  // proportion and count rows
    double point = std::numeric_limits<double>::quiet_NaN();
    double within = 0.0;         // mean within-implicate variance
    double between = 0.0;        // variance of implicate estimates
    double total = 0.0;          // within + (1 + 1/M) between + replicate_var
    double replicate_var = 0.0;
    double moe = std::numeric_limits<double>::quiet_NaN();
    double df = std::numeric_limits<double>::infinity();
    int implicates = 0;
    std::size_t min_rows = 0;    // smallest subgroup size over implicates
    bool suppressed = false;
    std::vector<std::string> flags;
};

inline constexpr double kNormalDfCutoff = 1e4;

/// Rubin's rules; the t degrees of freedom exclude the replicate term.
inline PooledEstimate pool_rubin(const std::vector<Estimate>& per_implicate, double confidence = 0.90,
                                 double replicate_var = 0.0) {
    if (per_implicate.empty()) throw ContractError("pool_rubin: no implicates");
    if (!(confidence > 0.0 && confidence < 1.0)) throw ContractError("pool_rubin: confidence must lie in (0, 1)");
    PooledEstimate p;
    const auto M = static_cast<double>(per_implicate.size());
    p.implicates = static_cast<int>(per_implicate.size());
    double sum = 0.0, wsum = 0.0;
    for (const auto& e : per_implicate) {
        sum += e.estimate;
        wsum += e.se * e.se;
    }
    p.point = sum / M;
    p.within = wsum / M;
    if (per_implicate.size() > 1) {
        double ss = 0.0;
        for (const auto& e : per_implicate) ss += (e.estimate - p.point) * (e.estimate - p.point);
        p.between = ss / (M - 1.0);
    } else {
        p.flags.push_back("single_implicate");
    }
    p.replicate_var = replicate_var;
    p.total = p.within + (1.0 + 1.0 / M) * p.between + replicate_var;
    const double upper = 1.0 - (1.0 - confidence) / 2.0;
    if (p.between > 0.0 && per_implicate.size() > 1) {
        const double r = M * p.within / ((M + 1.0) * p.between);
        p.df = (M - 1.0) * (1.0 + r) * (1.0 + r);
    }
    const double crit = (p.between > 0.0 && p.df <= kNormalDfCutoff) ? student_t_quantile(upper, p.df)
                                                                       : normal_quantile(upper);
    p.moe = crit * std::sqrt(p.total);
    return p;
}

/// c / M * sum over implicates of (replicate estimate - primary estimate)^2.
inline double replicate_weight_variance(std::span<const double> primary, std::span<const double> replicate,
                                        double factor = 4.0) {
    if (primary.size() != replicate.size() || primary.empty())
        throw ContractError("replicate_weight_variance: need one replicate estimate per implicate");
    double ss = 0.0;
    for (std::size_t m = 0; m < primary.size(); ++m) ss += (replicate[m] - primary[m]) * (replicate[m] - primary[m]);
    return factor * ss / static_cast<double>(primary.size());
}

// ============================================================================
// Subgroup estimation
// ============================================================================

enum class Statistic { mean, proportion, sum, count, median };

inline Statistic parse_statistic(const std::string& s) {
    if (s == "mean") return Statistic::mean;
    if (s == "proportion") return Statistic::proportion;
    if (s == "sum") return Statistic::sum;
    if (s == "count") return Statistic::count;
    if (s == "median") return Statistic::median;
    throw ContractError("unknown statistic '" + s + "'");
}

inline std::string to_string(Statistic s) {
    switch (s) {
        case Statistic::mean: return "mean";
        case Statistic::proportion: return "proportion";
        case Statistic::sum: return "sum";
        case Statistic::count: return "count";
        case Statistic::median: return "median";
    }
    return "?";
}

struct AnalysisRequest {
    Statistic statistic = Statistic::mean;
    std::string variable;
    std::vector<std::string> by;
    bool use_replicate_weights = false;
    double confidence = 0.90;
    double replicate_factor = 4.0;
    std::uint64_t seed = 1;  // bootstrap medians
};

namespace detail {

/// Column values for one implicate, from the fused set or the recipient.
struct VariableView {
    ColumnSpec spec;
    const Column* recipient = nullptr;
    std::size_t fused_index = 0;

    double at(const ImplicateSet& set, std::size_t m, std::size_t r) const {
        if (recipient) return recipient->spec.is_categorical() ? recipient->codes[r] : recipient->values[r];
        return set.implicates[m](r, fused_index);
    }
};

inline VariableView view_of(const ImplicateSet& set, const Microdata& recipient, const std::string& name) {
    VariableView v;
    for (std::size_t j = 0; j < set.variables.size(); ++j)
        if (set.variables[j].name == name) {
            v.spec = set.variables[j];
            v.fused_index = j;
            return v;
        }
    const Column& c = recipient.column(name);
    v.spec = c.spec;
    v.recipient = &c;
    return v;
}

inline Estimate statistic_of(Statistic stat, const std::vector<double>& y, const std::vector<double>& w,
                             std::uint64_t seed) {
    switch (stat) {
        case Statistic::mean: return weighted_mean_se(y, w);
        case Statistic::sum: {
            Estimate e = weighted_mean_se(y, w);
            const double sw = weight_sum(w);
            e.estimate *= sw;
            e.se *= sw;
            return e;
        }
        case Statistic::proportion: return proportion_se(y, w);
        case Statistic::count: {
            Estimate e = proportion_se(y, w);
            const double sw = weight_sum(w);
            e.estimate *= sw;
            e.se *= sw;
            return e;
        }
        case Statistic::median: return median_se(y, w, seed);
    }
    return {};
}

inline double point_of(Statistic stat, const std::vector<double>& y, const std::vector<double>& w) {
    const double sw = weight_sum(w);
    if (!(sw > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    if (stat == Statistic::median) return weighted_median(y, w);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return (stat == Statistic::sum || stat == Statistic::count) ? s : s / sw;
}

}  // namespace detail

/// Per-subgroup pooled estimates. Proportion and count produce one row per level.
inline std::vector<PooledEstimate> estimate(const ImplicateSet& set, const Microdata& recipient,
                                            const AnalysisRequest& req) {
    if (set.implicates.empty()) throw ContractError("estimate: no implicates");
    if (set.rows() != recipient.rows()) throw ContractError("estimate: implicates and recipient differ in rows");
    if (!(req.confidence > 0.0 && req.confidence < 1.0)) throw ContractError("estimate: confidence must lie in (0, 1)");
    {
        const auto rid = recipient.row_ids();
        if (rid != set.ids) throw ContractError("estimate: implicate row ids do not match recipient");
    }
    const detail::VariableView target = detail::view_of(set, recipient, req.variable);
    const bool per_level = req.statistic == Statistic::proportion || req.statistic == Statistic::count;
    if (per_level && target.spec.kind != ColumnKind::categorical)
        throw ContractError("estimate: " + to_string(req.statistic) + " needs a categorical variable");
    if (!per_level && target.spec.kind == ColumnKind::categorical)
        throw ContractError("estimate: " + to_string(req.statistic) + " needs a numeric variable");
    std::vector<detail::VariableView> by;
    for (const auto& b : req.by) {
        by.push_back(detail::view_of(set, recipient, b));
        if (by.back().spec.kind != ColumnKind::categorical)
            throw ContractError("estimate: subgroup variable '" + b + "' must be categorical");
    }
    const std::vector<double>& w = recipient.weights();
    const auto reps = recipient.replicate_weights();
    const bool use_reps = req.use_replicate_weights && !reps.empty();
    if (req.use_replicate_weights && reps.empty())
        log_event(LogLevel::info, "replicate_weights_missing", "variable=" + req.variable);

    const std::size_t M = set.count();
    const std::size_t n = set.rows();
    const std::size_t levels = per_level ? target.spec.levels.size() : 1;

    struct Cell {
        std::vector<std::vector<Estimate>> est;      // [level][m]
        std::vector<std::vector<double>> rep_point;  // [level][m]
        std::vector<std::vector<double>> prim_point;
        std::vector<std::size_t> rows;               // per implicate
    };
    std::map<std::vector<int>, Cell> cells;
    // Subgroup membership can differ by implicate when a subgroup variable is fused.
    for (std::size_t m = 0; m < M; ++m) {
        std::map<std::vector<int>, std::vector<std::size_t>> members;
        std::vector<int> key(by.size());
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t b = 0; b < by.size(); ++b) key[b] = static_cast<int>(by[b].at(set, m, r));
            members[key].push_back(r);
        }
        for (auto& [k, rows] : members) {
            Cell& cell = cells[k];
            if (cell.est.empty()) {
                cell.est.assign(levels, std::vector<Estimate>(M));
                cell.rep_point.assign(levels, std::vector<double>(M, 0.0));
                cell.prim_point.assign(levels, std::vector<double>(M, 0.0));
                cell.rows.assign(M, 0);
            }
            cell.rows[m] = rows.size();
            std::vector<double> wy(rows.size()), ww(rows.size()), rw;
            for (std::size_t i = 0; i < rows.size(); ++i) ww[i] = w[rows[i]];
            if (use_reps) {
                const Column* rc = reps[m % reps.size()];
                rw.resize(rows.size());
                for (std::size_t i = 0; i < rows.size(); ++i) rw[i] = rc->values[rows[i]];
            }
            for (std::size_t l = 0; l < levels; ++l) {
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    const double v = target.at(set, m, rows[i]);
                    wy[i] = per_level ? (static_cast<std::size_t>(v) == l ? 1.0 : 0.0) : v;
                }
                cell.est[l][m] = detail::statistic_of(req.statistic, wy, ww, hash_combine(req.seed, m));
                if (use_reps) {
                    cell.prim_point[l][m] = detail::point_of(req.statistic, wy, ww);
                    cell.rep_point[l][m] = detail::point_of(req.statistic, wy, rw);
                }
            }
        }
    }

    std::vector<PooledEstimate> out;
    for (const auto& [key, cell] : cells) {
        std::string label;
        for (std::size_t b = 0; b < by.size(); ++b) {
            if (b) label += ";";
            label += by[b].spec.name + "=" + by[b].spec.levels.at(static_cast<std::size_t>(key[b]));
        }
        const std::size_t min_rows = *std::min_element(cell.rows.begin(), cell.rows.end());
        for (std::size_t l = 0; l < levels; ++l) {
            PooledEstimate p;
            bool bad = min_rows == 0;
            for (const auto& e : cell.est[l])
                if (!std::isfinite(e.estimate) || !std::isfinite(e.se)) bad = true;
            if (bad) {
                p.suppressed = true;
                p.implicates = static_cast<int>(M);
                p.flags.push_back(min_rows == 0 ? "empty_subgroup" : "undefined_se");
            } else {
                double v_add = 0.0;
                if (use_reps) {
                    bool ok = true;
                    for (double r : cell.rep_point[l]) ok = ok && std::isfinite(r);
                    if (ok) v_add = replicate_weight_variance(cell.prim_point[l], cell.rep_point[l], req.replicate_factor);
                }
                p = pool_rubin(cell.est[l], req.confidence, v_add);
                for (const auto& e : cell.est[l])
                    if (!e.flag.empty() && std::find(p.flags.begin(), p.flags.end(), e.flag) == p.flags.end())
                        p.flags.push_back(e.flag);
            }
            p.subgroup = label;
            if (per_level) p.level = target.spec.levels[l];
            p.min_rows = min_rows;
            out.push_back(std::move(p));
        }
    }
    return out;
}

inline void write_estimates(const std::string& path, const AnalysisRequest& req,
                            const std::vector<PooledEstimate>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "subgroup,variable,level,statistic,point,moe,total_var,within_var,between_var,replicate_var,df,implicates,"
           "min_rows,suppressed,flags\n";
    for (const auto& r : rows) {
        out << csv_escape(r.subgroup) << ',' << csv_escape(req.variable) << ',' << csv_escape(r.level) << ','
            << to_string(req.statistic) << ',' << format_double(r.point) << ',' << format_double(r.moe) << ','
            << format_double(r.total) << ',' << format_double(r.within) << ',' << format_double(r.between) << ','
            << format_double(r.replicate_var) << ',' << format_double(r.df) << ',' << r.implicates << ','
            << r.min_rows << ',' << (r.suppressed ? 1 : 0) << ',' << csv_escape(join(r.flags, ";")) << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace statfuse::analysis

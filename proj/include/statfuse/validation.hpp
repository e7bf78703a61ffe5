#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "statfuse/analysis.hpp"
#include "statfuse/common.hpp"
#include "statfuse/microdata.hpp"
#include "statfuse/pipeline.hpp"

// Internal validation: fuse back onto the donor and compare subset estimates.

namespace statfuse::validation {

/// max(0, 1 - |y_s - y_o| / |E(y_o) - y_o|). When the naive estimate is exact,
/// V is 1 for a perfect simulation and 0 otherwise.
inline double value_added(double y_s, double y_o, double grand_mean) {
    const double denom = std::abs(grand_mean - y_o);
    const double num = std::abs(y_s - y_o);
    if (denom == 0.0) return num == 0.0 ? 1.0 : 0.0;
    return std::max(0.0, 1.0 - num / denom);
}

inline constexpr double kZeroDenominator = 1e-9;

/// |y_s - y_o| / |y_o|, or NaN when |y_o| is effectively zero.
inline double abs_pct_error(double y_s, double y_o) {
    if (std::abs(y_o) < kZeroDenominator) return std::numeric_limits<double>::quiet_NaN();
    return std::abs(y_s - y_o) / std::abs(y_o);
}

struct ValidationCell {
    std::string variable;
    std::string measure;   // "mean", "zero_share" or "level=<name>"
    std::string subset;    // empty for the full sample
    std::size_t n = 0;
    double observed = 0.0;
    double simulated = 0.0;
    double observed_moe = 0.0;
    double simulated_moe = 0.0;
    double grand = 0.0;    // full-sample observed value of the same measure
};

struct SmoothedPoint {
    double n;
    double value;
};

/// Running median over a rank window of width max(5, frac * points), evaluated
/// at each distinct n.
inline std::vector<SmoothedPoint> median_smooth(std::vector<SmoothedPoint> points, double window_frac = 0.1) {
    if (points.size() < 5) throw ContractError("median_smooth: need at least 5 points");
    std::stable_sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.n < b.n; });
    const std::size_t N = points.size();
    const std::size_t width =
        std::min(N, std::max<std::size_t>(5, static_cast<std::size_t>(std::lround(window_frac * static_cast<double>(N)))));
    std::vector<SmoothedPoint> out;
    std::size_t i = 0;
    while (i < N) {
        std::size_t j = i;
        while (j < N && points[j].n == points[i].n) ++j;
        const std::size_t center = (i + j - 1) / 2;
        std::size_t lo = center >= width / 2 ? center - width / 2 : 0;
        if (lo + width > N) lo = N - width;
        std::vector<double> window;
        for (std::size_t k = lo; k < lo + width; ++k) window.push_back(points[k].value);
        out.push_back({points[i].n, median(window)});
        i = j;
    }
    return out;
}

struct ValidationOptions {
    int implicates = 10;
    std::uint64_t seed = 1;
    int threads = 1;
    std::size_t chunk_rows = 50000;
    double confidence = 0.90;
    std::size_t max_subsets = 1000000;
    std::size_t min_subset_rows = 2;
};

struct ValidationResult {
    std::vector<ValidationCell> cells;
    std::size_t subsets = 0;
    std::size_t skipped_small = 0;
};

namespace detail {

struct SubsetVar {
    std::string name;
    std::vector<int> codes;
    std::vector<std::string> labels;
};

/// Categorical codes, or quintile bins for numeric columns.
inline SubsetVar subset_var(const Microdata& data, const std::string& name) {
    const Column& c = data.column(name);
    SubsetVar v;
    v.name = name;
    if (c.spec.is_categorical()) {
        v.codes = c.codes;
        v.labels = c.spec.levels;
        return v;
    }
    std::vector<double> cuts;
    for (int q = 1; q < 5; ++q) cuts.push_back(quantile_type7(c.values, q / 5.0));
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    v.codes.resize(c.values.size());
    for (std::size_t r = 0; r < c.values.size(); ++r)
        v.codes[r] = static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), c.values[r]) - cuts.begin());
    for (std::size_t b = 0; b <= cuts.size(); ++b) v.labels.push_back("Q" + std::to_string(b + 1));
    return v;
}

}  // namespace detail

/// Fuses M implicates onto the donor and compares observed with simulated
/// estimates for every level combination of every subset of `subset_vars`,
/// plus the full sample.
inline ValidationResult internal_validate(const FusionBundle& bundle, const Microdata& donor,
                                          const std::vector<std::string>& subset_vars, const ValidationOptions& opt) {
    const std::vector<ColumnSpec> fused_specs = bundle.fusion_specs();
    if (fused_specs.empty()) throw ContractError("internal_validate: no fusion variables");
    for (const auto& s : subset_vars)
        for (const auto& f : fused_specs)
            if (s == f.name) throw ContractError("internal_validate: subset variable '" + s + "' is a fusion variable");
    if (subset_vars.size() > 20) throw ContractError("internal_validate: too many subset variables; use fewer");
    std::vector<detail::SubsetVar> svars;
    double bound = 1.0;
    for (const auto& s : subset_vars) {
        svars.push_back(detail::subset_var(donor, s));
        bound *= static_cast<double>(svars.back().labels.size() + 1);
    }
    if (bound > static_cast<double>(opt.max_subsets))
        throw ContractError("internal_validate: subset count could exceed " + std::to_string(opt.max_subsets) +
                            "; use fewer subset variables");

    FuseOptions fo;
    fo.implicates = opt.implicates;
    fo.seed = opt.seed;
    fo.threads = opt.threads;
    fo.chunk_rows = opt.chunk_rows;
    const ImplicateSet set = fuse(bundle, donor, fo);
    const std::vector<double>& w = donor.weights();
    const std::size_t n = donor.rows();
    const std::size_t M = set.count();
    std::vector<std::size_t> set_col(fused_specs.size());
    for (std::size_t j = 0; j < fused_specs.size(); ++j) set_col[j] = set.variable_index(fused_specs[j].name);

    struct Measure {
        std::size_t var;
        std::string label;
        std::function<double(double)> f;
        bool proportion;
    };
    std::vector<Measure> measures;
    for (std::size_t j = 0; j < fused_specs.size(); ++j) {
        const ColumnSpec& s = fused_specs[j];
        if (s.kind == ColumnKind::categorical) {
            for (std::size_t l = 0; l < s.levels.size(); ++l)
                measures.push_back({j, "level=" + s.levels[l],
                                    [l](double v) { return static_cast<std::size_t>(v) == l ? 1.0 : 0.0; }, true});
        } else {
            measures.push_back({j, "mean", [](double v) { return v; }, false});
            if (s.kind == ColumnKind::semicontinuous)
                measures.push_back({j, "zero_share", [](double v) { return v == 0.0 ? 1.0 : 0.0; }, true});
        }
    }
    std::vector<std::vector<double>> observed_values(fused_specs.size());
    for (std::size_t j = 0; j < fused_specs.size(); ++j) {
        const Column& c = donor.column(fused_specs[j].name);
        for (std::size_t r = 0; r < n; ++r) observed_values[j].push_back(donor.numeric(c, r));
    }
    const double zcrit = normal_quantile(1.0 - (1.0 - opt.confidence) / 2.0);

    ValidationResult result;
    std::vector<double> grand(measures.size());
    auto evaluate = [&](const std::vector<std::size_t>& rows, const std::string& label, bool full) {
        ++result.subsets;
        if (rows.size() < opt.min_subset_rows) {
            ++result.skipped_small;
            return;
        }
        std::vector<double> ww(rows.size()), y(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) ww[i] = w[rows[i]];
        for (std::size_t k = 0; k < measures.size(); ++k) {
            const Measure& me = measures[k];
            for (std::size_t i = 0; i < rows.size(); ++i) y[i] = me.f(observed_values[me.var][rows[i]]);
            const analysis::Estimate obs = me.proportion ? analysis::proportion_se(y, ww) : analysis::weighted_mean_se(y, ww);
            std::vector<analysis::Estimate> per(M);
            for (std::size_t m = 0; m < M; ++m) {
                for (std::size_t i = 0; i < rows.size(); ++i) y[i] = me.f(set.implicates[m](rows[i], set_col[me.var]));
                per[m] = me.proportion ? analysis::proportion_se(y, ww) : analysis::weighted_mean_se(y, ww);
            }
            const analysis::PooledEstimate pooled = analysis::pool_rubin(per, opt.confidence);
            if (full) grand[k] = obs.estimate;
            ValidationCell cell;
            cell.variable = fused_specs[me.var].name;
            cell.measure = me.label;
            cell.subset = label;
            cell.n = rows.size();
            cell.observed = obs.estimate;
            cell.simulated = pooled.point;
            cell.observed_moe = zcrit * obs.se;
            cell.simulated_moe = pooled.moe;
            cell.grand = grand[k];
            result.cells.push_back(std::move(cell));
        }
    };

    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    evaluate(all, "", true);
    const std::size_t V = svars.size();
    for (std::size_t mask = 1; mask < (std::size_t{1} << V); ++mask) {
        std::map<std::vector<int>, std::vector<std::size_t>> groups;
        std::vector<int> key;
        for (std::size_t r = 0; r < n; ++r) {
            key.clear();
            for (std::size_t b = 0; b < V; ++b)
                if (mask & (std::size_t{1} << b)) key.push_back(svars[b].codes[r]);
            groups[key].push_back(r);
        }
        for (const auto& [k, rows] : groups) {
            std::string label;
            std::size_t pos = 0;
            for (std::size_t b = 0; b < V; ++b) {
                if (!(mask & (std::size_t{1} << b))) continue;
                if (!label.empty()) label += ";";
                label += svars[b].name + "=" + svars[b].labels[static_cast<std::size_t>(k[pos++])];
            }
            evaluate(rows, label, false);
        }
        if (result.subsets > opt.max_subsets)
            throw ContractError("internal_validate: more than " + std::to_string(opt.max_subsets) +
                                " subsets; use fewer subset variables");
    }
    return result;
}

// ============================================================================
// Curves and report
// ============================================================================

enum class Metric { abs_pct_error, value_added, moe_ratio };

inline std::string to_string(Metric m) {
    switch (m) {
        case Metric::abs_pct_error: return "abs_pct_error";
        case Metric::value_added: return "value_added";
        case Metric::moe_ratio: return "moe_ratio";
    }
    return "?";
}

struct CurvePoint {
    const ValidationCell* cell;
    double n;
    double value;
};

struct ValidationCurve {
    Metric metric = Metric::abs_pct_error;
    std::vector<CurvePoint> points;
    std::vector<SmoothedPoint> smoothed;
    std::size_t excluded = 0;  // cells where the metric is undefined
};

/// Metric value for a cell, NaN where undefined. The full-sample cell is kept
/// out of value-added, where the naive estimate coincides with the observation.
inline double metric_value(Metric m, const ValidationCell& c) {
    switch (m) {
        case Metric::abs_pct_error: return abs_pct_error(c.simulated, c.observed);
        case Metric::value_added:
            if (c.subset.empty()) return std::numeric_limits<double>::quiet_NaN();
            return value_added(c.simulated, c.observed, c.grand);
        case Metric::moe_ratio:
            return c.observed_moe > 0.0 ? c.simulated_moe / c.observed_moe : std::numeric_limits<double>::quiet_NaN();
    }
    return std::numeric_limits<double>::quiet_NaN();
}

inline ValidationCurve build_curve(Metric metric, const std::vector<ValidationCell>& cells, double window_frac = 0.1) {
    ValidationCurve curve;
    curve.metric = metric;
    std::vector<SmoothedPoint> pts;
    for (const auto& c : cells) {
        const double v = metric_value(metric, c);
        if (!std::isfinite(v)) {
            ++curve.excluded;
            continue;
        }
        curve.points.push_back({&c, static_cast<double>(c.n), v});
        pts.push_back({static_cast<double>(c.n), v});
    }
    if (pts.size() >= 5) curve.smoothed = median_smooth(pts, window_frac);
    return curve;
}

inline std::vector<ValidationCurve> build_curves(const std::vector<ValidationCell>& cells) {
    return {build_curve(Metric::abs_pct_error, cells), build_curve(Metric::value_added, cells),
            build_curve(Metric::moe_ratio, cells)};
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    return buf;
}

/// Scatter of cell values with the smoothed median line. The x axis is placed
/// by rank of subset size so small subsets get most of the width.
inline std::string render_svg(const ValidationCurve& curve) {
    constexpr double W = 720, H = 440, L = 70, R = 20, T = 40, B = 60;
    std::vector<double> ns;
    for (const auto& p : curve.points) ns.push_back(p.n);
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    auto xrank = [&](double n) {
        if (ns.size() <= 1) return L + (W - L - R) / 2;
        const double rank = static_cast<double>(std::lower_bound(ns.begin(), ns.end(), n) - ns.begin());
        return L + (W - L - R) * rank / static_cast<double>(ns.size() - 1);
    };
    double ymax = 0.0;
    for (const auto& p : curve.points) ymax = std::max(ymax, p.value);
    if (curve.metric == Metric::value_added) ymax = 1.0;
    if (!(ymax > 0.0)) ymax = 1.0;
    auto ypos = [&](double v) { return T + (H - T - B) * (1.0 - std::min(v, ymax) / ymax); };

    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << xml_escape(to_string(curve.metric)) << " by subset size</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = ymax * t / 4.0;
        s << "<text x=\"" << L - 6 << "\" y=\"" << fmt(ypos(v) + 4) << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
          << "font-size=\"11\">" << fmt(v, 3) << "</text>\n";
    }
    if (!ns.empty()) {
        const std::size_t ticks = std::min<std::size_t>(6, ns.size());
        for (std::size_t t = 0; t < ticks; ++t) {
            const std::size_t idx = ticks == 1 ? 0 : t * (ns.size() - 1) / (ticks - 1);
            s << "<text x=\"" << fmt(xrank(ns[idx])) << "\" y=\"" << H - B + 18
              << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(ns[idx], 6)
              << "</text>\n";
        }
    }
    s << "<text x=\"" << W / 2 << "\" y=\"" << H - 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">subset size (rank scale)</text>\n";
    s << "<g fill=\"#7a9cc6\" fill-opacity=\"0.35\">\n";
    for (const auto& p : curve.points)
        s << "<circle cx=\"" << fmt(xrank(p.n), 6) << "\" cy=\"" << fmt(ypos(p.value), 6) << "\" r=\"2\"/>\n";
    s << "</g>\n";
    if (!curve.smoothed.empty()) {
        s << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
        for (const auto& p : curve.smoothed) s << fmt(xrank(p.n), 6) << ',' << fmt(ypos(p.value), 6) << ' ';
        s << "\"/>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace detail

/// Writes cells.csv plus one table and one SVG plot per metric.
inline std::vector<std::string> emit_report(const std::vector<ValidationCell>& cells,
                                            const std::vector<ValidationCurve>& curves, const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (cells.empty()) throw ContractError("emit_report: no validation cells");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create report directory " + out_dir + ": " + ec.message());
    std::vector<std::string> written;
    auto open = [&](const std::string& name) {
        const std::string p = (fs::path(out_dir) / name).string();
        std::ofstream out(p, std::ios::binary);
        if (!out) throw IoError("cannot write " + p);
        written.push_back(p);
        return out;
    };
    {
        auto out = open("cells.csv");
        out << "variable,measure,subset,n,observed,simulated,observed_moe,simulated_moe,grand\n";
        for (const auto& c : cells)
            out << csv_escape(c.variable) << ',' << csv_escape(c.measure) << ',' << csv_escape(c.subset) << ',' << c.n
                << ',' << format_double(c.observed) << ',' << format_double(c.simulated) << ','
                << format_double(c.observed_moe) << ',' << format_double(c.simulated_moe) << ','
                << format_double(c.grand) << '\n';
        if (!out) throw IoError("write failed in " + out_dir);
    }
    for (const auto& curve : curves) {
        const std::string name = to_string(curve.metric);
        {
            auto out = open(name + ".csv");
            out << "variable,measure,subset,n,value,smoothed\n";
            std::map<double, double> smooth;
            for (const auto& sp : curve.smoothed) smooth[sp.n] = sp.value;
            for (const auto& p : curve.points) {
                const auto it = smooth.find(p.n);
                out << csv_escape(p.cell->variable) << ',' << csv_escape(p.cell->measure) << ','
                    << csv_escape(p.cell->subset) << ',' << p.cell->n << ',' << format_double(p.value) << ','
                    << (it == smooth.end() ? "NA" : format_double(it->second)) << '\n';
            }
            if (!out) throw IoError("write failed in " + out_dir);
        }
        {
            auto out = open(name + ".svg");
            out << detail::render_svg(curve);
            if (!out) throw IoError("write failed in " + out_dir);
        }
    }
    return written;
}

}  // namespace statfuse::validation

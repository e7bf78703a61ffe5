#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "statfuse/common.hpp"
#include "statfuse/microdata.hpp"

// L1-regularized path fits used to screen predictors before boosting.
// Coordinate descent over standardized columns with warm starts, glmnet style.

namespace statfuse::prescreen {

enum class Family { gaussian, binomial, multinomial };

inline std::string to_string(Family f) {
    switch (f) {
        case Family::gaussian: return "gaussian";
        case Family::binomial: return "binomial";
        case Family::multinomial: return "multinomial";
    }
    return "?";
}

/// Numeric design with categorical predictors expanded to one indicator per level.
struct Design {
    Matrix x;
    std::vector<std::string> columns;
    std::vector<std::string> parents;  // originating predictor per column
};

inline Design expand_predictors(const Microdata& data, const std::vector<std::string>& predictors,
                                const std::vector<std::size_t>& rows = {}) {
    const std::size_t n = rows.empty() ? data.rows() : rows.size();
    auto row_at = [&](std::size_t i) { return rows.empty() ? i : rows[i]; };
    Design d;
    std::vector<std::vector<double>> cols;
    for (const auto& name : predictors) {
        const Column& col = data.column(name);
        if (col.spec.is_categorical()) {
            for (std::size_t l = 0; l < col.spec.levels.size(); ++l) {
                std::vector<double> v(n);
                for (std::size_t i = 0; i < n; ++i) v[i] = col.codes[row_at(i)] == static_cast<int>(l) ? 1.0 : 0.0;
                cols.push_back(std::move(v));
                d.columns.push_back(name + "=" + col.spec.levels[l]);
                d.parents.push_back(name);
            }
        } else {
            std::vector<double> v(n);
            for (std::size_t i = 0; i < n; ++i) v[i] = col.values[row_at(i)];
            cols.push_back(std::move(v));
            d.columns.push_back(name);
            d.parents.push_back(name);
        }
    }
    d.x = Matrix(n, cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < n; ++i) d.x(i, j) = cols[j][i];
    return d;
}

struct LassoPath {
    Family family = Family::gaussian;
    int classes = 1;                            // coefficient blocks per column
    std::vector<std::string> columns;
    std::vector<std::string> parents;
    std::vector<double> lambdas;                // decreasing
    std::vector<std::vector<double>> coefficients;  // per lambda: columns x classes, standardized scale
    std::vector<double> deviance_explained;
    std::vector<double> deviance_reduction;     // null deviance minus model deviance, -2 log-lik units
    std::size_t rows = 0;

    /// Columns with any nonzero coefficient at path entry `k`.
    std::vector<std::size_t> support(std::size_t k) const {
        std::vector<std::size_t> out;
        const auto K = static_cast<std::size_t>(classes);
        for (std::size_t j = 0; j < columns.size(); ++j)
            for (std::size_t c = 0; c < K; ++c)
                if (coefficients[k][j * K + c] != 0.0) {
                    out.push_back(j);
                    break;
                }
        return out;
    }

    std::size_t nonzero(std::size_t k) const {
        return static_cast<std::size_t>(
            std::count_if(coefficients[k].begin(), coefficients[k].end(), [](double b) { return b != 0.0; }));
    }
};

namespace detail {

inline double soft_threshold(double z, double g) {
    if (z > g) return z - g;
    if (z < -g) return z + g;
    return 0.0;
}

struct Standardized {
    Matrix x;                 // column-major: x(j, i)
    std::vector<bool> usable; // false for constant columns
};

/// Weighted centering and scaling; stored transposed for contiguous column access.
inline Standardized standardize(const Matrix& x, const std::vector<double>& w) {
    Standardized s;
    s.x = Matrix(x.cols, x.rows);
    s.usable.assign(x.cols, false);
    for (std::size_t j = 0; j < x.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) mean += w[i] * x(i, j);
        double var = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) var += w[i] * (x(i, j) - mean) * (x(i, j) - mean);
        const double sd = std::sqrt(var);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) continue;
        s.usable[j] = true;
        for (std::size_t i = 0; i < x.rows; ++i) s.x(j, i) = (x(i, j) - mean) / sd;
    }
    return s;
}

inline std::vector<double> lambda_sequence(double lambda_max, std::size_t count = 100, double ratio = 1e-3) {
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k)
        out[k] = lambda_max * std::pow(ratio, static_cast<double>(k) / static_cast<double>(count - 1));
    return out;
}

inline constexpr double kTol = 1e-7;
inline constexpr int kMaxPasses = 1000;

/// Weighted penalized least squares by cyclic coordinate descent with an
/// active-set inner loop. `r` is the current residual (z - eta) and is kept in sync.
inline void wls_descent(const Standardized& s, const std::vector<double>& ww, std::vector<double>& r,
                        std::vector<double>& beta, double& intercept, double lambda, double scale = 1.0) {
    const double tol = kTol * (scale > 0 ? scale : 1.0);
    const std::size_t p = s.x.rows;
    const std::size_t n = s.x.cols;
    std::vector<double> xv(p, 0.0);
    double wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) wsum += ww[i];
    for (std::size_t j = 0; j < p; ++j) {
        if (!s.usable[j]) continue;
        const double* xj = s.x.row(j);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += ww[i] * xj[i] * xj[i];
        xv[j] = acc;
    }
    auto pass = [&](bool active_only) {
        double max_change = 0.0;
        // unpenalized intercept
        double rs = 0.0;
        for (std::size_t i = 0; i < n; ++i) rs += ww[i] * r[i];
        const double d0 = rs / wsum;
        if (d0 != 0.0) {
            intercept += d0;
            for (std::size_t i = 0; i < n; ++i) r[i] -= d0;
            max_change = std::max(max_change, wsum * d0 * d0);
        }
        for (std::size_t j = 0; j < p; ++j) {
            if (!s.usable[j] || xv[j] <= 0.0) continue;
            if (active_only && beta[j] == 0.0) continue;
            const double* xj = s.x.row(j);
            double grad = 0.0;
            for (std::size_t i = 0; i < n; ++i) grad += ww[i] * xj[i] * r[i];
            const double old = beta[j];
            const double next = soft_threshold(grad + xv[j] * old, lambda) / xv[j];
            if (next == old) continue;
            const double delta = next - old;
            beta[j] = next;
            for (std::size_t i = 0; i < n; ++i) r[i] -= delta * xj[i];
            max_change = std::max(max_change, xv[j] * delta * delta);
        }
        return max_change;
    };
    for (int outer = 0; outer < kMaxPasses; ++outer) {
        if (pass(false) < tol) return;
        for (int inner = 0; inner < kMaxPasses; ++inner)
            if (pass(true) < tol) break;
    }
}

/// Path stops early once the fit saturates or stops improving.
inline bool path_saturated(const std::vector<double>& dev) {
    const std::size_t k = dev.size();
    if (k == 0) return false;
    if (dev.back() >= 0.999) return true;
    if (k < 6) return false;
    return dev.back() > 0.0 && dev.back() - dev[k - 2] < 1e-5 * dev.back();
}

}  // namespace detail

/// Fits the lasso path. For multinomial, `y` holds class codes 0..classes-1.
/// Weights default to uniform and are normalized internally.
inline LassoPath lasso_path(const Design& design, std::span<const double> y, Family family,
                            std::span<const double> weights = {}, int classes = 0,
                            std::vector<double> lambdas = {}) {
    const std::size_t n = design.x.rows;
    const std::size_t p = design.x.cols;
    if (y.size() != n) throw ContractError("lasso_path: response length differs from design");
    if (n < 10) throw ContractError("lasso_path: need at least 10 rows");
    for (double v : design.x.data)
        if (!std::isfinite(v)) throw ContractError("lasso_path: non-finite feature value");
    for (double v : y)
        if (!std::isfinite(v)) throw ContractError("lasso_path: non-finite response");
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    if (!weights.empty()) {
        if (weights.size() != n) throw ContractError("lasso_path: weight length differs from design");
        const double ws = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) w[i] = weights[i] / ws;
    }
    const detail::Standardized s = detail::standardize(design.x, w);

    LassoPath path;
    path.family = family;
    path.columns = design.columns;
    path.parents = design.parents;
    path.rows = n;
    const double n_d = static_cast<double>(n);

    if (family == Family::gaussian) {
        double ybar = 0.0;
        for (std::size_t i = 0; i < n; ++i) ybar += w[i] * y[i];
        std::vector<double> r(n);
        double tss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = y[i] - ybar;
            tss += w[i] * r[i] * r[i];
        }
        double lmax = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (!s.usable[j]) continue;
            double g = 0.0;
            for (std::size_t i = 0; i < n; ++i) g += w[i] * s.x(j, i) * r[i];
            lmax = std::max(lmax, std::abs(g));
        }
        if (lambdas.empty()) lambdas = detail::lambda_sequence(lmax > 0 ? lmax : 1.0);
        std::vector<double> beta(p, 0.0);
        double intercept = ybar;
        for (double lambda : lambdas) {
            detail::wls_descent(s, w, r, beta, intercept, lambda, tss);
            double rss = 0.0;
            for (std::size_t i = 0; i < n; ++i) rss += w[i] * r[i] * r[i];
            const double dev = tss > 0 ? 1.0 - rss / tss : 0.0;
            path.lambdas.push_back(lambda);
            path.coefficients.push_back(beta);
            path.deviance_explained.push_back(dev);
            path.deviance_reduction.push_back(tss > 0 && rss > 0 ? n_d * std::log(tss / rss)
                                                                  : (dev > 0 ? std::numeric_limits<double>::infinity() : 0.0));
            if (detail::path_saturated(path.deviance_explained)) break;
        }
        path.classes = 1;
        return path;
    }

    if (family == Family::binomial) {
        double ybar = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (y[i] != 0.0 && y[i] != 1.0) throw ContractError("lasso_path: binomial response must be 0/1");
            ybar += w[i] * y[i];
        }
        const double pbar = std::clamp(ybar, 1e-10, 1.0 - 1e-10);
        auto deviance = [&](const std::vector<double>& eta) {
            double d = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double pr = std::clamp(1.0 / (1.0 + std::exp(-eta[i])), 1e-15, 1.0 - 1e-15);
                d -= 2.0 * w[i] * (y[i] > 0.5 ? std::log(pr) : std::log(1.0 - pr));
            }
            return d;
        };
        std::vector<double> eta(n, std::log(pbar / (1.0 - pbar)));
        const double null_dev = deviance(eta);
        double lmax = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (!s.usable[j]) continue;
            double g = 0.0;
            for (std::size_t i = 0; i < n; ++i) g += w[i] * s.x(j, i) * (y[i] - ybar);
            lmax = std::max(lmax, std::abs(g));
        }
        if (lambdas.empty()) lambdas = detail::lambda_sequence(lmax > 0 ? lmax : 1.0);
        std::vector<double> beta(p, 0.0);
        double intercept = eta[0];
        std::vector<double> ww(n), r(n);
        for (double lambda : lambdas) {
            double prev_dev = deviance(eta);
            for (int irls = 0; irls < 50; ++irls) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double pr = 1.0 / (1.0 + std::exp(-eta[i]));
                    const double v = std::max(pr * (1.0 - pr), 1e-5);
                    ww[i] = w[i] * v;
                    r[i] = (y[i] - pr) / v;  // working residual z - eta
                }
                detail::wls_descent(s, ww, r, beta, intercept, lambda);
                for (std::size_t i = 0; i < n; ++i) {
                    double e = intercept;
                    for (std::size_t j = 0; j < p; ++j)
                        if (beta[j] != 0.0) e += beta[j] * s.x(j, i);
                    eta[i] = e;
                }
                const double dev = deviance(eta);
                if (std::abs(dev - prev_dev) < 1e-9 * (std::abs(dev) + 1e-3)) break;
                prev_dev = dev;
            }
            const double dev = deviance(eta);
            path.lambdas.push_back(lambda);
            path.coefficients.push_back(beta);
            path.deviance_explained.push_back(null_dev > 0 ? 1.0 - dev / null_dev : 0.0);
            path.deviance_reduction.push_back(n_d * (null_dev - dev));
            if (detail::path_saturated(path.deviance_explained)) break;
        }
        path.classes = 1;
        return path;
    }

    // Multinomial with a grouped penalty over each column's class coefficients.
    // Majorization-minimization: the softmax hessian is bounded by 1/2 I.
    if (classes < 2) throw ContractError("lasso_path: multinomial needs at least 2 classes");
    const auto K = static_cast<std::size_t>(classes);
    std::vector<double> ybar(K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = y[i];
        if (c < 0 || c >= classes || c != std::floor(c)) throw ContractError("lasso_path: bad class code");
        ybar[static_cast<std::size_t>(c)] += w[i];
    }
    Matrix eta(n, K);
    std::vector<double> b0(K);
    for (std::size_t k = 0; k < K; ++k) b0[k] = std::log(std::clamp(ybar[k], 1e-10, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < K; ++k) eta(i, k) = b0[k];
    Matrix prob(n, K);
    auto refresh = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            double mx = eta(i, 0);
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, eta(i, k));
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += (prob(i, k) = std::exp(eta(i, k) - mx));
            for (std::size_t k = 0; k < K; ++k) prob(i, k) /= sum;
        }
    };
    auto deviance = [&] {
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            d -= 2.0 * w[i] * std::log(std::clamp(prob(i, static_cast<std::size_t>(y[i])), 1e-15, 1.0));
        return d;
    };
    refresh();
    const double null_dev = deviance();
    double lmax = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        if (!s.usable[j]) continue;
        double norm2 = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double g = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                g += w[i] * s.x(j, i) * ((static_cast<std::size_t>(y[i]) == k ? 1.0 : 0.0) - ybar[k]);
            norm2 += g * g;
        }
        lmax = std::max(lmax, std::sqrt(norm2));
    }
    if (lambdas.empty()) lambdas = detail::lambda_sequence(lmax > 0 ? lmax : 1.0);
    std::vector<double> beta(p * K, 0.0);
    // Each outer step minimizes the quadratic upper bound at the current fit
    // plus the group penalty, using residual updates; softmax is refreshed once per step.
    constexpr double L = 0.5;
    constexpr int kMaxMmSteps = 200;
    Matrix e(n, K);  // working residual minus the step taken so far
    std::vector<double> z(K);
    auto group_step = [&](std::size_t j, double lambda) {
        const double* xj = s.x.row(j);
        double norm = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += w[i] * xj[i] * e(i, k);
            z[k] = L * (acc + beta[j * K + k]);
            norm += z[k] * z[k];
        }
        norm = std::sqrt(norm);
        const double shrink = norm > lambda ? (1.0 - lambda / norm) / L : 0.0;
        double change = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double delta = shrink * z[k] - beta[j * K + k];
            if (delta == 0.0) continue;
            beta[j * K + k] += delta;
            change = std::max(change, L * delta * delta);
            for (std::size_t i = 0; i < n; ++i) e(i, k) -= delta * xj[i];
        }
        return change;
    };
    auto intercept_step = [&] {
        double change = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double delta = 0.0;
            for (std::size_t i = 0; i < n; ++i) delta += w[i] * e(i, k);
            for (std::size_t i = 0; i < n; ++i) e(i, k) -= delta;
            change = std::max(change, L * delta * delta);
        }
        return change;
    };
    auto group_active = [&](std::size_t j) {
        for (std::size_t k = 0; k < K; ++k)
            if (beta[j * K + k] != 0.0) return true;
        return false;
    };
    for (double lambda : lambdas) {
        double prev_dev = deviance();
        for (int step = 0; step < kMaxMmSteps; ++step) {
            Matrix r(n, K);
            for (std::size_t i = 0; i < n; ++i) {
                const auto yi = static_cast<std::size_t>(y[i]);
                for (std::size_t k = 0; k < K; ++k) r(i, k) = ((yi == k ? 1.0 : 0.0) - prob(i, k)) / L;
            }
            e = r;
            for (int outer = 0; outer < detail::kMaxPasses; ++outer) {
                double change = intercept_step();
                for (std::size_t j = 0; j < p; ++j)
                    if (s.usable[j]) change = std::max(change, group_step(j, lambda));
                if (change < detail::kTol) break;
                for (int inner = 0; inner < detail::kMaxPasses; ++inner) {
                    double c = intercept_step();
                    for (std::size_t j = 0; j < p; ++j)
                        if (s.usable[j] && group_active(j)) c = std::max(c, group_step(j, lambda));
                    if (c < detail::kTol) break;
                }
            }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < K; ++k) eta(i, k) += r(i, k) - e(i, k);
            refresh();
            const double dev = deviance();
            if (std::abs(prev_dev - dev) < 1e-9 * (std::abs(dev) + 1e-3)) break;
            prev_dev = dev;
        }
        const double dev = deviance();
        path.lambdas.push_back(lambda);
        path.coefficients.push_back(beta);
        path.deviance_explained.push_back(null_dev > 0 ? 1.0 - dev / null_dev : 0.0);
        path.deviance_reduction.push_back(n_d * (null_dev - dev));
        if (detail::path_saturated(path.deviance_explained)) break;
    }
    path.classes = classes;
    return path;
}

struct ScreenResult {
    std::vector<std::string> selected;  // parent predictor names, in design order
    std::size_t path_index = 0;
    double deviance_at_selection = 0.0;
    double full_deviance = 0.0;
    bool flagged = false;  // no usable signal: empty selection
};

/// Smallest-support path entry reaching `threshold` of the deviance explained
/// at the end of the path. An entry whose deviance reduction does not exceed
/// twice its nonzero coefficient count is treated as noise and flagged.
inline ScreenResult screen_predictors(const LassoPath& path, double threshold = 0.95) {
    ScreenResult res;
    if (path.deviance_explained.empty()) {
        res.flagged = true;
        return res;
    }
    const double d_star = path.deviance_explained.back();
    res.full_deviance = d_star;
    if (!(d_star > 0.0)) {
        res.flagged = true;
        return res;
    }
    std::size_t k = 0;
    while (k + 1 < path.deviance_explained.size() && path.deviance_explained[k] < threshold * d_star) ++k;
    res.path_index = k;
    res.deviance_at_selection = path.deviance_explained[k];
    const double df = static_cast<double>(path.nonzero(k));
    if (df > 0 && !(path.deviance_reduction[k] > 2.0 * df)) {
        res.flagged = true;
        return res;
    }
    for (std::size_t j : path.support(k)) {
        const std::string& parent = path.parents[j];
        if (std::find(res.selected.begin(), res.selected.end(), parent) == res.selected.end())
            res.selected.push_back(parent);
    }
    return res;
}

}  // namespace statfuse::prescreen

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "statfuse/common.hpp"

// Gradient-boosted decision trees with leaf-wise growth over histogram bins.
// One framework serves class probabilities (log-loss), conditional means
// (squared error) and conditional quantiles (pinball loss).

namespace statfuse::gbdt {

enum class ObjectiveKind { multiclass_logloss, binary_logloss, squared_error, pinball };

struct Objective {
    ObjectiveKind kind = ObjectiveKind::squared_error;
    int num_class = 1;         // multiclass only
    double percentile = 0.5;   // pinball only

    static Objective multiclass(int classes) { return {ObjectiveKind::multiclass_logloss, classes, 0.5}; }
    static Objective binary() { return {ObjectiveKind::binary_logloss, 2, 0.5}; }
    static Objective squared_error() { return {ObjectiveKind::squared_error, 1, 0.5}; }
    static Objective pinball(double p) { return {ObjectiveKind::pinball, 1, p}; }

    /// Number of raw scores (and output columns) per row.
    int outputs() const { return kind == ObjectiveKind::multiclass_logloss ? num_class : 1; }

    void validate() const {
        if (kind == ObjectiveKind::multiclass_logloss && num_class < 2)
            throw ContractError("multiclass objective needs at least 2 classes");
        if (kind == ObjectiveKind::pinball && !(percentile > 0.0 && percentile < 1.0))
            throw ContractError("pinball percentile must lie strictly inside (0, 1)");
    }

    std::string name() const {
        switch (kind) {
            case ObjectiveKind::multiclass_logloss: return "multiclass";
            case ObjectiveKind::binary_logloss: return "binary";
            case ObjectiveKind::squared_error: return "squared_error";
            case ObjectiveKind::pinball: return "pinball";
        }
        return "?";
    }

    bool operator==(const Objective&) const = default;
};

struct TrainParams {
    std::vector<int> leaf_grid{16, 32, 64};
    double feature_subsample = 0.8;
    double min_node_frac = 0.001;
    int min_node_floor = 20;
    int folds = 5;
    int max_iterations = 500;
    double learning_rate = 0.1;
    std::uint64_t seed = 1;
    /// Stop a CV run once the mean out-of-fold loss has not improved for this
    /// many iterations; 0 tracks the full max_iterations curve.
    int early_stopping_rounds = 20;
    int max_bins = 255;
    double min_sum_hessian = 1e-3;
    double lambda_l2 = 0.0;
    double cat_smooth = 10.0;
    int threads = 1;

    void validate() const {
        if (leaf_grid.empty()) throw ContractError("leaf_grid must not be empty");
        for (int l : leaf_grid)
            if (l < 2) throw ContractError("leaf counts must be at least 2");
        if (!(feature_subsample > 0.0 && feature_subsample <= 1.0))
            throw ContractError("feature_subsample must lie in (0, 1]");
        if (folds < 2) throw ContractError("folds must be at least 2");
        if (max_iterations < 0) throw ContractError("max_iterations must be non-negative");
        if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be positive");
        if (max_bins < 2 || max_bins > 65535) throw ContractError("max_bins out of range");
    }

    /// Minimum rows per node for a training set of n rows.
    int min_node_rows(std::size_t n) const {
        return std::max(min_node_floor, static_cast<int>(std::ceil(min_node_frac * static_cast<double>(n))));
    }
};

// ============================================================================
// Feature frames
// ============================================================================

/// Categorical values are level codes stored as doubles; any code outside
/// [0, levels) is an unseen level.
struct FeatureColumn {
    std::string name;
    bool categorical = false;
    std::vector<std::string> levels;
    std::vector<double> values;
};

struct FeatureFrame {
    std::vector<FeatureColumn> columns;

    std::size_t rows() const { return columns.empty() ? 0 : columns.front().values.size(); }

    const FeatureColumn* find(const std::string& name) const {
        for (const auto& c : columns)
            if (c.name == name) return &c;
        return nullptr;
    }
};

struct FeatureInfo {
    std::string name;
    bool categorical = false;
    std::vector<std::string> levels;
    bool operator==(const FeatureInfo&) const = default;
};

// ============================================================================
// Trees and ensembles
// ============================================================================

struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;               // continuous: left when x <= threshold
    std::vector<std::int8_t> category_route;  // per level: 0 left, 1 right, -1 not seen in training
    bool default_left = true;             // route for unseen levels
    int left = -1;
    int right = -1;
    double value = 0.0;

    bool is_leaf() const { return feature < 0; }
    bool operator==(const Node&) const = default;
};

struct Tree {
    std::vector<Node> nodes;

    /// `x` holds one value per ensemble feature, categorical values as codes.
    double predict(const double* x) const {
        int id = 0;
        while (true) {
            const Node& n = nodes[id];
            if (n.is_leaf()) return n.value;
            const double v = x[n.feature];
            bool left;
            if (n.category_route.empty()) {
                left = v <= n.threshold;
            } else {
                const auto code = static_cast<long>(v);
                const std::int8_t route = (code >= 0 && code < static_cast<long>(n.category_route.size()))
                                              ? n.category_route[code]
                                              : std::int8_t{-1};
                left = route < 0 ? n.default_left : route == 0;
            }
            id = left ? n.left : n.right;
        }
    }

    int leaves() const {
        return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.is_leaf(); }));
    }

    bool operator==(const Tree&) const = default;
};

struct TreeEnsemble {
    Objective objective;
    std::vector<FeatureInfo> features;
    std::vector<double> base_score;  // one raw score per output
    std::vector<Tree> trees;         // iteration-major, class-minor
    int n_iterations = 0;
    int num_leaves = 0;              // CV-selected leaf budget
    bool degenerate = false;         // constant target: base score only
    double cv_loss = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> cv_curve;    // mean out-of-fold loss per iteration (not serialized)

    std::vector<std::string> feature_names() const {
        std::vector<std::string> out;
        for (const auto& f : features) out.push_back(f.name);
        return out;
    }
};

// ============================================================================
// Losses and derivatives
// ============================================================================

inline constexpr double kProbEps = 1e-15;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline void softmax(std::span<const double> raw, std::span<double> out) {
    const double mx = *std::max_element(raw.begin(), raw.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < raw.size(); ++k) {
        out[k] = std::exp(raw[k] - mx);
        sum += out[k];
    }
    for (std::size_t k = 0; k < raw.size(); ++k) out[k] /= sum;
}

/// Per-row loss in raw-score space. `y` is the class code for log-losses.
inline double point_loss(const Objective& obj, std::span<const double> raw, double y) {
    switch (obj.kind) {
        case ObjectiveKind::squared_error: return (y - raw[0]) * (y - raw[0]);
        case ObjectiveKind::pinball: {
            const double r = y - raw[0];
            return std::max(obj.percentile * r, (obj.percentile - 1.0) * r);
        }
        case ObjectiveKind::binary_logloss: {
            // log(1 + e^{-s}) for y = 1, log(1 + e^{s}) for y = 0, computed stably
            const double s = y > 0.5 ? raw[0] : -raw[0];
            return s > 0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s));
        }
        case ObjectiveKind::multiclass_logloss: {
            const double mx = *std::max_element(raw.begin(), raw.end());
            double sum = 0.0;
            for (double r : raw) sum += std::exp(r - mx);
            return mx + std::log(sum) - raw[static_cast<std::size_t>(y)];
        }
    }
    return 0.0;
}

/// Gradient and diagonal hessian of point_loss with respect to the raw scores.
inline void point_gradient(const Objective& obj, std::span<const double> raw, double y, std::span<double> grad,
                           std::span<double> hess) {
    switch (obj.kind) {
        case ObjectiveKind::squared_error:
            grad[0] = 2.0 * (raw[0] - y);
            hess[0] = 2.0;
            return;
        case ObjectiveKind::pinball:
            grad[0] = raw[0] - y >= 0.0 ? 1.0 - obj.percentile : -obj.percentile;
            hess[0] = 0.0;
            return;
        case ObjectiveKind::binary_logloss: {
            const double p = sigmoid(raw[0]);
            grad[0] = p - (y > 0.5 ? 1.0 : 0.0);
            hess[0] = p * (1.0 - p);
            return;
        }
        case ObjectiveKind::multiclass_logloss: {
            std::vector<double> p(raw.size());
            softmax(raw, p);
            for (std::size_t k = 0; k < raw.size(); ++k) {
                grad[k] = p[k] - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0);
                hess[k] = p[k] * (1.0 - p[k]);
            }
            return;
        }
    }
}

/// Converts raw scores to outputs: probabilities for log-losses, values otherwise.
inline void transform_raw(const Objective& obj, std::span<const double> raw, std::span<double> out) {
    switch (obj.kind) {
        case ObjectiveKind::multiclass_logloss: softmax(raw, out); return;
        case ObjectiveKind::binary_logloss: out[0] = sigmoid(raw[0]); return;
        default: out[0] = raw[0]; return;
    }
}

/// Weighted mean loss of output-space predictions. Log-loss probabilities are
/// clamped to [1e-15, 1 - 1e-15] before the log.
inline double loss_eval(const Objective& obj, const Matrix& predictions, std::span<const double> actual,
                        std::span<const double> weights) {
    if (predictions.rows != actual.size() || actual.size() != weights.size())
        throw ContractError("loss_eval: shape mismatch");
    if (predictions.cols != static_cast<std::size_t>(obj.outputs()))
        throw ContractError("loss_eval: prediction width does not match objective");
    double total = 0.0;
    double wsum = 0.0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        const double y = actual[i];
        double loss = 0.0;
        switch (obj.kind) {
            case ObjectiveKind::squared_error: loss = (y - predictions(i, 0)) * (y - predictions(i, 0)); break;
            case ObjectiveKind::pinball: {
                const double r = y - predictions(i, 0);
                loss = std::max(obj.percentile * r, (obj.percentile - 1.0) * r);
                break;
            }
            case ObjectiveKind::binary_logloss: {
                const double p = clamp_prob(predictions(i, 0));
                loss = y > 0.5 ? -std::log(p) : -std::log(1.0 - p);
                break;
            }
            case ObjectiveKind::multiclass_logloss:
                loss = -std::log(clamp_prob(predictions(i, static_cast<std::size_t>(y))));
                break;
        }
        total += weights[i] * loss;
        wsum += weights[i];
    }
    return total / wsum;
}

// ============================================================================
// Training internals
// ============================================================================

namespace detail {

struct BinnedFeature {
    bool categorical = false;
    int n_bins = 0;
    std::vector<double> upper_bounds;  // continuous: bin b holds x <= upper_bounds[b]
    std::vector<std::uint16_t> bins;
};

inline BinnedFeature bin_feature(const FeatureColumn& col, int max_bins) {
    BinnedFeature bf;
    const std::size_t n = col.values.size();
    bf.bins.resize(n);
    if (col.categorical) {
        bf.categorical = true;
        bf.n_bins = static_cast<int>(col.levels.size());
        if (bf.n_bins > 65535) throw ContractError("too many levels in feature '" + col.name + "'");
        for (std::size_t i = 0; i < n; ++i) {
            const double v = col.values[i];
            if (!(v >= 0 && v < bf.n_bins)) throw ContractError("feature '" + col.name + "': invalid level code");
            bf.bins[i] = static_cast<std::uint16_t>(v);
        }
        return bf;
    }
    std::vector<double> sorted = col.values;
    for (double v : sorted)
        if (!std::isfinite(v)) throw ContractError("feature '" + col.name + "': non-finite value");
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> distinct;
    std::vector<std::size_t> counts;
    for (double v : sorted) {
        if (distinct.empty() || v != distinct.back()) {
            distinct.push_back(v);
            counts.push_back(1);
        } else {
            ++counts.back();
        }
    }
    auto boundary = [](double a, double b) {
        double mid = a + (b - a) / 2.0;
        return mid >= b ? a : mid;
    };
    if (static_cast<int>(distinct.size()) <= max_bins) {
        for (std::size_t i = 0; i + 1 < distinct.size(); ++i)
            bf.upper_bounds.push_back(boundary(distinct[i], distinct[i + 1]));
    } else {
        // Equal-frequency cuts over the sorted sample, snapped to distinct values.
        const double per_bin = static_cast<double>(n) / max_bins;
        double next_cut = per_bin;
        std::size_t cum = 0;
        for (std::size_t i = 0; i + 1 < distinct.size(); ++i) {
            cum += counts[i];
            if (static_cast<double>(cum) >= next_cut) {
                bf.upper_bounds.push_back(boundary(distinct[i], distinct[i + 1]));
                while (next_cut <= static_cast<double>(cum)) next_cut += per_bin;
                if (static_cast<int>(bf.upper_bounds.size()) == max_bins - 1) break;
            }
        }
    }
    bf.upper_bounds.push_back(std::numeric_limits<double>::infinity());
    bf.n_bins = static_cast<int>(bf.upper_bounds.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto it = std::lower_bound(bf.upper_bounds.begin(), bf.upper_bounds.end(), col.values[i]);
        bf.bins[i] = static_cast<std::uint16_t>(it - bf.upper_bounds.begin());
    }
    return bf;
}

struct HistBin {
    double g = 0.0;
    double h = 0.0;
    double w = 0.0;
    std::uint32_t n = 0;
};

struct SplitCandidate {
    double gain = -std::numeric_limits<double>::infinity();
    int feature = -1;
    int threshold_bin = -1;
    std::vector<std::int8_t> route;  // categorical only
    bool default_left = true;
};

struct GrowConfig {
    int num_leaves = 31;
    int min_rows = 20;
    double min_hessian = 1e-3;
    double lambda = 0.0;
    double cat_smooth = 10.0;
};

struct GrownTree {
    Tree tree;
    std::vector<std::vector<int>> leaf_rows;  // indexed by node id, non-empty for leaves only
};

class TreeGrower {
public:
    TreeGrower(const std::vector<BinnedFeature>& features, std::vector<int> offsets, int total_bins)
        : features_(features), offsets_(std::move(offsets)), total_bins_(total_bins) {}

    /// Grows one tree on `rows` with per-row gradient g, hessian h and weight w
    /// (indexed by global row id). Leaf values are the unscaled Newton steps.
    GrownTree grow(const std::vector<int>& rows, const std::vector<double>& g, const std::vector<double>& h,
                   const std::vector<double>& w, const std::vector<int>& feature_mask, const GrowConfig& cfg) const {
        struct Leaf {
            int node;
            std::vector<int> rows;
            std::vector<HistBin> hist;
            double G, H, W;
            SplitCandidate best;
        };
        GrownTree out;
        out.tree.nodes.emplace_back();
        std::vector<Leaf> leaves;
        {
            Leaf root{0, rows, build_hist(rows, g, h, w, feature_mask), 0, 0, 0, {}};
            totals(rows, g, h, w, root.G, root.H, root.W);
            root.best = best_split(root.hist, root.G, root.H, root.W, feature_mask, cfg);
            leaves.push_back(std::move(root));
        }
        while (static_cast<int>(leaves.size()) < cfg.num_leaves) {
            std::size_t pick = leaves.size();
            double best_gain = 1e-12;
            for (std::size_t i = 0; i < leaves.size(); ++i) {
                if (leaves[i].best.gain > best_gain) {
                    best_gain = leaves[i].best.gain;
                    pick = i;
                }
            }
            if (pick == leaves.size()) break;
            Leaf parent = std::move(leaves[pick]);
            leaves.erase(leaves.begin() + static_cast<long>(pick));

            const SplitCandidate& s = parent.best;
            const BinnedFeature& bf = features_[s.feature];
            std::vector<int> left_rows, right_rows;
            left_rows.reserve(parent.rows.size());
            right_rows.reserve(parent.rows.size());
            for (int r : parent.rows) {
                const int b = bf.bins[r];
                const bool left = bf.categorical ? s.route[b] == 0 : b <= s.threshold_bin;
                (left ? left_rows : right_rows).push_back(r);
            }
            Node& pn = out.tree.nodes[parent.node];
            pn.feature = s.feature;
            if (bf.categorical) {
                pn.category_route = s.route;
                pn.default_left = s.default_left;
            } else {
                pn.threshold = bf.upper_bounds[s.threshold_bin];
            }
            const int left_id = static_cast<int>(out.tree.nodes.size());
            out.tree.nodes[parent.node].left = left_id;
            out.tree.nodes[parent.node].right = left_id + 1;
            out.tree.nodes.emplace_back();
            out.tree.nodes.emplace_back();

            const bool left_smaller = left_rows.size() <= right_rows.size();
            std::vector<HistBin> small_hist =
                build_hist(left_smaller ? left_rows : right_rows, g, h, w, feature_mask);
            std::vector<HistBin> large_hist = std::move(parent.hist);
            for (int f : feature_mask) {
                const int off = offsets_[f];
                for (int b = 0; b < features_[f].n_bins; ++b) {
                    HistBin& L = large_hist[off + b];
                    const HistBin& S = small_hist[off + b];
                    L.g -= S.g;
                    L.h -= S.h;
                    L.w -= S.w;
                    L.n -= S.n;
                }
            }
            Leaf lchild{left_id, std::move(left_rows), {}, 0, 0, 0, {}};
            Leaf rchild{left_id + 1, std::move(right_rows), {}, 0, 0, 0, {}};
            lchild.hist = left_smaller ? std::move(small_hist) : std::move(large_hist);
            rchild.hist = left_smaller ? std::move(large_hist) : std::move(small_hist);
            for (Leaf* c : {&lchild, &rchild}) {
                totals(c->rows, g, h, w, c->G, c->H, c->W);
                c->best = best_split(c->hist, c->G, c->H, c->W, feature_mask, cfg);
            }
            leaves.push_back(std::move(lchild));
            leaves.push_back(std::move(rchild));
        }
        out.leaf_rows.resize(out.tree.nodes.size());
        for (auto& leaf : leaves) {
            const double denom = leaf.H + cfg.lambda;
            out.tree.nodes[leaf.node].value = denom > 0.0 ? -leaf.G / denom : 0.0;
            out.leaf_rows[leaf.node] = std::move(leaf.rows);
        }
        return out;
    }

private:
    static void totals(const std::vector<int>& rows, const std::vector<double>& g, const std::vector<double>& h,
                       const std::vector<double>& w, double& G, double& H, double& W) {
        G = H = W = 0.0;
        for (int r : rows) {
            G += g[r];
            H += h[r];
            W += w[r];
        }
    }

    std::vector<HistBin> build_hist(const std::vector<int>& rows, const std::vector<double>& g,
                                    const std::vector<double>& h, const std::vector<double>& w,
                                    const std::vector<int>& feature_mask) const {
        std::vector<HistBin> hist(static_cast<std::size_t>(total_bins_));
        for (int f : feature_mask) {
            HistBin* base = hist.data() + offsets_[f];
            const std::uint16_t* bins = features_[f].bins.data();
            for (int r : rows) {
                HistBin& hb = base[bins[r]];
                hb.g += g[r];
                hb.h += h[r];
                hb.w += w[r];
                ++hb.n;
            }
        }
        return hist;
    }

    SplitCandidate best_split(const std::vector<HistBin>& hist, double G, double H, double W,
                              const std::vector<int>& feature_mask, const GrowConfig& cfg) const {
        SplitCandidate best;
        std::uint32_t N = 0;
        if (!feature_mask.empty()) {
            const int f0 = feature_mask.front();
            for (int b = 0; b < features_[f0].n_bins; ++b) N += hist[offsets_[f0] + b].n;
        }
        if (N < static_cast<std::uint32_t>(2 * cfg.min_rows)) return best;
        const double parent_score = G * G / (H + cfg.lambda);
        auto gain_of = [&](double GL, double HL, std::uint32_t NL) -> double {
            const double GR = G - GL;
            const double HR = H - HL;
            const std::uint32_t NR = N - NL;
            if (NL < static_cast<std::uint32_t>(cfg.min_rows) || NR < static_cast<std::uint32_t>(cfg.min_rows))
                return -std::numeric_limits<double>::infinity();
            if (HL < cfg.min_hessian || HR < cfg.min_hessian) return -std::numeric_limits<double>::infinity();
            return GL * GL / (HL + cfg.lambda) + GR * GR / (HR + cfg.lambda) - parent_score;
        };
        for (int f : feature_mask) {
            const BinnedFeature& bf = features_[f];
            const HistBin* base = hist.data() + offsets_[f];
            if (!bf.categorical) {
                double GL = 0.0, HL = 0.0;
                std::uint32_t NL = 0;
                for (int b = 0; b + 1 < bf.n_bins; ++b) {
                    GL += base[b].g;
                    HL += base[b].h;
                    NL += base[b].n;
                    if (base[b].n == 0) continue;
                    const double gain = gain_of(GL, HL, NL);
                    if (gain > best.gain) {
                        best.gain = gain;
                        best.feature = f;
                        best.threshold_bin = b;
                        best.route.clear();
                    }
                }
                continue;
            }
            // Categorical: order observed levels by mean gradient, then scan prefixes.
            std::vector<int> present;
            for (int b = 0; b < bf.n_bins; ++b)
                if (base[b].n > 0) present.push_back(b);
            if (present.size() < 2) continue;
            std::stable_sort(present.begin(), present.end(), [&](int a, int b) {
                return base[a].g / (base[a].h + cfg.cat_smooth) < base[b].g / (base[b].h + cfg.cat_smooth);
            });
            double GL = 0.0, HL = 0.0, WL = 0.0;
            std::uint32_t NL = 0;
            for (std::size_t k = 0; k + 1 < present.size(); ++k) {
                const HistBin& hb = base[present[k]];
                GL += hb.g;
                HL += hb.h;
                WL += hb.w;
                NL += hb.n;
                const double gain = gain_of(GL, HL, NL);
                if (gain > best.gain) {
                    best.gain = gain;
                    best.feature = f;
                    best.threshold_bin = -1;
                    best.route.assign(static_cast<std::size_t>(bf.n_bins), std::int8_t{-1});
                    for (std::size_t j = 0; j < present.size(); ++j)
                        best.route[present[j]] = j <= k ? std::int8_t{0} : std::int8_t{1};
                    best.default_left = WL >= W - WL;
                }
            }
        }
        return best;
    }

    const std::vector<BinnedFeature>& features_;
    std::vector<int> offsets_;
    int total_bins_;
};

/// Shared binned view of a training frame.
struct BinnedData {
    std::vector<BinnedFeature> features;
    std::vector<int> offsets;
    int total_bins = 0;

    BinnedData(const FeatureFrame& frame, int max_bins) {
        for (const auto& col : frame.columns) {
            offsets.push_back(total_bins);
            features.push_back(bin_feature(col, max_bins));
            total_bins += features.back().n_bins;
        }
    }

    /// Tree traversal on binned values; agrees with Tree::predict on raw values.
    double predict_binned(const Tree& tree, int row) const {
        int id = 0;
        while (true) {
            const Node& n = tree.nodes[id];
            if (n.is_leaf()) return n.value;
            const BinnedFeature& bf = features[n.feature];
            const int b = bf.bins[row];
            bool left;
            if (bf.categorical) {
                const std::int8_t route = n.category_route[b];
                left = route < 0 ? n.default_left : route == 0;
            } else {
                left = bf.upper_bounds[b] <= n.threshold;
            }
            id = left ? n.left : n.right;
        }
    }
};

inline std::vector<double> base_scores(const Objective& obj, const std::vector<int>& rows, std::span<const double> y,
                                       std::span<const double> w) {
    switch (obj.kind) {
        case ObjectiveKind::squared_error: {
            double s = 0.0, ws = 0.0;
            for (int r : rows) {
                s += w[r] * y[r];
                ws += w[r];
            }
            return {s / ws};
        }
        case ObjectiveKind::pinball: {
            std::vector<std::pair<double, double>> vw;
            vw.reserve(rows.size());
            for (int r : rows) vw.emplace_back(y[r], w[r]);
            return {weighted_quantile(std::move(vw), obj.percentile)};
        }
        case ObjectiveKind::binary_logloss: {
            double s = 0.0, ws = 0.0;
            for (int r : rows) {
                s += w[r] * (y[r] > 0.5 ? 1.0 : 0.0);
                ws += w[r];
            }
            const double p = clamp_prob(s / ws);
            return {std::log(p / (1.0 - p))};
        }
        case ObjectiveKind::multiclass_logloss: {
            std::vector<double> counts(static_cast<std::size_t>(obj.num_class), 0.0);
            double ws = 0.0;
            for (int r : rows) {
                counts[static_cast<std::size_t>(y[r])] += w[r];
                ws += w[r];
            }
            std::vector<double> out(counts.size());
            for (std::size_t k = 0; k < counts.size(); ++k) out[k] = std::log(clamp_prob(counts[k] / ws));
            return out;
        }
    }
    return {0.0};
}

/// Incremental booster over a subset of rows, with optional held-out rows
/// scored after every iteration.
class Booster {
public:
    Booster(const BinnedData& data, const Objective& obj, std::span<const double> y, std::span<const double> w,
            std::vector<int> train_rows, std::vector<int> eval_rows, const TrainParams& params, int num_leaves,
            int min_rows)
        : data_(data), obj_(obj), y_(y), w_(w), train_(std::move(train_rows)), eval_(std::move(eval_rows)),
          params_(params), K_(obj.outputs()), grower_(data.features, data.offsets, data.total_bins) {
        cfg_.num_leaves = num_leaves;
        cfg_.min_rows = min_rows;
        cfg_.min_hessian = params.min_sum_hessian;
        cfg_.lambda = params.lambda_l2;
        cfg_.cat_smooth = params.cat_smooth;
        base_ = base_scores(obj, train_, y, w);
        const std::size_t n = y.size();
        raw_.assign(n * static_cast<std::size_t>(K_), 0.0);
        for (int r : train_)
            for (int k = 0; k < K_; ++k) raw_[static_cast<std::size_t>(r) * K_ + k] = base_[k];
        for (int r : eval_)
            for (int k = 0; k < K_; ++k) raw_[static_cast<std::size_t>(r) * K_ + k] = base_[k];
        g_.assign(n, 0.0);
        h_.assign(n, 0.0);
    }

    const std::vector<double>& base() const { return base_; }

    /// Adds one iteration (K trees) and returns them.
    std::vector<Tree> step(int iteration) {
        const std::vector<int> mask = feature_mask(iteration);
        std::vector<Tree> trees;
        std::vector<double> grad(K_), hess(K_);
        // Gradients for all classes come from the scores before this iteration.
        std::vector<double> G(train_.size() * static_cast<std::size_t>(K_)), Hs(G.size());
        for (std::size_t i = 0; i < train_.size(); ++i) {
            const int r = train_[i];
            point_gradient(obj_, std::span<const double>(raw_.data() + static_cast<std::size_t>(r) * K_, K_), y_[r],
                           grad, hess);
            for (int k = 0; k < K_; ++k) {
                G[i * K_ + k] = grad[k] * w_[r];
                Hs[i * K_ + k] = (obj_.kind == ObjectiveKind::pinball ? 1.0 : hess[k]) * w_[r];
            }
        }
        std::vector<double> score_update(raw_.size(), 0.0);
        for (int k = 0; k < K_; ++k) {
            for (std::size_t i = 0; i < train_.size(); ++i) {
                g_[train_[i]] = G[i * K_ + k];
                h_[train_[i]] = Hs[i * K_ + k];
            }
            GrownTree grown = grower_.grow(train_, g_, h_, to_vector_w(), mask, cfg_);
            Tree& tree = grown.tree;
            for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
                Node& node = tree.nodes[id];
                if (!node.is_leaf()) continue;
                if (obj_.kind == ObjectiveKind::pinball) {
                    // Quantile leaves: weighted percentile of the current residuals.
                    std::vector<std::pair<double, double>> res;
                    res.reserve(grown.leaf_rows[id].size());
                    for (int r : grown.leaf_rows[id])
                        res.emplace_back(y_[r] - raw_[static_cast<std::size_t>(r) * K_], w_[r]);
                    node.value = res.empty() ? 0.0 : weighted_quantile(std::move(res), obj_.percentile);
                }
                node.value *= params_.learning_rate;
                for (int r : grown.leaf_rows[id]) score_update[static_cast<std::size_t>(r) * K_ + k] = node.value;
            }
            for (int r : eval_) score_update[static_cast<std::size_t>(r) * K_ + k] = data_.predict_binned(tree, r);
            trees.push_back(std::move(tree));
        }
        for (int r : train_)
            for (int k = 0; k < K_; ++k) raw_[static_cast<std::size_t>(r) * K_ + k] += score_update[static_cast<std::size_t>(r) * K_ + k];
        for (int r : eval_)
            for (int k = 0; k < K_; ++k) raw_[static_cast<std::size_t>(r) * K_ + k] += score_update[static_cast<std::size_t>(r) * K_ + k];
        return trees;
    }

    double eval_loss() const { return loss_over(eval_); }
    double train_loss() const { return loss_over(train_); }

private:
    const std::vector<double>& to_vector_w() {
        if (w_vec_.empty()) w_vec_.assign(w_.begin(), w_.end());
        return w_vec_;
    }

    double loss_over(const std::vector<int>& rows) const {
        double total = 0.0, wsum = 0.0;
        std::vector<double> out(K_);
        for (int r : rows) {
            std::span<const double> raw(raw_.data() + static_cast<std::size_t>(r) * K_, K_);
            double loss;
            switch (obj_.kind) {
                case ObjectiveKind::binary_logloss: {
                    const double p = clamp_prob(sigmoid(raw[0]));
                    loss = y_[r] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
                    break;
                }
                case ObjectiveKind::multiclass_logloss:
                    softmax(raw, out);
                    loss = -std::log(clamp_prob(out[static_cast<std::size_t>(y_[r])]));
                    break;
                default: loss = point_loss(obj_, raw, y_[r]);
            }
            total += w_[r] * loss;
            wsum += w_[r];
        }
        return wsum > 0 ? total / wsum : 0.0;
    }

    std::vector<int> feature_mask(int iteration) const {
        const int F = static_cast<int>(data_.features.size());
        std::vector<int> all(F);
        std::iota(all.begin(), all.end(), 0);
        const int m = std::clamp(static_cast<int>(std::lround(params_.feature_subsample * F)), 1, F);
        if (m == F) return all;
        StreamRng rng(params_.seed, 0xFEA7ULL, static_cast<std::uint64_t>(iteration));
        for (int i = 0; i < m; ++i) std::swap(all[i], all[i + static_cast<int>(rng.below(F - i))]);
        all.resize(m);
        std::sort(all.begin(), all.end());
        return all;
    }

    const BinnedData& data_;
    Objective obj_;
    std::span<const double> y_;
    std::span<const double> w_;
    std::vector<double> w_vec_;
    std::vector<int> train_;
    std::vector<int> eval_;
    const TrainParams& params_;
    int K_;
    TreeGrower grower_;
    GrowConfig cfg_;
    std::vector<double> base_;
    std::vector<double> raw_;
    std::vector<double> g_, h_;
};

inline bool target_degenerate(const Objective& obj, std::span<const double> y) {
    if (y.empty()) return true;
    if (obj.kind == ObjectiveKind::binary_logloss) {
        const bool first = y[0] > 0.5;
        return std::all_of(y.begin(), y.end(), [&](double v) { return (v > 0.5) == first; });
    }
    return std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
}

}  // namespace detail

// ============================================================================
// Public training and prediction
// ============================================================================

/// Fits an ensemble with folds-fold CV over the leaf grid, choosing the
/// (leaf count, iteration count) pair with the lowest mean out-of-fold loss,
/// then refits on all rows at that configuration.
inline TreeEnsemble fit_gbm(const FeatureFrame& features, std::span<const double> target,
                            std::span<const double> weights, const Objective& objective, const TrainParams& params) {
    objective.validate();
    params.validate();
    const std::size_t n = target.size();
    if (weights.size() != n) throw ContractError("fit_gbm: weights length differs from target");
    for (const auto& c : features.columns)
        if (c.values.size() != n) throw ContractError("fit_gbm: feature '" + c.name + "' length differs from target");
    if (n < static_cast<std::size_t>(params.folds))
        throw ContractError("fit_gbm: need at least as many rows as folds");
    for (std::size_t i = 0; i < n; ++i) {
        if (!(weights[i] > 0.0)) throw ContractError("fit_gbm: weights must be positive");
        const double y = target[i];
        if (!std::isfinite(y)) throw ContractError("fit_gbm: non-finite target");
        if (objective.kind == ObjectiveKind::multiclass_logloss &&
            (y < 0 || y >= objective.num_class || y != std::floor(y)))
            throw ContractError("fit_gbm: multiclass target must be a class code");
        if (objective.kind == ObjectiveKind::binary_logloss && y != 0.0 && y != 1.0)
            throw ContractError("fit_gbm: binary target must be 0 or 1");
    }

    // Weights rescaled to mean 1 so hessian thresholds are scale-free.
    const double wmean = std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = weights[i] / wmean;

    TreeEnsemble model;
    model.objective = objective;
    for (const auto& c : features.columns) model.features.push_back({c.name, c.categorical, c.levels});

    std::vector<int> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    if (detail::target_degenerate(objective, target) || features.columns.empty()) {
        model.base_score = detail::base_scores(objective, all_rows, target, w);
        model.degenerate = detail::target_degenerate(objective, target);
        model.n_iterations = 0;
        return model;
    }

    const detail::BinnedData data(features, params.max_bins);
    const int min_rows = params.min_node_rows(n);

    // Seeded shuffle, then contiguous fold blocks.
    std::vector<int> order = all_rows;
    {
        StreamRng rng(params.seed, 0xF01DULL, 0);
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    }
    std::vector<int> fold_of(n);
    for (int f = 0; f < params.folds; ++f) {
        const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(params.folds);
        const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(params.folds);
        for (std::size_t i = lo; i < hi; ++i) fold_of[order[i]] = f;
    }

    struct GridResult {
        std::vector<double> curve;
        int best_iteration = 0;
        double best_loss = std::numeric_limits<double>::infinity();
    };
    std::vector<GridResult> results(params.leaf_grid.size());
    parallel_for(params.leaf_grid.size(), params.threads, [&](std::size_t gi) {
        std::vector<detail::Booster> boosters;
        boosters.reserve(static_cast<std::size_t>(params.folds));
        for (int f = 0; f < params.folds; ++f) {
            std::vector<int> tr, ev;
            for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? ev : tr).push_back(static_cast<int>(i));
            boosters.emplace_back(data, objective, target, w, std::move(tr), std::move(ev), params,
                                  params.leaf_grid[gi], min_rows);
        }
        GridResult& res = results[gi];
        auto mean_eval = [&] {
            double s = 0.0;
            for (const auto& b : boosters) s += b.eval_loss();
            return s / static_cast<double>(boosters.size());
        };
        res.curve.push_back(mean_eval());
        res.best_loss = res.curve[0];
        for (int it = 1; it <= params.max_iterations; ++it) {
            for (auto& b : boosters) b.step(it);
            const double loss = mean_eval();
            res.curve.push_back(loss);
            if (loss < res.best_loss) {
                res.best_loss = loss;
                res.best_iteration = it;
            }
            if (params.early_stopping_rounds > 0 && it - res.best_iteration >= params.early_stopping_rounds) break;
        }
    });

    std::size_t best_grid = 0;
    for (std::size_t gi = 1; gi < results.size(); ++gi)
        if (results[gi].best_loss < results[best_grid].best_loss) best_grid = gi;

    model.num_leaves = params.leaf_grid[best_grid];
    model.n_iterations = results[best_grid].best_iteration;
    model.cv_loss = results[best_grid].best_loss;
    model.cv_curve = results[best_grid].curve;

    detail::Booster full(data, objective, target, w, all_rows, {}, params, model.num_leaves, min_rows);
    model.base_score = full.base();
    for (int it = 1; it <= model.n_iterations; ++it) {
        auto trees = full.step(it);
        for (auto& t : trees) model.trees.push_back(std::move(t));
    }
    return model;
}

/// Raw-score training loss of a fitted model on its training data, one value
/// per iteration prefix (0 = base score only).
inline std::vector<double> training_loss_curve(const TreeEnsemble& model, const FeatureFrame& features,
                                               std::span<const double> target, std::span<const double> weights);

namespace detail {

/// Row-major feature matrix aligned with the model's feature list, with
/// categorical levels remapped by name.
inline Matrix align_features(const TreeEnsemble& model, const FeatureFrame& frame) {
    const std::size_t n = frame.rows();
    Matrix x(n, model.features.size());
    for (std::size_t f = 0; f < model.features.size(); ++f) {
        const FeatureInfo& info = model.features[f];
        const FeatureColumn* col = frame.find(info.name);
        if (!col) throw ContractError("predict: missing feature '" + info.name + "'");
        if (col->categorical != info.categorical) throw ContractError("predict: feature '" + info.name + "' kind differs");
        if (col->values.size() != n) throw ContractError("predict: ragged feature frame");
        if (!info.categorical) {
            for (std::size_t r = 0; r < n; ++r) x(r, f) = col->values[r];
            continue;
        }
        std::vector<double> remap(col->levels.size(), -1.0);
        for (std::size_t l = 0; l < col->levels.size(); ++l)
            for (std::size_t m = 0; m < info.levels.size(); ++m)
                if (col->levels[l] == info.levels[m]) remap[l] = static_cast<double>(m);
        for (std::size_t r = 0; r < n; ++r) {
            const double code = col->values[r];
            x(r, f) = (code >= 0 && code < static_cast<double>(remap.size())) ? remap[static_cast<std::size_t>(code)] : -1.0;
        }
    }
    return x;
}

}  // namespace detail

/// Raw scores (N x outputs), using the first `iterations` iterations (all when negative).
inline Matrix predict_raw(const TreeEnsemble& model, const FeatureFrame& frame, int iterations = -1) {
    const int K = model.objective.outputs();
    const Matrix x = detail::align_features(model, frame);
    const std::size_t n = x.rows;
    const int iters = iterations < 0 ? model.n_iterations : std::min(iterations, model.n_iterations);
    Matrix raw(n, static_cast<std::size_t>(K));
    for (std::size_t r = 0; r < n; ++r) {
        double* out = raw.row(r);
        for (int k = 0; k < K; ++k) out[k] = model.base_score[k];
        const double* xr = x.row(r);
        for (int it = 0; it < iters; ++it)
            for (int k = 0; k < K; ++k) out[k] += model.trees[static_cast<std::size_t>(it) * K + k].predict(xr);
    }
    return raw;
}

/// Probabilities (row-stochastic for multiclass, P(class 1) for binary) or values.
inline Matrix predict(const TreeEnsemble& model, const FeatureFrame& frame) {
    Matrix raw = predict_raw(model, frame);
    Matrix out(raw.rows, raw.cols);
    for (std::size_t r = 0; r < raw.rows; ++r)
        transform_raw(model.objective, std::span<const double>(raw.row(r), raw.cols), std::span<double>(out.row(r), out.cols));
    return out;
}

inline std::vector<double> training_loss_curve(const TreeEnsemble& model, const FeatureFrame& features,
                                               std::span<const double> target, std::span<const double> weights) {
    std::vector<double> curve;
    for (int it = 0; it <= model.n_iterations; ++it) {
        Matrix raw = predict_raw(model, features, it);
        Matrix out(raw.rows, raw.cols);
        for (std::size_t r = 0; r < raw.rows; ++r)
            transform_raw(model.objective, std::span<const double>(raw.row(r), raw.cols), std::span<double>(out.row(r), out.cols));
        curve.push_back(loss_eval(model.objective, out, target, weights));
    }
    return curve;
}

// ============================================================================
// Serialization
// ============================================================================
//
// Text format, version 1. Header lines, then one record per tree:
//
//   statfuse-ensemble 1
//   objective <name> <num_class> <percentile>
//   base_score <v_1> ... <v_K>
//   n_iterations <int>
//   num_leaves <int>
//   degenerate <0|1>
//   cv_loss <real|NA>
//   features <F>
//   feature <c|n> <name> <n_levels> <level_1> ... (one line per feature)
//   trees <T>
//   tree <n_nodes> <node> <node> ...
//
// A node is `L <value>`, `N <feature> <threshold> <left> <right>` or
// `C <feature> <default_left> <left> <right> <route>` where route has one
// character per level: L, R or - (unseen). Names are percent-encoded.

namespace detail {

inline std::string encode_token(const std::string& s) {
    std::string out;
    for (unsigned char c : s) {
        if (c <= ' ' || c == '%' || c >= 0x7F) {
            char buf[4];
            std::snprintf(buf, sizeof(buf), "%%%02X", c);
            out += buf;
        } else {
            out += static_cast<char>(c);
        }
    }
    return out.empty() ? "%00" : out;
}

inline std::string decode_token(const std::string& s) {
    if (s == "%00") return {};
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size()) {
            out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
            i += 2;
        } else {
            out += s[i];
        }
    }
    return out;
}

inline double read_double(std::istream& in) {
    std::string tok;
    in >> tok;
    if (tok == "NA") return std::numeric_limits<double>::quiet_NaN();
    if (tok == "inf") return std::numeric_limits<double>::infinity();
    if (tok == "-inf") return -std::numeric_limits<double>::infinity();
    double v;
    if (!parse_double(tok, v)) throw ContractError("ensemble: malformed number '" + tok + "'");
    return v;
}

inline void expect(std::istream& in, const std::string& word) {
    std::string tok;
    in >> tok;
    if (tok != word) throw ContractError("ensemble: expected '" + word + "', found '" + tok + "'");
}

}  // namespace detail

inline void save_ensemble(std::ostream& out, const TreeEnsemble& m) {
    out << "statfuse-ensemble 1\n";
    out << "objective " << m.objective.name() << ' ' << m.objective.num_class << ' '
        << format_double(m.objective.percentile) << '\n';
    out << "base_score";
    for (double b : m.base_score) out << ' ' << format_double(b);
    out << "\nn_iterations " << m.n_iterations << "\nnum_leaves " << m.num_leaves << "\ndegenerate "
        << (m.degenerate ? 1 : 0) << "\ncv_loss " << format_double(m.cv_loss) << "\nfeatures " << m.features.size()
        << '\n';
    for (const auto& f : m.features) {
        out << "feature " << (f.categorical ? 'c' : 'n') << ' ' << detail::encode_token(f.name) << ' '
            << f.levels.size();
        for (const auto& l : f.levels) out << ' ' << detail::encode_token(l);
        out << '\n';
    }
    out << "trees " << m.trees.size() << '\n';
    for (const auto& t : m.trees) {
        out << "tree " << t.nodes.size();
        for (const auto& n : t.nodes) {
            if (n.is_leaf()) {
                out << " L " << format_double(n.value);
            } else if (n.category_route.empty()) {
                out << " N " << n.feature << ' ' << format_double(n.threshold) << ' ' << n.left << ' ' << n.right;
            } else {
                std::string route;
                for (auto r : n.category_route) route += r < 0 ? '-' : (r == 0 ? 'L' : 'R');
                out << " C " << n.feature << ' ' << (n.default_left ? 1 : 0) << ' ' << n.left << ' ' << n.right << ' '
                    << route;
            }
        }
        out << '\n';
    }
}

inline TreeEnsemble load_ensemble(std::istream& in) {
    using detail::expect;
    TreeEnsemble m;
    expect(in, "statfuse-ensemble");
    int version = 0;
    in >> version;
    if (version != 1) throw ContractError("ensemble: unsupported format version " + std::to_string(version));
    expect(in, "objective");
    std::string kind;
    in >> kind >> m.objective.num_class;
    m.objective.percentile = detail::read_double(in);
    if (kind == "multiclass") m.objective.kind = ObjectiveKind::multiclass_logloss;
    else if (kind == "binary") m.objective.kind = ObjectiveKind::binary_logloss;
    else if (kind == "squared_error") m.objective.kind = ObjectiveKind::squared_error;
    else if (kind == "pinball") m.objective.kind = ObjectiveKind::pinball;
    else throw ContractError("ensemble: unknown objective '" + kind + "'");
    expect(in, "base_score");
    for (int k = 0; k < m.objective.outputs(); ++k) m.base_score.push_back(detail::read_double(in));
    int degenerate = 0;
    std::size_t nfeat = 0, ntrees = 0;
    expect(in, "n_iterations");
    in >> m.n_iterations;
    expect(in, "num_leaves");
    in >> m.num_leaves;
    expect(in, "degenerate");
    in >> degenerate;
    m.degenerate = degenerate != 0;
    expect(in, "cv_loss");
    m.cv_loss = detail::read_double(in);
    expect(in, "features");
    in >> nfeat;
    for (std::size_t f = 0; f < nfeat; ++f) {
        expect(in, "feature");
        FeatureInfo info;
        char c;
        std::string name;
        std::size_t nlev;
        in >> c >> name >> nlev;
        info.categorical = c == 'c';
        info.name = detail::decode_token(name);
        for (std::size_t l = 0; l < nlev; ++l) {
            std::string lev;
            in >> lev;
            info.levels.push_back(detail::decode_token(lev));
        }
        m.features.push_back(std::move(info));
    }
    expect(in, "trees");
    in >> ntrees;
    for (std::size_t t = 0; t < ntrees; ++t) {
        expect(in, "tree");
        std::size_t nn;
        in >> nn;
        Tree tree;
        for (std::size_t i = 0; i < nn; ++i) {
            Node node;
            std::string tag;
            in >> tag;
            if (tag == "L") {
                node.value = detail::read_double(in);
            } else if (tag == "N") {
                in >> node.feature;
                node.threshold = detail::read_double(in);
                in >> node.left >> node.right;
            } else if (tag == "C") {
                int dl;
                std::string route;
                in >> node.feature >> dl >> node.left >> node.right >> route;
                node.default_left = dl != 0;
                for (char r : route) node.category_route.push_back(r == '-' ? -1 : (r == 'L' ? 0 : 1));
            } else {
                throw ContractError("ensemble: bad node tag '" + tag + "'");
            }
            if (!node.is_leaf() && (node.feature >= static_cast<int>(nfeat) || node.left < 0 ||
                                    node.right < 0 || node.left >= static_cast<int>(nn) ||
                                    node.right >= static_cast<int>(nn)))
                throw ContractError("ensemble: node references out of range");
            tree.nodes.push_back(std::move(node));
        }
        m.trees.push_back(std::move(tree));
    }
    if (!in) throw ContractError("ensemble: truncated input");
    if (m.trees.size() != static_cast<std::size_t>(m.n_iterations) * static_cast<std::size_t>(m.objective.outputs()))
        throw ContractError("ensemble: tree count does not match iterations");
    return m;
}

}  // namespace statfuse::gbdt

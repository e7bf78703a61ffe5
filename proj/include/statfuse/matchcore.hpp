#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "statfuse/common.hpp"

// Kernels for conditional-expectation matching.

namespace statfuse::match {

// ============================================================================
// Robust scaling
// ============================================================================

struct ScalingParams {
    std::vector<double> median;
    std::vector<double> mad;       // after the degenerate-column fallback
    std::vector<bool> dropped;     // constant columns, excluded from distances
    double epsilon = 0.001;

    std::size_t columns() const { return median.size(); }
    bool operator==(const ScalingParams&) const = default;
};

/// Per-column median and unscaled MAD; a zero MAD falls back to half the IQR,
/// and a column with neither spread is marked dropped.
inline ScalingParams robust_scale_fit(const Matrix& m, double epsilon = 0.001) {
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw ContractError("robust_scale_fit: epsilon must lie in (0, 0.5)");
    ScalingParams p;
    p.epsilon = epsilon;
    for (std::size_t j = 0; j < m.cols; ++j) {
        std::vector<double> col = m.column(j);
        for (double v : col)
            if (!std::isfinite(v)) throw ContractError("robust_scale_fit: non-finite value");
        const double med = median(col);
        std::vector<double> dev(col.size());
        for (std::size_t i = 0; i < col.size(); ++i) dev[i] = std::abs(col[i] - med);
        double mad = median(dev);
        if (!(mad > 0.0)) mad = 0.5 * (quantile_type7(col, 0.75) - quantile_type7(col, 0.25));
        const bool drop = !(mad > 0.0);
        p.median.push_back(med);
        p.mad.push_back(drop ? 0.0 : mad);
        p.dropped.push_back(drop);
    }
    return p;
}

/// ((x - med)/mad - Q(eps)) / (2 Q(1 - eps)). Dropped columns map to 0.5.
inline Matrix robust_scale_apply(const ScalingParams& p, const Matrix& m) {
    if (m.cols != p.columns()) throw ContractError("robust_scale_apply: column count mismatch");
    const double q = normal_quantile(1.0 - p.epsilon);  // Q(eps) = -q by symmetry
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j)
            out(i, j) = p.dropped[j] ? 0.5 : ((m(i, j) - p.median[j]) / p.mad[j] + q) / (2.0 * q);
    return out;
}

/// Inverse of robust_scale_apply; dropped columns return their median.
inline Matrix robust_unscale(const ScalingParams& p, const Matrix& scaled) {
    const double q = normal_quantile(1.0 - p.epsilon);
    Matrix out(scaled.rows, scaled.cols);
    for (std::size_t i = 0; i < scaled.rows; ++i)
        for (std::size_t j = 0; j < scaled.cols; ++j)
            out(i, j) = p.dropped[j] ? p.median[j] : p.median[j] + p.mad[j] * (2.0 * q * scaled(i, j) - q);
    return out;
}

// ============================================================================
// Nearest-neighbor search
// ============================================================================

enum class KnnMode { exact, approximate };

struct KnnResult {
    std::size_t k = 0;
    std::vector<std::uint32_t> index;  // queries x k, nearest first
    std::vector<double> distance;

    const std::uint32_t* neighbors(std::size_t q) const { return index.data() + q * k; }
};

namespace detail {

inline double squared_distance(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double t = a[j] - b[j];
        s += t * t;
    }
    return s;
}

struct Candidate {
    double d2;
    std::uint32_t index;
    bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace detail

/// kd-tree over the rows of a reference matrix. Exact queries order ties by
/// reference index; approximate queries accept a (1 + eps) distance slack.
class KdTree {
public:
    explicit KdTree(const Matrix& reference, std::size_t leaf_size = 16) : ref_(reference), leaf_size_(leaf_size) {
        if (ref_.rows > std::numeric_limits<std::uint32_t>::max()) throw ContractError("KdTree: too many rows");
        order_.resize(ref_.rows);
        std::iota(order_.begin(), order_.end(), 0u);
        if (ref_.rows > 0) build(0, ref_.rows);
    }

    std::size_t size() const { return ref_.rows; }

    /// The k nearest rows to q, sorted by (distance, index).
    void query(const double* q, std::size_t k, double eps, std::vector<detail::Candidate>& out) const {
        std::priority_queue<detail::Candidate> heap;  // worst candidate on top
        const double slack = (1.0 + eps) * (1.0 + eps);
        search(0, q, k, slack, heap);
        out.resize(heap.size());
        for (std::size_t i = heap.size(); i-- > 0;) {
            out[i] = heap.top();
            heap.pop();
        }
    }

private:
    struct NodeRec {
        std::size_t begin, end;
        int left = -1, right = -1;
        std::vector<double> lo, hi;  // bounding box
    };

    int build(std::size_t begin, std::size_t end) {
        const std::size_t d = ref_.cols;
        NodeRec node{begin, end, -1, -1, std::vector<double>(d, std::numeric_limits<double>::infinity()),
                     std::vector<double>(d, -std::numeric_limits<double>::infinity())};
        for (std::size_t i = begin; i < end; ++i) {
            const double* r = ref_.row(order_[i]);
            for (std::size_t j = 0; j < d; ++j) {
                node.lo[j] = std::min(node.lo[j], r[j]);
                node.hi[j] = std::max(node.hi[j], r[j]);
            }
        }
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back(node);
        if (end - begin <= leaf_size_) return id;
        std::size_t split_dim = 0;
        double widest = -1.0;
        for (std::size_t j = 0; j < d; ++j) {
            if (node.hi[j] - node.lo[j] > widest) {
                widest = node.hi[j] - node.lo[j];
                split_dim = j;
            }
        }
        if (!(widest > 0.0)) return id;  // all points identical
        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + static_cast<long>(begin), order_.begin() + static_cast<long>(mid),
                         order_.begin() + static_cast<long>(end), [&](std::uint32_t a, std::uint32_t b) {
                             const double va = ref_(a, split_dim), vb = ref_(b, split_dim);
                             return va < vb || (va == vb && a < b);
                         });
        const int l = build(begin, mid);
        const int r = build(mid, end);
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    double box_distance(const NodeRec& n, const double* q) const {
        double s = 0.0;
        for (std::size_t j = 0; j < ref_.cols; ++j) {
            double t = 0.0;
            if (q[j] < n.lo[j]) t = n.lo[j] - q[j];
            else if (q[j] > n.hi[j]) t = q[j] - n.hi[j];
            s += t * t;
        }
        return s;
    }

    void search(int id, const double* q, std::size_t k, double slack,
                std::priority_queue<detail::Candidate>& heap) const {
        const NodeRec& n = nodes_[id];
        if (heap.size() == k) {
            // Relative margin keeps equal-distance ties reachable despite rounding.
            const double bound = box_distance(n, q) * slack;
            if (bound > heap.top().d2 * (1.0 + 1e-12) + 1e-300) return;
        }
        if (n.left < 0) {
            for (std::size_t i = n.begin; i < n.end; ++i) {
                const std::uint32_t idx = order_[i];
                const detail::Candidate c{detail::squared_distance(q, ref_.row(idx), ref_.cols), idx};
                if (heap.size() < k) {
                    heap.push(c);
                } else if (c < heap.top()) {
                    heap.pop();
                    heap.push(c);
                }
            }
            return;
        }
        const double dl = box_distance(nodes_[n.left], q);
        const double dr = box_distance(nodes_[n.right], q);
        if (dl <= dr) {
            search(n.left, q, k, slack, heap);
            search(n.right, q, k, slack, heap);
        } else {
            search(n.right, q, k, slack, heap);
            search(n.left, q, k, slack, heap);
        }
    }

    const Matrix& ref_;
    std::size_t leaf_size_;
    std::vector<std::uint32_t> order_;
    std::vector<NodeRec> nodes_;
};

inline constexpr double kApproximateEps = 0.1;

/// Euclidean K nearest reference rows per query, ascending distance, ties by index.
inline KnnResult knn_search(const Matrix& reference, const Matrix& queries, std::size_t K,
                            KnnMode mode = KnnMode::exact, int threads = 1) {
    if (reference.cols != queries.cols) throw ContractError("knn_search: column count mismatch");
    if (K == 0) throw ContractError("knn_search: K must be positive");
    if (K > reference.rows) throw ContractError("knn_search: K exceeds reference rows");
    KnnResult res;
    res.k = K;
    res.index.resize(queries.rows * K);
    res.distance.resize(queries.rows * K);
    const KdTree tree(reference);
    const double eps = mode == KnnMode::exact ? 0.0 : kApproximateEps;
    constexpr std::size_t kBatch = 256;
    const std::size_t batches = (queries.rows + kBatch - 1) / kBatch;
    parallel_for(batches, threads, [&](std::size_t b) {
        std::vector<detail::Candidate> found;
        const std::size_t end = std::min(queries.rows, (b + 1) * kBatch);
        for (std::size_t q = b * kBatch; q < end; ++q) {
            tree.query(queries.row(q), K, eps, found);
            for (std::size_t i = 0; i < K; ++i) {
                res.index[q * K + i] = found[i].index;
                res.distance[q * K + i] = std::sqrt(found[i].d2);
            }
        }
    });
    return res;
}

// ============================================================================
// Divergence and variable k
// ============================================================================

struct Divergence {
    double delta_u = 0.0;
    std::vector<double> delta_q;
    double total = 0.0;
};

/// Normal-equivalent spread implied by the outer predicted quantiles.
inline double implied_sigma(std::span<const double> Q, std::span<const double> P, double sigma_floor) {
    if (Q.size() != P.size() || P.size() < 2) throw ContractError("implied_sigma: need p >= 2 matching quantiles");
    const double sigma = (Q.back() - Q.front()) / (normal_quantile(P.back()) - normal_quantile(P.front()));
    return sigma > sigma_floor ? sigma : sigma_floor;
}

inline double share_tolerance(double P) { return P > 0.5 ? P : 1.0 - P; }

inline Divergence divergence(std::span<const double> x, double u, std::span<const double> Q,
                             std::span<const double> P, double sigma_floor) {
    if (x.empty()) throw ContractError("divergence: empty value set");
    const double sigma = implied_sigma(Q, P, sigma_floor);
    const double k = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / k;
    Divergence d;
    const double z = (mean - u) / sigma;
    d.delta_u = 1.0 - std::exp(-0.5 * z * z);  // 1 - phi(z)/phi(0)
    d.total = d.delta_u;
    for (std::size_t j = 0; j < Q.size(); ++j) {
        const double below = static_cast<double>(std::count_if(x.begin(), x.end(), [&](double v) { return v <= Q[j]; }));
        const double dj = std::abs(below / k - P[j]) / share_tolerance(P[j]);
        d.delta_q.push_back(dj);
        d.total += dj;
    }
    return d;
}

/// Prefix length in [1, K] minimizing the divergence; ties go to the smaller k.
inline std::size_t optimal_k(std::span<const double> values, double u, std::span<const double> Q,
                             std::span<const double> P, double sigma_floor) {
    if (values.empty()) throw ContractError("optimal_k: empty neighbor list");
    const double sigma = implied_sigma(Q, P, sigma_floor);
    const std::size_t p = Q.size();
    std::vector<double> tau(p);
    for (std::size_t j = 0; j < p; ++j) tau[j] = share_tolerance(P[j]);
    std::vector<std::size_t> below(p, 0);
    double sum = 0.0;
    std::size_t best_k = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= values.size(); ++k) {
        const double v = values[k - 1];
        sum += v;
        for (std::size_t j = 0; j < p; ++j)
            if (v <= Q[j]) ++below[j];
        const double kd = static_cast<double>(k);
        const double z = (sum / kd - u) / sigma;
        double total = 1.0 - std::exp(-0.5 * z * z);
        for (std::size_t j = 0; j < p; ++j) total += std::abs(static_cast<double>(below[j]) / kd - P[j]) / tau[j];
        if (total < best) {
            best = total;
            best_k = k;
        }
    }
    return best_k;
}

// ============================================================================
// k-means reduction
// ============================================================================

struct KMeansResult {
    Matrix centers;
    std::vector<std::uint32_t> assignment;
    double inertia = 0.0;
    int iterations = 0;
};

inline KMeansResult kmeans_reduce(const Matrix& D, std::size_t r, std::uint64_t seed, int max_iterations = 25,
                                  double tolerance = 1e-4) {
    const std::size_t n = D.rows, d = D.cols;
    if (r == 0 || r > n) throw ContractError("kmeans_reduce: r must lie in [1, rows]");
    KMeansResult res;
    res.centers = Matrix(r, d);
    StreamRng rng(seed, 0x6B6D65616E73ULL, 0);

    // k-means++ seeding
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.below(n);
    std::copy(D.row(first), D.row(first) + d, res.centers.row(0));
    for (std::size_t c = 1; c < r; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], detail::squared_distance(D.row(i), res.centers.row(c - 1), d));
            total += nearest[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                if (nearest[i] <= 0.0) continue;
                target -= nearest[i];
                if (target < 0.0) {
                    pick = i;
                    break;
                }
            }
            while (nearest[pick] <= 0.0 && pick > 0) --pick;
        } else {
            pick = rng.below(n);
        }
        std::copy(D.row(pick), D.row(pick) + d, res.centers.row(c));
    }

    res.assignment.assign(n, 0);
    std::vector<double> dist(n);
    double prev_inertia = std::numeric_limits<double>::infinity();
    auto assign = [&] {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::uint32_t arg = 0;
            for (std::size_t c = 0; c < r; ++c) {
                const double d2 = detail::squared_distance(D.row(i), res.centers.row(c), d);
                if (d2 < best) {
                    best = d2;
                    arg = static_cast<std::uint32_t>(c);
                }
            }
            res.assignment[i] = arg;
            dist[i] = best;
            inertia += best;
        }
        return inertia;
    };
    res.inertia = assign();
    for (int it = 0; it < max_iterations; ++it) {
        res.iterations = it + 1;
        Matrix sums(r, d);
        std::vector<std::size_t> counts(r, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = res.assignment[i];
            ++counts[c];
            for (std::size_t j = 0; j < d; ++j) sums(c, j) += D(i, j);
        }
        for (std::size_t c = 0; c < r; ++c) {
            if (counts[c] == 0) {
                // Empty cluster: reseed at the point farthest from its center.
                const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
                std::copy(D.row(far), D.row(far) + d, res.centers.row(c));
                dist[far] = 0.0;
                continue;
            }
            for (std::size_t j = 0; j < d; ++j) res.centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
        }
        prev_inertia = res.inertia;
        res.inertia = assign();
        if (prev_inertia <= 0.0 || (prev_inertia - res.inertia) / prev_inertia < tolerance) break;
    }
    return res;
}

// ============================================================================
// Donor pools
// ============================================================================

struct PoolOptions {
    std::size_t K = 500;
    std::size_t reduction = 0;  // 0: every donor row is an anchor
    std::uint64_t seed = 1;
    KnnMode mode = KnnMode::exact;
    int threads = 1;
};

struct DonorPools {
    Matrix anchors;                          // scaled anchor coordinates
    std::size_t K = 0;
    std::vector<std::uint32_t> neighbors;    // anchors x K donor rows, nearest first
    std::vector<std::uint32_t> k_star;
    std::vector<double> donor_values;        // observed Z per donor row

    std::size_t size() const { return anchors.rows; }
    double value(std::size_t anchor, std::size_t rank) const { return donor_values[neighbors[anchor * K + rank]]; }
    bool operator==(const DonorPools&) const = default;
};

inline double sigma_floor_for(std::span<const double> z) {
    std::vector<double> v(z.begin(), z.end());
    const double med = median(v);
    for (double& x : v) x = std::abs(x - med);
    const double mad = median(v);
    return 1e-6 * (mad > 0.0 ? mad : 1.0);
}

/// Builds variable-k pools. `expectations` holds the unscaled (u, Q_1..Q_p)
/// rows aligned with `scaled` and `z`.
inline DonorPools build_donor_pools(const Matrix& scaled, const Matrix& expectations, const ScalingParams& scaling,
                                    std::span<const double> z, std::span<const double> P, PoolOptions opt) {
    const std::size_t n = scaled.rows;
    if (expectations.rows != n || z.size() != n) throw ContractError("build_donor_pools: row mismatch");
    if (expectations.cols != P.size() + 1) throw ContractError("build_donor_pools: expectation width must be p + 1");
    if (n == 0) throw ContractError("build_donor_pools: no donor rows");
    if (opt.K > n) {
        log_event(LogLevel::info, "pool_k_clamped",
                  "requested=" + std::to_string(opt.K) + " donors=" + std::to_string(n));
        opt.K = n;
    }
    DonorPools pools;
    pools.K = opt.K;
    pools.donor_values.assign(z.begin(), z.end());
    Matrix anchor_expect;
    if (opt.reduction > 0 && opt.reduction < n) {
        KMeansResult km = kmeans_reduce(scaled, opt.reduction, opt.seed);
        pools.anchors = std::move(km.centers);
        anchor_expect = robust_unscale(scaling, pools.anchors);
    } else {
        pools.anchors = scaled;
        anchor_expect = expectations;
    }
    const double floor = sigma_floor_for(z);
    const KnnResult nn = knn_search(scaled, pools.anchors, opt.K, opt.mode, opt.threads);
    pools.neighbors = nn.index;
    pools.k_star.assign(pools.anchors.rows, 1);
    const std::size_t p = P.size();
    parallel_for(pools.anchors.rows, opt.threads, [&](std::size_t a) {
        std::vector<double> vals(opt.K);
        for (std::size_t i = 0; i < opt.K; ++i) vals[i] = z[nn.index[a * opt.K + i]];
        const double u = anchor_expect(a, 0);
        std::vector<double> Q(anchor_expect.row(a) + 1, anchor_expect.row(a) + 1 + p);
        std::sort(Q.begin(), Q.end());  // quantile models can cross
        pools.k_star[a] = static_cast<std::uint32_t>(optimal_k(vals, u, Q, P, floor));
    });
    return pools;
}

/// Index of the single nearest anchor for each query row.
inline std::vector<std::uint32_t> nearest_anchor(const DonorPools& pools, const Matrix& queries, int threads = 1,
                                                 KnnMode mode = KnnMode::exact) {
    const KnnResult nn = knn_search(pools.anchors, queries, 1, mode, threads);
    return nn.index;
}

/// Uniform draw from the anchor's k*-prefix.
inline double draw_from_pool(const DonorPools& pools, std::size_t anchor, StreamRng& rng) {
    return pools.value(anchor, rng.below(pools.k_star[anchor]));
}

// ============================================================================
// Binary serialization
// ============================================================================

namespace binio {

template <class T>
void put(std::ostream& out, const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ContractError("binary record truncated");
    return v;
}

template <class T>
void put_vec(std::ostream& out, const std::vector<T>& v) {
    put<std::uint64_t>(out, v.size());
    if (!v.empty()) out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
std::vector<T> get_vec(std::istream& in, std::uint64_t limit = (1ULL << 34)) {
    const auto n = get<std::uint64_t>(in);
    if (n > limit) throw ContractError("binary record length out of range");
    std::vector<T> v(n);
    if (n) in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in) throw ContractError("binary record truncated");
    return v;
}

inline void put_matrix(std::ostream& out, const Matrix& m) {
    put<std::uint64_t>(out, m.rows);
    put<std::uint64_t>(out, m.cols);
    put_vec(out, m.data);
}

inline Matrix get_matrix(std::istream& in) {
    Matrix m;
    m.rows = get<std::uint64_t>(in);
    m.cols = get<std::uint64_t>(in);
    m.data = get_vec<double>(in);
    if (m.data.size() != m.rows * m.cols) throw ContractError("matrix record shape mismatch");
    return m;
}

inline void put_magic(std::ostream& out, const char (&magic)[8]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[8]) {
    char buf[8];
    in.read(buf, 8);
    if (!in || std::memcmp(buf, magic, 8) != 0) throw ContractError("binary record has wrong type or version");
}

}  // namespace binio

inline constexpr char kScalingMagic[8] = {'S', 'F', 'S', 'C', 'A', 'L', '0', '1'};
inline constexpr char kPoolMagic[8] = {'S', 'F', 'P', 'O', 'O', 'L', '0', '1'};

inline void save_scaling(std::ostream& out, const ScalingParams& p) {
    binio::put_magic(out, kScalingMagic);
    binio::put(out, p.epsilon);
    binio::put_vec(out, p.median);
    binio::put_vec(out, p.mad);
    std::vector<std::uint8_t> dropped(p.dropped.begin(), p.dropped.end());
    binio::put_vec(out, dropped);
}

inline ScalingParams load_scaling(std::istream& in) {
    binio::expect_magic(in, kScalingMagic);
    ScalingParams p;
    p.epsilon = binio::get<double>(in);
    p.median = binio::get_vec<double>(in);
    p.mad = binio::get_vec<double>(in);
    const auto dropped = binio::get_vec<std::uint8_t>(in);
    p.dropped.assign(dropped.begin(), dropped.end());
    if (p.mad.size() != p.median.size() || p.dropped.size() != p.median.size())
        throw ContractError("scaling record inconsistent");
    return p;
}

inline void save_pools(std::ostream& out, const DonorPools& p) {
    binio::put_magic(out, kPoolMagic);
    binio::put_matrix(out, p.anchors);
    binio::put<std::uint64_t>(out, p.K);
    binio::put_vec(out, p.neighbors);
    binio::put_vec(out, p.k_star);
    binio::put_vec(out, p.donor_values);
}

inline DonorPools load_pools(std::istream& in) {
    binio::expect_magic(in, kPoolMagic);
    DonorPools p;
    p.anchors = binio::get_matrix(in);
    p.K = binio::get<std::uint64_t>(in);
    p.neighbors = binio::get_vec<std::uint32_t>(in);
    p.k_star = binio::get_vec<std::uint32_t>(in);
    p.donor_values = binio::get_vec<double>(in);
    if (p.neighbors.size() != p.anchors.rows * p.K || p.k_star.size() != p.anchors.rows)
        throw ContractError("pool record inconsistent");
    for (auto idx : p.neighbors)
        if (idx >= p.donor_values.size()) throw ContractError("pool record references missing donor");
    for (auto k : p.k_star)
        if (k < 1 || k > p.K) throw ContractError("pool record has k* out of range");
    return p;
}

}  // namespace statfuse::match

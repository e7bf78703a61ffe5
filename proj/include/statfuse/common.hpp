#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace statfuse {

inline constexpr const char* kVersion = "1.0.0";

// ============================================================================
// Errors
// ============================================================================

/// Base error. Contract errors map to CLI exit code 1, I/O errors to 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// ============================================================================
// Dense row-major matrix
// ============================================================================

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    const double* row(std::size_t r) const { return data.data() + r * cols; }
    double* row(std::size_t r) { return data.data() + r * cols; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
        return out;
    }

    bool operator==(const Matrix&) const = default;
};

// ============================================================================
// Hashing and counter-based random streams
// ============================================================================

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
}

/// FNV-1a over bytes; used for row-id keys and data fingerprints.
class Fnv1a {
public:
    void update(std::string_view bytes) {
        for (unsigned char c : bytes) {
            hash_ ^= c;
            hash_ *= 0x100000001B3ULL;
        }
    }
    void update(double v) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, sizeof(v));
        update(std::string_view(reinterpret_cast<const char*>(&bits), sizeof(bits)));
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.digest();
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Counter-based generator: the stream is a pure function of its key, so
/// results do not depend on chunking or thread scheduling.
class StreamRng {
public:
    StreamRng() = default;
    explicit StreamRng(std::uint64_t key) : state_(splitmix64(key)) {}
    StreamRng(std::uint64_t seed, std::uint64_t a, std::uint64_t b)
        : state_(hash_combine(hash_combine(splitmix64(seed), a), b)) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer on [0, n).
    std::size_t below(std::size_t n) {
        // Lemire's multiply-shift; bias is negligible for n << 2^64.
        return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    // UniformRandomBitGenerator interface for std::shuffle and friends.
    using result_type = std::uint64_t;
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() { return next(); }

private:
    std::uint64_t state_ = 0;
};

// ============================================================================
// Normal and Student-t helpers
// ============================================================================

/// Standard normal quantile function (inverse CDF).
inline double normal_quantile(double p) {
    static const boost::math::normal_distribution<double> standard;
    return boost::math::quantile(standard, p);
}

inline double normal_pdf(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double student_t_quantile(double p, double df) {
    boost::math::students_t_distribution<double> dist(df);
    return boost::math::quantile(dist, p);
}

// ============================================================================
// Weighted order statistics
// ============================================================================

/// Plain median; averages the two middle values for even n.
inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (n % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + mid);
    return lo + (hi - lo) / 2.0;
}

/// Linear-interpolated quantile (type 7) of an unweighted sample.
inline double quantile_type7(std::vector<double> v, double p) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Weighted quantile: smallest value whose cumulative weight reaches p of the
/// total; when the cumulative weight hits p exactly, the next value is averaged in.
inline double weighted_quantile(std::vector<std::pair<double, double>> value_weight, double p) {
    if (value_weight.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(value_weight.begin(), value_weight.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double total = 0.0;
    for (const auto& [v, w] : value_weight) total += w;
    const double target = p * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < value_weight.size(); ++i) {
        cum += value_weight[i].second;
        if (cum >= target) {
            const double rel = std::abs(cum - target);
            if (rel <= 1e-12 * total && i + 1 < value_weight.size())
                return 0.5 * (value_weight[i].first + value_weight[i + 1].first);
            return value_weight[i].first;
        }
    }
    return value_weight.back().first;
}

// ============================================================================
// Number formatting and parsing
// ============================================================================

/// Shortest decimal representation that parses back to the identical double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::string trim(std::string_view s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

/// Comma list with empty entries removed.
inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    for (auto& item : split(s, ',')) {
        if (!item.empty()) out.push_back(std::move(item));
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

// ============================================================================
// CSV
// ============================================================================

/// Splits one CSV record. Supports double-quoted fields with "" escapes.
inline std::vector<std::string> parse_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// ============================================================================
// Work distribution
// ============================================================================

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// thrown by any task is rethrown on the caller's thread.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (n == 0) return;
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto body = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(n);
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

// ============================================================================
// Logging: line-oriented key=value records on stderr
// ============================================================================

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

inline std::atomic<int>& log_level_storage() {
    static std::atomic<int> level{static_cast<int>(LogLevel::quiet)};
    return level;
}

inline void set_log_level(LogLevel level) { log_level_storage().store(static_cast<int>(level)); }

inline void log_event(LogLevel level, std::string_view event, std::string_view fields = {}) {
    if (static_cast<int>(level) > log_level_storage().load()) return;
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::fprintf(stderr, "level=%s event=%.*s%s%.*s\n", level == LogLevel::debug ? "debug" : "info",
                 static_cast<int>(event.size()), event.data(), fields.empty() ? "" : " ",
                 static_cast<int>(fields.size()), fields.data());
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace statfuse

// Acceptance harness: one PASS/FAIL line per criterion, tolerances fixed below.
// Usage: acceptance [--only 1,4,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <iomanip>
#include <numeric>
#include <thread>

#include "statfuse/analysis.hpp"
#include "statfuse/gbdt.hpp"
#include "statfuse/matchcore.hpp"
#include "statfuse/pipeline.hpp"
#include "statfuse/synthbench.hpp"
#include "statfuse/validation.hpp"

using namespace statfuse;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances
// ---------------------------------------------------------------------------

constexpr double kFormulaTol = 1e-9;
constexpr double kFormulaBudget = 1.0;          // seconds
constexpr int kKnnInstances = 200;
constexpr double kKnnBudget = 30.0;
constexpr int kGradPoints = 1000;
constexpr double kGradRel = 1e-6;
constexpr double kGradBudget = 10.0;
constexpr int kRecoveryRuns = 20;
constexpr std::size_t kDonorRows = 5000;
constexpr std::size_t kRecipientRows = 20000;
constexpr int kImplicates = 10;
constexpr double kMeanRelTol = 0.03;
constexpr double kShareTol = 0.02;
constexpr int kRunsRequired = 18;
constexpr double kRecoveryBudget = 600.0;
constexpr double kCoverageTarget = 0.85;
constexpr std::size_t kCoverageMinSubgroup = 200;
constexpr std::size_t kCoverageCells = 500;
constexpr double kCoverageBudget = 900.0;
constexpr double kValueAddedFloor = 0.8;
constexpr double kValueAddedMinN = 500;
constexpr double kApeRegionN = 1000;
constexpr double kMoeRatioFloor = 1.0;
constexpr double kInflationLo = 0.10;
constexpr double kInflationHi = 0.40;
constexpr double kReductionRel = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail, double secs) {
    std::ostringstream s;
    s << (pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << ": " << detail << " [" << std::fixed
      << std::setprecision(2) << secs << " s]";
    std::cout << s.str() << std::endl;
    if (!pass) ++g_failures;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s << std::setprecision(prec) << v;
    return s.str();
}

int hw_threads() { return std::max(1, static_cast<int>(std::thread::hardware_concurrency())); }

// Independent oracles
// ---------------------------------------------------------------------------

double bisect_normal_quantile(double p) {
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// 1. Formula unit suite
// ---------------------------------------------------------------------------

void criterion_formulas() {
    const auto t0 = Clock::now();
    std::vector<std::string> bad;

    std::mt19937_64 gen(1);
    std::normal_distribution<double> n01;
    Matrix m(501, 3);
    for (auto& v : m.data) v = 10 * n01(gen) + 3;
    const auto sp = match::robust_scale_fit(m);
    Matrix med(1, 3);
    med.data = sp.median;
    const Matrix sm = match::robust_scale_apply(sp, med);
    for (double v : sm.data)
        if (v != 0.5) bad.push_back("scaling median -> " + fmt(v, 17));

    const std::vector<double> P{0.166, 0.5, 0.833};
    const std::vector<double> Q{-1, 0, 1};
    const std::vector<double> at_u{-0.5, 0.25, 0.25};
    if (match::divergence(at_u, 0.0, Q, P, 1e-6).delta_u != 0.0) bad.push_back("delta_u(xbar=u) != 0");
    const double sigma = 2.0 / (bisect_normal_quantile(0.833) - bisect_normal_quantile(0.166));
    const std::vector<double> one{sigma};
    const double du = match::divergence(one, 0.0, Q, P, 1e-6).delta_u;
    if (std::abs(du - (1.0 - std::exp(-0.5))) > kFormulaTol) bad.push_back("one-sigma delta_u " + fmt(du, 17));

    // six values with mean 3.5 whose shares below 1.5, 3.5 and 4.5 are 1/6, 1/2 and 5/6
    const std::vector<double> perfect{1, 3, 3, 4, 4, 6};
    const std::vector<double> P6{1.0 / 6.0, 0.5, 5.0 / 6.0}, Q6{1.5, 3.5, 4.5};
    const double d0 = match::divergence(perfect, 3.5, Q6, P6, 1e-6).total;
    if (d0 != 0.0) bad.push_back("perfect agreement total " + fmt(d0, 17));

    if (validation::value_added(7.0, 7.0, 9.0) != 1.0) bad.push_back("V(y_o,y_o) != 1");
    if (validation::value_added(9.0, 7.0, 9.0) != 0.0) bad.push_back("V at naive != 0");

    const auto p = analysis::pool_rubin({{10, 1, ""}, {12, 1, ""}}, 0.9);
    if (std::abs(p.total - 4.0) > kFormulaTol) bad.push_back("Rubin T=" + fmt(p.total, 17));

    const double secs = seconds_since(t0);
    const bool ok = bad.empty() && secs < kFormulaBudget;
    report(1, "formula-suite", ok,
           bad.empty() ? "all 7 identities hold (tol " + fmt(kFormulaTol) + ")" : join(bad, "; "), secs);
}

// ---------------------------------------------------------------------------
// 2. kNN oracle equivalence
// ---------------------------------------------------------------------------

void criterion_knn() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(2024);
    std::size_t mismatches = 0, checked = 0;
    for (int inst = 0; inst < kKnnInstances; ++inst) {
        const std::size_t N = 2 + gen() % 1999;
        const std::size_t d = 1 + gen() % 8;
        const std::size_t nq = 50;
        const std::size_t K = 1 + gen() % std::min<std::size_t>(N, 20);
        std::uniform_real_distribution<double> u(0, 1);
        Matrix ref(N, d), q(nq, d);
        for (auto& v : ref.data) v = u(gen);
        for (auto& v : q.data) v = u(gen);
        const match::KnnResult r = match::knn_search(ref, q, K);
        for (std::size_t i = 0; i < nq; ++i) {
            std::vector<std::pair<double, std::uint32_t>> all(N);
            for (std::size_t a = 0; a < N; ++a) {
                double s = 0;
                for (std::size_t j = 0; j < d; ++j) s += (ref(a, j) - q(i, j)) * (ref(a, j) - q(i, j));
                all[a] = {s, static_cast<std::uint32_t>(a)};
            }
            std::partial_sort(all.begin(), all.begin() + static_cast<long>(K), all.end());
            for (std::size_t k = 0; k < K; ++k) {
                ++checked;
                if (r.neighbors(i)[k] != all[k].second) ++mismatches;
            }
        }
    }
    const double secs = seconds_since(t0);
    report(2, "knn-oracle", mismatches == 0 && secs < kKnnBudget,
           std::to_string(mismatches) + " mismatches over " + std::to_string(checked) + " neighbours in " +
               std::to_string(kKnnInstances) + " instances",
           secs);
}

// ---------------------------------------------------------------------------
// 3. Gradient checks
// ---------------------------------------------------------------------------

double eval_loss(const gbdt::Objective& obj, const std::vector<double>& raw, double y) {
    Matrix out(1, raw.size());
    gbdt::transform_raw(obj, raw, std::span<double>(out.row(0), out.cols));
    const std::vector<double> actual{y}, w{1.0};
    return gbdt::loss_eval(obj, out, actual, w);
}

void criterion_gradients() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(42);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const std::vector<gbdt::Objective> objectives{gbdt::Objective::squared_error(), gbdt::Objective::binary(),
                                                  gbdt::Objective::multiclass(3), gbdt::Objective::pinball(0.166),
                                                  gbdt::Objective::pinball(0.5), gbdt::Objective::pinball(0.833)};
    std::size_t fails = 0, checks = 0;
    double worst = 0;
    for (const auto& obj : objectives) {
        const int K = obj.outputs();
        for (int t = 0; t < kGradPoints; ++t) {
            std::vector<double> raw(static_cast<std::size_t>(K));
            for (auto& r : raw) r = u(gen);
            double y = u(gen);
            if (obj.kind == gbdt::ObjectiveKind::binary_logloss) y = t % 2;
            if (obj.kind == gbdt::ObjectiveKind::multiclass_logloss) y = t % K;
            if (obj.kind == gbdt::ObjectiveKind::pinball && std::abs(raw[0] - y) < 0.01) raw[0] += 0.05;
            std::vector<double> g(K), h(K);
            gbdt::point_gradient(obj, raw, y, g, h);
            for (int k = 0; k < K; ++k) {
                auto f = [&](double d) {
                    auto r = raw;
                    r[k] += d;
                    return eval_loss(obj, r, y);
                };
                const double eg = 1e-5, eh = 1e-3;
                const double gp = f(eg), gm = f(-eg), hp = f(eh), h0 = f(0), hm = f(-eh);
                const double fd_g = (gp - gm) / (2 * eg), fd_h = (hp - 2 * h0 + hm) / (eh * eh);
                constexpr double ulp = std::numeric_limits<double>::epsilon();
                // rounding floor of each difference quotient; only binds when the exact value is zero
                const double g_noise = 4 * ulp * (std::abs(gp) + std::abs(gm)) / (2 * eg);
                const double h_noise = 4 * ulp * (std::abs(hp) + 2 * std::abs(h0) + std::abs(hm)) / (eh * eh);
                for (auto [a, b, noise] : {std::tuple{g[k], fd_g, g_noise}, std::tuple{h[k], fd_h, h_noise}}) {
                    ++checks;
                    const double scale = std::max(std::abs(a), std::abs(b));
                    const double diff = std::abs(a - b);
                    if (scale > 0 && diff > noise) worst = std::max(worst, diff / scale);
                    if (!(diff <= kGradRel * scale || diff <= noise)) ++fails;
                }
            }
        }
    }
    const double secs = seconds_since(t0);
    report(3, "gradient-check", fails == 0 && secs < kGradBudget,
           std::to_string(fails) + "/" + std::to_string(checks) + " checks outside " + fmt(kGradRel) +
               " relative; worst " + fmt(worst, 3),
           secs);
}

// ---------------------------------------------------------------------------
// 4, 5, 7, 8, 9. End-to-end synthetic recovery
// ---------------------------------------------------------------------------

std::string recovery_config(std::uint64_t seed) {
    return "[population]\ndonor = " + std::to_string(kDonorRows) + "\nrecipient = " + std::to_string(kRecipientRows) +
           "\nseed = " + std::to_string(seed) + R"(
weights = gamma
weight_shape = 4
replicates = 10
replicate_scale = 0.3

[predictor:x1]
kind = continuous

[predictor:x2]
kind = continuous
coef.x1 = 0.5

[predictor:region]
kind = categorical
levels = north,south,east,west
probs = 0.3,0.3,0.2,0.2

[response:y]
link = linear
intercept = 10
coef.x1 = 2
coef.x2 = -1
coef.region:south = 1.5
noise = 1

[response:tenure]
link = multiclass
levels = own,rent,other
class.rent.intercept = -0.2
class.rent.coef.x1 = 1.2
class.other.intercept = -1
class.other.coef.region:west = 1

[response:spend]
link = zero_inflated
zero_rate = 0.6
zero.coef.x2 = 0.8
intercept = 3
coef.x1 = 0.5
noise = 0.5
)";
}

const char* kRecoverySpec = "[fusion]\nsteps = y, tenure, spend\n";
const char* kBlockSpec = "[fusion]\nsteps = y + tenure\n";

struct RunResult {
    std::uint64_t seed = 0;
    bool means_ok = false, zero_ok = false, shares_ok = false;
    double worst_mean_rel = 0, zero_err = 0, worst_share_err = 0;
    synth::RecoveryReport recovery;
    std::size_t closure_violations = 0, closure_checked = 0;
    std::size_t block_violations = 0, block_checked = 0;
    std::size_t moe_decreases = 0;
    std::vector<double> inflation;
    double seconds = 0;
};

struct RecoveryState {
    std::vector<RunResult> runs;
    double seconds = 0;
    // first run kept for the determinism criterion
    std::optional<synth::SynthSample> sample;
    std::optional<FusionBundle> bundle;
};

FuseOptions fuse_options(std::size_t chunk_rows, std::uint64_t seed) {
    FuseOptions o;
    o.implicates = kImplicates;
    o.seed = seed;
    o.chunk_rows = chunk_rows;
    o.threads = hw_threads();
    return o;
}

void check_closure(const ImplicateSet& set, const Microdata& donor, RunResult& r) {
    for (std::size_t j = 0; j < set.variables.size(); ++j) {
        const ColumnSpec& spec = set.variables[j];
        const Column& dc = donor.column(spec.name);
        std::set<double> support;
        if (!spec.is_categorical()) support.insert(dc.values.begin(), dc.values.end());
        if (spec.kind == ColumnKind::semicontinuous) support.insert(0.0);
        for (const auto& m : set.implicates)
            for (std::size_t i = 0; i < m.rows; ++i) {
                ++r.closure_checked;
                const double v = m(i, j);
                const bool ok = spec.is_categorical()
                                    ? (v >= 0 && v < static_cast<double>(spec.levels.size()) && v == std::floor(v))
                                    : support.count(v) > 0;
                if (!ok) ++r.closure_violations;
            }
    }
}

void check_block(const FusionBundle& block, const synth::SynthSample& s, RunResult& r) {
    std::set<std::pair<double, int>> records;
    const Column& y = s.donor.column("y");
    const Column& t = s.donor.column("tenure");
    for (std::size_t i = 0; i < s.donor.rows(); ++i) records.insert({y.values[i], t.codes[i]});
    const ImplicateSet set = fuse(block, s.recipient, fuse_options(50000, 7));
    const std::size_t jy = set.variable_index("y"), jt = set.variable_index("tenure");
    for (const auto& m : set.implicates)
        for (std::size_t i = 0; i < m.rows; ++i) {
            ++r.block_checked;
            if (!records.count({m(i, jy), static_cast<int>(m(i, jt))})) ++r.block_violations;
        }
}

void check_replicates(const ImplicateSet& set, const Microdata& recipient, RunResult& r) {
    struct Req {
        analysis::Statistic stat;
        std::string var;
    };
    for (const Req& q : {Req{analysis::Statistic::mean, "y"}, Req{analysis::Statistic::mean, "spend"},
                         Req{analysis::Statistic::proportion, "tenure"}}) {
        for (const std::vector<std::string>& by : {std::vector<std::string>{}, std::vector<std::string>{"region"}}) {
            analysis::AnalysisRequest req;
            req.statistic = q.stat;
            req.variable = q.var;
            req.by = by;
            const auto base = analysis::estimate(set, recipient, req);
            req.use_replicate_weights = true;
            const auto with = analysis::estimate(set, recipient, req);
            for (std::size_t i = 0; i < base.size(); ++i) {
                if (base[i].suppressed || with[i].suppressed) continue;
                if (with[i].moe < base[i].moe) ++r.moe_decreases;
                r.inflation.push_back(with[i].moe / base[i].moe - 1.0);
            }
        }
    }
}

RunResult recovery_run(std::uint64_t seed, RecoveryState& state) {
    const auto t0 = Clock::now();
    RunResult r;
    r.seed = seed;
    synth::SynthSample s = synth::generate_population(synth::parse_config(recovery_config(seed)));
    FusionSpec spec = parse_fusion_spec(kRecoverySpec);
    spec.seed = seed;
    const FusionBundle bundle = train_fusion(s.donor, spec, TrainOptions{hw_threads()});
    const ImplicateSet set = fuse(bundle, s.recipient, fuse_options(50000, seed));

    synth::RecoveryOptions ro;
    ro.by = {"region"};
    ro.min_subgroup = kCoverageMinSubgroup;
    r.recovery = synth::score_recovery(set, s.recipient, s.recipient_truth, ro);
    r.means_ok = r.zero_ok = r.shares_ok = true;
    for (const auto& row : r.recovery.rows) {
        if (!row.subgroup.empty()) continue;
        if (row.measure == "mean") {
            const double rel = row.abs_error / std::abs(row.truth);
            r.worst_mean_rel = std::max(r.worst_mean_rel, rel);
            r.means_ok = r.means_ok && rel <= kMeanRelTol;
        } else if (row.measure == "zero_share") {
            r.zero_err = row.abs_error;
            r.zero_ok = row.abs_error <= kShareTol;
        } else {
            r.worst_share_err = std::max(r.worst_share_err, row.abs_error);
            r.shares_ok = r.shares_ok && row.abs_error <= kShareTol;
        }
    }
    check_closure(set, s.donor, r);
    check_replicates(set, s.recipient, r);
    r.seconds = seconds_since(t0);

    // block support check; trained outside the timed recovery budget
    FusionSpec bspec = parse_fusion_spec(kBlockSpec);
    bspec.seed = seed;
    check_block(train_fusion(s.donor, bspec, TrainOptions{hw_threads()}), s, r);

    if (!state.bundle) {
        state.bundle = bundle;
        state.sample = std::move(s);
    }
    return r;
}

RecoveryState& recovery_state() {
    static RecoveryState state = [] {
        RecoveryState st;
        for (int i = 0; i < kRecoveryRuns; ++i) {
            st.runs.push_back(recovery_run(1000 + static_cast<std::uint64_t>(i), st));
            st.seconds += st.runs.back().seconds;
            const auto& r = st.runs.back();
            std::cout << "  run seed=" << r.seed << " mean_rel=" << fmt(r.worst_mean_rel, 3)
                      << " zero_err=" << fmt(r.zero_err, 3) << " share_err=" << fmt(r.worst_share_err, 3)
                      << " coverage=" << r.recovery.covered_cells << "/" << r.recovery.coverage_cells << " "
                      << fmt(r.seconds, 3) << " s" << std::endl;
        }
        return st;
    }();
    return state;
}

void criterion_recovery() {
    const RecoveryState& st = recovery_state();
    int means = 0, zeros = 0, shares = 0;
    for (const auto& r : st.runs) {
        means += r.means_ok;
        zeros += r.zero_ok;
        shares += r.shares_ok;
    }
    const bool ok = means >= kRunsRequired && zeros >= kRunsRequired && shares >= kRunsRequired &&
                    st.seconds < kRecoveryBudget;
    report(4, "synthetic-recovery", ok,
           "means within " + fmt(100 * kMeanRelTol) + "% in " + std::to_string(means) + "/20, zero share within " +
               fmt(100 * kShareTol) + " pts in " + std::to_string(zeros) + "/20, level shares in " +
               std::to_string(shares) + "/20 (need " + std::to_string(kRunsRequired) + "); " +
               std::to_string(hw_threads()) + " hardware threads, budget " + fmt(kRecoveryBudget) + " s",
           st.seconds);
}

void criterion_coverage() {
    const RecoveryState& st = recovery_state();
    std::size_t covered = 0, cells = 0;
    for (const auto& r : st.runs) {
        covered += r.recovery.covered_cells;
        cells += r.recovery.coverage_cells;
    }
    const double cov = cells ? static_cast<double>(covered) / static_cast<double>(cells) : 0.0;
    const bool ok = cells >= kCoverageCells && cov >= kCoverageTarget && st.seconds < kCoverageBudget;
    report(5, "coverage", ok,
           "90% MOE covered truth in " + std::to_string(covered) + "/" + std::to_string(cells) + " = " +
               fmt(100 * cov, 4) + "% of subgroup estimates with n >= " + std::to_string(kCoverageMinSubgroup) +
               " (need >= " + fmt(100 * kCoverageTarget) + "% over >= " + std::to_string(kCoverageCells) + ")",
           st.seconds);
}

void criterion_closure() {
    const auto t0 = Clock::now();
    const RecoveryState& st = recovery_state();
    std::size_t v = 0, n = 0, bv = 0, bn = 0;
    for (const auto& r : st.runs) {
        v += r.closure_violations;
        n += r.closure_checked;
        bv += r.block_violations;
        bn += r.block_checked;
    }
    report(7, "support-closure", v == 0 && bv == 0 && n > 0 && bn > 0,
           std::to_string(v) + " of " + std::to_string(n) + " fused cells outside donor support or levels; " +
               std::to_string(bv) + " of " + std::to_string(bn) + " block records absent from donor",
           seconds_since(t0));
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path write_implicates(const FusionBundle& b, const Microdata& rec, std::size_t chunk, const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("statfuse_acceptance_" + tag);
    fs::remove_all(dir);
    const FuseOptions opt = fuse_options(chunk, 99);
    ImplicateWriter w(dir.string(), ImplicateFormat::per_implicate, b.fusion_specs(), kImplicates);
    const auto ids = rec.row_ids();
    fuse_stream(b, rec, opt, [&](std::size_t lo, const std::vector<Matrix>& c) { w.write_chunk(ids, lo, c); });
    w.finish();
    return dir;
}

void criterion_determinism() {
    const RecoveryState& st = recovery_state();
    const auto t0 = Clock::now();
    const Microdata& rec = st.sample->recipient;
    const fs::path a = write_implicates(*st.bundle, rec, 1000, "a");
    const fs::path b = write_implicates(*st.bundle, rec, 1000, "b");
    const fs::path c = write_implicates(*st.bundle, rec, rec.rows(), "c");
    int same_seed = 0, chunks = 0;
    for (int m = 0; m < kImplicates; ++m) {
        const std::string f = detail::implicate_file_name(static_cast<std::size_t>(m));
        const std::string fa = file_bytes(a / f);
        same_seed += !fa.empty() && fa == file_bytes(b / f);
        chunks += !fa.empty() && fa == file_bytes(c / f);
    }
    report(8, "determinism", same_seed == kImplicates && chunks == kImplicates,
           "repeat run identical in " + std::to_string(same_seed) + "/" + std::to_string(kImplicates) +
               " implicate files; chunk_rows 1000 vs " + std::to_string(rec.rows()) + " identical in " +
               std::to_string(chunks) + "/" + std::to_string(kImplicates),
           seconds_since(t0));
}

void criterion_replicates() {
    const RecoveryState& st = recovery_state();
    std::size_t decreases = 0;
    std::vector<double> infl;
    for (const auto& r : st.runs) {
        decreases += r.moe_decreases;
        infl.insert(infl.end(), r.inflation.begin(), r.inflation.end());
    }
    const double med = median(infl);
    const bool ok = decreases == 0 && !infl.empty() && med >= kInflationLo && med <= kInflationHi;
    report(9, "replicate-weights", ok,
           std::to_string(decreases) + " of " + std::to_string(infl.size()) +
               " MOEs decreased; median inflation " + fmt(100 * med, 3) + "% (band " + fmt(100 * kInflationLo) +
               "-" + fmt(100 * kInflationHi) + "%), range " +
               fmt(100 * *std::min_element(infl.begin(), infl.end()), 3) + "-" +
               fmt(100 * *std::max_element(infl.begin(), infl.end()), 3) + "%",
           0.0);
}

// ---------------------------------------------------------------------------
// 6. Validation-curve shape
// ---------------------------------------------------------------------------

const char* kValidationConfig = R"(
[population]
donor = 5000
recipient = 2
seed = 77
weights = gamma
weight_shape = 4

[predictor:race]
kind = categorical
levels = r1,r2,r3,r4,r5
probs = 0.4,0.2,0.2,0.1,0.1

[predictor:education]
kind = categorical
levels = e1,e2,e3,e4
probs = 0.3,0.3,0.25,0.15

[predictor:region]
kind = categorical
levels = north,south,east,west
probs = 0.3,0.3,0.2,0.2

[predictor:agegroup]
kind = categorical
levels = a1,a2,a3,a4,a5
probs = 0.2,0.2,0.2,0.2,0.2

[predictor:x]
kind = continuous

[response:y]
link = linear
intercept = 50
coef.race:r2 = 4
coef.race:r3 = 8
coef.race:r4 = -4
coef.race:r5 = 12
coef.education:e2 = 3
coef.education:e3 = 6
coef.education:e4 = 10
coef.region:south = -5
coef.region:east = 4
coef.region:west = 7
coef.agegroup:a2 = 2
coef.agegroup:a3 = 5
coef.agegroup:a4 = 7
coef.agegroup:a5 = -3
coef.x = 3
noise = 2
)";

// Spearman rank correlation, average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
            for (std::size_t k = i; k < j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j - 1);
            i = j;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double ma = mean_of(ra), mb = mean_of(rb);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

void criterion_validation_curve() {
    const auto t0 = Clock::now();
    const synth::SynthSample s = synth::generate_population(synth::parse_config(kValidationConfig));
    const FusionBundle bundle =
        train_fusion(s.donor, parse_fusion_spec("[fusion]\nsteps = y\nseed = 5\n"), TrainOptions{hw_threads()});
    validation::ValidationOptions opt;
    opt.implicates = kImplicates;
    opt.seed = 5;
    opt.threads = hw_threads();
    const auto result = validation::internal_validate(bundle, s.donor, {"race", "education", "region", "agegroup"}, opt);
    const auto curves = validation::build_curves(result.cells);
    const fs::path out = fs::temp_directory_path() / "statfuse_acceptance_validation";
    fs::remove_all(out);
    validation::emit_report(result.cells, curves, out.string());

    const auto& va = curves[1].smoothed;
    double va_min = std::numeric_limits<double>::infinity();
    std::size_t va_points = 0;
    for (const auto& p : va)
        if (p.n >= kValueAddedMinN) {
            va_min = std::min(va_min, p.value);
            ++va_points;
        }

    // below 1000 rows the smoothed error must not fall as subsets shrink:
    // negative rank correlation with n, and the smaller half at or above the larger half
    std::vector<double> ns, ape;
    for (const auto& p : curves[0].smoothed)
        if (p.n < kApeRegionN) {
            ns.push_back(p.n);
            ape.push_back(p.value);
        }
    const double rho = ns.size() >= 5 ? spearman(ns, ape) : std::nan("");
    const std::size_t half = ape.size() / 2;
    const double small_half = median(std::vector<double>(ape.begin(), ape.begin() + static_cast<long>(half)));
    const double large_half = median(std::vector<double>(ape.begin() + static_cast<long>(half), ape.end()));

    std::vector<double> ratios;
    for (const auto& p : curves[2].points) ratios.push_back(p.value);
    const double ratio_med = median(ratios);

    const bool ok = va_points > 0 && va_min > kValueAddedFloor && rho <= 0.0 && small_half >= large_half &&
                    ratio_med >= kMoeRatioFloor;
    report(6, "validation-curve", ok,
           std::to_string(result.cells.size()) + " cells; smoothed value-added min " + fmt(va_min, 3) +
               " over n >= 500 (need > 0.8); abs-pct-error below n=1000: spearman(n, err) " + fmt(rho, 3) +
               ", smaller-half median " + fmt(small_half, 3) + " vs larger-half " + fmt(large_half, 3) +
               "; median moe_ratio " + fmt(ratio_med, 3) + " (need >= 1)",
           seconds_since(t0));
}

// ---------------------------------------------------------------------------
// 10. Equal-weight reductions
// ---------------------------------------------------------------------------

void criterion_reductions() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(10);
    std::normal_distribution<double> n01;
    double worst_mean = 0, worst_prop = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + gen() % 5000;
        const double wconst = 0.5 + static_cast<double>(gen() % 100);
        std::vector<double> y(n), ind(n), w(n, wconst);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = 3 + 2 * n01(gen);
            ind[i] = (i == 0) ? 1.0 : (i == 1 ? 0.0 : static_cast<double>(gen() % 3 == 0));
        }
        const double ybar = mean_of(y);
        double ss = 0;
        for (double v : y) ss += (v - ybar) * (v - ybar);
        const double s_over_rootn = std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
        const double p = mean_of(ind);
        const double prop_se = std::sqrt(p * (1 - p) / static_cast<double>(n));
        worst_mean = std::max(worst_mean, std::abs(analysis::weighted_mean_se(y, w).se - s_over_rootn) / s_over_rootn);
        worst_prop = std::max(worst_prop, std::abs(analysis::proportion_se(ind, w).se - prop_se) / prop_se);
    }
    report(10, "equal-weight-reductions", worst_mean <= kReductionRel && worst_prop <= kReductionRel,
           "worst relative gap: mean SE " + fmt(worst_mean, 3) + ", proportion SE " + fmt(worst_prop, 3) +
               " (tol 1e-12)",
           seconds_since(t0));
}

}  // namespace

int main(int argc, char** argv) {
    set_log_level(LogLevel::quiet);
    std::set<int> only;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--only")
            for (const auto& t : split_list(argv[i + 1])) only.insert(std::stoi(t));
    auto want = [&](int id) { return only.empty() || only.count(id); };
    try {
        if (want(1)) criterion_formulas();
        if (want(2)) criterion_knn();
        if (want(3)) criterion_gradients();
        if (want(4)) criterion_recovery();
        if (want(5)) criterion_coverage();
        if (want(6)) criterion_validation_curve();
        if (want(7)) criterion_closure();
        if (want(8)) criterion_determinism();
        if (want(9)) criterion_replicates();
        if (want(10)) criterion_reductions();
    } catch (const std::exception& e) {
        std::cout << "FAIL harness error: " << e.what() << std::endl;
        return 1;
    }
    return g_failures == 0 ? 0 : 1;
}

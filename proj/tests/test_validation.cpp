#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <filesystem>
#include <random>

#include "statfuse/synthbench.hpp"
#include "statfuse/validation.hpp"

using namespace statfuse;
using namespace statfuse::validation;
namespace fs = std::filesystem;

namespace {

const char* kPopulation = R"(
[population]
donor = 1200
recipient = 2
seed = 9

[predictor:race]
kind = categorical
levels = a,b,c
probs = 0.5,0.3,0.2

[predictor:education]
kind = categorical
levels = hs,college
probs = 0.6,0.4

[predictor:x]
kind = continuous

[response:y]
link = linear
intercept = 5
coef.x = 1
coef.race:b = 2
coef.education:college = -1
noise = 0.5

[response:spend]
link = zero_inflated
zero_rate = 0.4
intercept = 2
coef.x = 0.3
noise = 0.4
)";

std::vector<SmoothedPoint> pts(const std::vector<std::pair<double, double>>& v) {
    std::vector<SmoothedPoint> out;
    for (const auto& [n, x] : v) out.push_back({n, x});
    return out;
}

struct Fixture {
    synth::SynthSample sample;
    FusionBundle bundle;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x{synth::generate_population(synth::parse_config(kPopulation)), {}};
        x.bundle = train_fusion(x.sample.donor,
                                parse_fusion_spec("[fusion]\nsteps = y, spend\nK = 100\nseed = 2\n"
                                                  "[training]\nleaf_grid = 16\nfolds = 3\nmax_iterations = 60\n"));
        return x;
    }();
    return f;
}

ValidationOptions quick(int M = 4) {
    ValidationOptions o;
    o.implicates = M;
    o.seed = 5;
    return o;
}

}  // namespace

TEST(ValueAdded, DefinitionCases) {
    EXPECT_DOUBLE_EQ(value_added(10, 10, 12), 1.0);   // perfect simulation
    EXPECT_DOUBLE_EQ(value_added(12, 10, 12), 0.0);   // no better than the grand mean
    EXPECT_DOUBLE_EQ(value_added(11, 10, 12), 0.5);
    EXPECT_DOUBLE_EQ(value_added(20, 10, 12), 0.0);   // worse is clamped
    EXPECT_DOUBLE_EQ(value_added(5, 5, 5), 1.0);
    EXPECT_DOUBLE_EQ(value_added(6, 5, 5), 0.0);
    EXPECT_TRUE(std::isnan(abs_pct_error(1.0, 0.0)));
    EXPECT_DOUBLE_EQ(abs_pct_error(11.0, 10.0), 0.1);
}

TEST(MedianSmooth, ConstantOutlierMonotone) {
    std::vector<std::pair<double, double>> flat;
    for (int i = 0; i < 50; ++i) flat.push_back({double(i), 3.0});
    for (const auto& p : median_smooth(pts(flat))) EXPECT_EQ(p.value, 3.0);

    auto spike = flat;
    spike[25].second = 1e6;
    for (const auto& p : median_smooth(pts(spike))) EXPECT_EQ(p.value, 3.0);

    std::vector<std::pair<double, double>> up;
    for (int i = 0; i < 60; ++i) up.push_back({double(i), std::sqrt(double(i))});
    const auto s = median_smooth(pts(up));
    ASSERT_EQ(s.size(), 60u);
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_GE(s[i].value, s[i - 1].value);

    EXPECT_THROW(median_smooth(pts({{1, 1}, {2, 2}, {3, 3}, {4, 4}})), ContractError);
}

TEST(MedianSmooth, RandomMonotoneSequencesStayMonotone) {
    std::mt19937_64 gen(8);
    std::exponential_distribution<double> step(1.0);
    std::uniform_int_distribution<int> len(5, 300);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::pair<double, double>> v;
        double level = 0;
        const int n = len(gen);
        for (int i = 0; i < n; ++i) v.push_back({double(i), level += (gen() % 3 ? step(gen) : 0.0)});
        const auto s = median_smooth(pts(v));
        for (std::size_t i = 1; i < s.size(); ++i) ASSERT_GE(s[i].value, s[i - 1].value) << "trial " << trial;
    }
}

TEST(MedianSmooth, TiedSizesShareOnePoint) {
    const auto s = median_smooth(pts({{5, 1}, {5, 2}, {5, 3}, {7, 4}, {9, 5}, {9, 6}}));
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s[0].n, 5.0);
    EXPECT_EQ(s[2].n, 9.0);
}

TEST(InternalValidate, EnumeratesEverySubsetCombination) {
    const Fixture& f = fixture();
    const ValidationResult r = internal_validate(f.bundle, f.sample.donor, {"race", "education"}, quick());
    // full sample + 3 race + 2 education + 6 joint
    EXPECT_EQ(r.subsets, 12u);
    EXPECT_EQ(r.skipped_small, 0u);
    EXPECT_EQ(r.cells.size(), 12u * 3u);  // y mean, spend mean, spend zero share
    std::size_t full = 0, joint = 0;
    for (const auto& c : r.cells) {
        full += c.subset.empty();
        joint += c.subset.find(';') != std::string::npos;
        EXPECT_GT(c.observed_moe, 0.0);
        EXPECT_GT(c.simulated_moe, 0.0);
    }
    EXPECT_EQ(full, 3u);
    EXPECT_EQ(joint, 18u);
    // observed full-sample value is the weighted donor mean
    const auto& y = f.sample.donor.column("y").values;
    const auto& w = f.sample.donor.weights();
    double sw = 0, swy = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        sw += w[i];
        swy += w[i] * y[i];
    }
    for (const auto& c : r.cells)
        if (c.subset.empty() && c.variable == "y" && c.measure == "mean") {
            EXPECT_NEAR(c.observed, swy / sw, 1e-9);
        }
}

TEST(InternalValidate, StrongSignalFullSampleIsClose) {
    const Fixture& f = fixture();
    const ValidationResult r = internal_validate(f.bundle, f.sample.donor, {"race"}, quick());
    const auto it = std::find_if(r.cells.begin(), r.cells.end(), [](const ValidationCell& c) {
        return c.subset.empty() && c.variable == "y" && c.measure == "mean";
    });
    ASSERT_NE(it, r.cells.end());
    EXPECT_LT(std::abs(it->simulated - it->observed) / std::abs(it->observed), 0.02);
}

TEST(InternalValidate, ContinuousSubsetUsesQuintiles) {
    const Fixture& f = fixture();
    const ValidationResult r = internal_validate(f.bundle, f.sample.donor, {"x"}, quick(2));
    EXPECT_EQ(r.subsets, 6u);
    std::set<std::string> labels;
    for (const auto& c : r.cells) labels.insert(c.subset);
    EXPECT_TRUE(labels.count("x=Q1"));
    EXPECT_TRUE(labels.count("x=Q5"));
}

TEST(InternalValidate, RejectsBadSubsetVariables) {
    const Fixture& f = fixture();
    EXPECT_THROW(internal_validate(f.bundle, f.sample.donor, {"y"}, quick()), ContractError);
    ValidationOptions tight = quick();
    tight.max_subsets = 5;
    EXPECT_THROW(internal_validate(f.bundle, f.sample.donor, {"race", "education"}, tight), ContractError);
}

TEST(Curves, MetricDefinitions) {
    ValidationCell full{"y", "mean", "", 100, 10, 11, 1, 2, 10};
    ValidationCell sub{"y", "mean", "g=a", 30, 8, 9, 0, 1, 10};
    EXPECT_TRUE(std::isnan(metric_value(Metric::value_added, full)));
    EXPECT_DOUBLE_EQ(metric_value(Metric::value_added, sub), 0.5);
    EXPECT_DOUBLE_EQ(metric_value(Metric::abs_pct_error, sub), 0.125);
    EXPECT_DOUBLE_EQ(metric_value(Metric::moe_ratio, full), 2.0);
    EXPECT_TRUE(std::isnan(metric_value(Metric::moe_ratio, sub)));
    const std::vector<ValidationCell> cells{full, sub};
    const auto curve = build_curve(Metric::value_added, cells);
    EXPECT_EQ(curve.excluded, 1u);
    EXPECT_EQ(curve.points.size(), 1u);
    EXPECT_TRUE(curve.smoothed.empty());
}

TEST(Report, WritesTablesAndWellFormedSvg) {
    const Fixture& f = fixture();
    const ValidationResult r = internal_validate(f.bundle, f.sample.donor, {"race", "education"}, quick());
    const auto curves = build_curves(r.cells);
    const fs::path dir = fs::temp_directory_path() / "statfuse_validation_report";
    fs::remove_all(dir);
    const auto files = emit_report(r.cells, curves, dir.string());
    EXPECT_EQ(files.size(), 7u);
    for (const char* m : {"abs_pct_error", "value_added", "moe_ratio"}) {
        EXPECT_TRUE(fs::exists(dir / (std::string(m) + ".csv")));
        const fs::path svg = dir / (std::string(m) + ".svg");
        ASSERT_TRUE(fs::exists(svg));
        boost::property_tree::ptree tree;
        EXPECT_NO_THROW(boost::property_tree::read_xml(svg.string(), tree)) << m;
        EXPECT_TRUE(tree.get_child_optional("svg").has_value());
    }
    EXPECT_THROW(emit_report({}, curves, dir.string()), ContractError);
    const fs::path blocker = dir / "file";
    std::ofstream(blocker) << "x";
    EXPECT_THROW(emit_report(r.cells, curves, (blocker / "sub").string()), IoError);
}

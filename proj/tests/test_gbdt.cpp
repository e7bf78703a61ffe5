#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "statfuse/gbdt.hpp"

using namespace statfuse;
using namespace statfuse::gbdt;

namespace {

FeatureFrame frame_of(std::vector<std::vector<double>> numeric, std::vector<std::string> names = {}) {
    FeatureFrame f;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
        FeatureColumn c;
        c.name = j < names.size() ? names[j] : "x" + std::to_string(j + 1);
        c.values = std::move(numeric[j]);
        f.columns.push_back(std::move(c));
    }
    return f;
}

TrainParams quick_params(std::uint64_t seed = 1) {
    TrainParams p;
    p.seed = seed;
    p.max_iterations = 200;
    return p;
}

// Loss through the public output-space evaluator, for finite differences.
double eval_loss(const Objective& obj, const std::vector<double>& raw, double y) {
    Matrix out(1, raw.size());
    transform_raw(obj, raw, std::span<double>(out.row(0), out.cols));
    const std::vector<double> actual{y}, w{1.0};
    return loss_eval(obj, out, actual, w);
}

// Relative closeness; `noise` is the floating-point rounding bound of the
// difference quotient, which only matters when the exact value is zero.
bool rel_close(double a, double b, double rel, double noise) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) || std::abs(a - b) <= noise;
}

}  // namespace

TEST(Objective, Validation) {
    EXPECT_THROW(Objective::multiclass(1).validate(), ContractError);
    EXPECT_THROW(Objective::pinball(0.0).validate(), ContractError);
    EXPECT_THROW(Objective::pinball(1.0).validate(), ContractError);
    EXPECT_NO_THROW(Objective::pinball(0.166).validate());
    EXPECT_EQ(Objective::multiclass(4).outputs(), 4);
}

TEST(LossEval, Identities) {
    const std::vector<double> y{1.0, -2.0, 3.5, 0.0}, w{1, 2, 1, 3};
    Matrix perfect(4, 1);
    for (std::size_t i = 0; i < 4; ++i) perfect(i, 0) = y[i];
    EXPECT_EQ(loss_eval(Objective::squared_error(), perfect, y, w), 0.0);
    EXPECT_EQ(loss_eval(Objective::pinball(0.3), perfect, y, w), 0.0);

    Matrix pred(4, 1);
    double mae = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        pred(i, 0) = 0.7 * i - 1.0;
        mae += w[i] * std::abs(y[i] - pred(i, 0));
        wsum += w[i];
    }
    EXPECT_NEAR(loss_eval(Objective::pinball(0.5), pred, y, w), 0.5 * mae / wsum, 1e-15);

    const std::vector<double> labels{0, 1, 1, 0};
    Matrix half(4, 1);
    for (std::size_t i = 0; i < 4; ++i) half(i, 0) = 0.5;
    EXPECT_NEAR(loss_eval(Objective::binary(), half, labels, w), std::log(2.0), 1e-15);
}

TEST(Gradients, MatchCentralFiniteDifferences) {
    std::mt19937_64 gen(42);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const std::vector<Objective> objectives{Objective::squared_error(), Objective::binary(), Objective::multiclass(4),
                                            Objective::pinball(0.166), Objective::pinball(0.833)};
    for (const auto& obj : objectives) {
        const int K = obj.outputs();
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> raw(static_cast<std::size_t>(K));
            for (auto& r : raw) r = u(gen);
            double y = u(gen);
            if (obj.kind == ObjectiveKind::binary_logloss) y = trial % 2;
            if (obj.kind == ObjectiveKind::multiclass_logloss) y = trial % K;
            // keep away from the pinball kink
            if (obj.kind == ObjectiveKind::pinball && std::abs(raw[0] - y) < 0.01) raw[0] += 0.05;
            std::vector<double> g(K), h(K);
            point_gradient(obj, raw, y, g, h);
            for (int k = 0; k < K; ++k) {
                auto shifted = [&](double d) {
                    auto r = raw;
                    r[k] += d;
                    return eval_loss(obj, r, y);
                };
                const double eg = 1e-5, eh = 1e-3;
                const double gp = shifted(eg), gm = shifted(-eg);
                const double hp = shifted(eh), h0 = shifted(0), hm = shifted(-eh);
                const double fd_g = (gp - gm) / (2 * eg);
                const double fd_h = (hp - 2 * h0 + hm) / (eh * eh);
                constexpr double ulp = std::numeric_limits<double>::epsilon();
                const double g_noise = 4 * ulp * (std::abs(gp) + std::abs(gm)) / (2 * eg);
                const double h_noise = 4 * ulp * (std::abs(hp) + 2 * std::abs(h0) + std::abs(hm)) / (eh * eh);
                ASSERT_TRUE(rel_close(g[k], fd_g, 1e-6, g_noise)) << obj.name() << " grad " << g[k] << " vs " << fd_g;
                ASSERT_TRUE(rel_close(h[k], fd_h, 1e-6, h_noise)) << obj.name() << " hess " << h[k] << " vs " << fd_h;
            }
        }
    }
}

TEST(FitGbm, ConstantTargetIsDegenerate) {
    std::vector<double> x(100), y(100, 4.25), w(100, 1.0);
    std::iota(x.begin(), x.end(), 0.0);
    const auto f = frame_of({x});
    const TreeEnsemble m = fit_gbm(f, y, w, Objective::squared_error(), quick_params());
    EXPECT_TRUE(m.degenerate);
    EXPECT_EQ(m.n_iterations, 0);
    const Matrix p = predict(m, f);
    for (std::size_t r = 0; r < p.rows; ++r) EXPECT_EQ(p(r, 0), 4.25);
    EXPECT_EQ(training_loss_curve(m, f, y, w).back(), 0.0);
}

TEST(FitGbm, StepFunctionHeldOutAccuracy) {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> x(1000), y(1000), w(1000, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] = u(gen)) > 0 ? 1.0 : 0.0;
    const TreeEnsemble m = fit_gbm(frame_of({x}), y, w, Objective::binary(), quick_params());
    std::vector<double> xt(200);
    for (auto& v : xt) v = u(gen);
    const Matrix p = predict(m, frame_of({xt}));
    int correct = 0;
    for (std::size_t i = 0; i < xt.size(); ++i) correct += (p(i, 0) > 0.5) == (xt[i] > 0);
    EXPECT_EQ(correct, 200);
}

TEST(FitGbm, PureNoiseSelectsFewIterations) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 gen(seed);
        std::normal_distribution<double> n01;
        std::vector<double> x1(400), x2(400), y(400), w(400, 1.0);
        for (std::size_t i = 0; i < y.size(); ++i) {
            x1[i] = n01(gen);
            x2[i] = n01(gen);
            y[i] = n01(gen) > 0.3 ? 1.0 : 0.0;
        }
        const auto f = frame_of({x1, x2});
        const TreeEnsemble m = fit_gbm(f, y, w, Objective::binary(), quick_params(seed));
        EXPECT_LE(m.n_iterations, 5) << "seed " << seed;
        const double rate = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
        const Matrix p = predict(m, f);
        double mean_p = 0.0;
        for (std::size_t r = 0; r < p.rows; ++r) mean_p += p(r, 0) / static_cast<double>(p.rows);
        EXPECT_NEAR(mean_p, rate, 0.03);
        ASSERT_FALSE(m.cv_curve.empty());
        EXPECT_LE(m.cv_loss, m.cv_curve.back());
    }
}

TEST(FitGbm, MulticlassRowsAreStochastic) {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> n01;
    std::vector<double> x(600), y(600), w(600, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = n01(gen);
        y[i] = x[i] < -0.5 ? 0 : (x[i] < 0.5 ? 1 : 2);
    }
    const auto f = frame_of({x});
    const TreeEnsemble m = fit_gbm(f, y, w, Objective::multiclass(3), quick_params());
    const Matrix p = predict(m, f);
    for (std::size_t r = 0; r < p.rows; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_GE(p(r, k), 0.0);
            EXPECT_LE(p(r, k), 1.0);
            s += p(r, k);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // empty prefix is the base score everywhere
    const Matrix base = predict_raw(m, f, 0);
    for (std::size_t r = 0; r < base.rows; ++r)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(base(r, k), m.base_score[k]);
}

TEST(FitGbm, PinballMedianOnSymmetricData) {
    // y = 3x + e with e in {-1, 0, 1} equally often: conditional median is 3x
    std::vector<double> x, y, w;
    for (int rep = 0; rep < 60; ++rep)
        for (int g = 0; g < 4; ++g)
            for (int e = -1; e <= 1; ++e) {
                x.push_back(g);
                y.push_back(3.0 * g + e);
                w.push_back(1.0);
            }
    const auto f = frame_of({x});
    const TreeEnsemble m = fit_gbm(f, y, w, Objective::pinball(0.5), quick_params());
    const Matrix p = predict(m, f);
    for (std::size_t r = 0; r < p.rows; ++r) EXPECT_NEAR(p(r, 0), 3.0 * x[r], 0.05);
}

TEST(FitGbm, SquaredErrorTrainingLossNonIncreasing) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> n01;
    std::vector<double> x1(800), x2(800), y(800), w(800);
    for (std::size_t i = 0; i < y.size(); ++i) {
        x1[i] = n01(gen);
        x2[i] = n01(gen);
        y[i] = std::sin(2 * x1[i]) + 0.5 * x2[i] + 0.3 * n01(gen);
        w[i] = 0.5 + (i % 3);
    }
    const auto f = frame_of({x1, x2});
    const TreeEnsemble m = fit_gbm(f, y, w, Objective::squared_error(), quick_params());
    ASSERT_GT(m.n_iterations, 5);
    const auto curve = training_loss_curve(m, f, y, w);
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i], curve[i - 1] * (1 + 1e-12)) << i;
}

TEST(FitGbm, DeterministicAndSerializationExact) {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> n01;
    FeatureFrame f = frame_of({{}});
    FeatureColumn cat;
    cat.name = "region";
    cat.categorical = true;
    cat.levels = {"n", "s", "e", "w"};
    std::vector<double> y, w;
    for (int i = 0; i < 500; ++i) {
        const double x = n01(gen);
        const int c = i % 4;
        f.columns[0].values.push_back(x);
        cat.values.push_back(c);
        y.push_back(x + (c == 2 ? 2.0 : 0.0) + 0.2 * n01(gen));
        w.push_back(1.0 + (i % 5));
    }
    f.columns.push_back(cat);
    const TreeEnsemble a = fit_gbm(f, y, w, Objective::pinball(0.833), quick_params(4));
    const TreeEnsemble b = fit_gbm(f, y, w, Objective::pinball(0.833), quick_params(4));
    EXPECT_EQ(a.trees, b.trees);
    std::stringstream ss;
    save_ensemble(ss, a);
    const TreeEnsemble c = load_ensemble(ss);
    const Matrix pa = predict(a, f), pc = predict(c, f);
    for (std::size_t r = 0; r < pa.rows; ++r) EXPECT_EQ(pa(r, 0), pc(r, 0));

    // unseen and reordered levels never abort
    FeatureFrame g = f;
    g.columns[1].levels = {"w", "e", "s", "n", "new"};
    for (auto& v : g.columns[1].values) v = 4;
    const Matrix pu = predict(a, g);
    for (std::size_t r = 0; r < pu.rows; ++r) EXPECT_TRUE(std::isfinite(pu(r, 0)));
    FeatureFrame h = f;
    h.columns[1].levels = {"w", "e", "s", "n"};
    for (auto& v : h.columns[1].values) v = 3 - v;
    const Matrix ph = predict(a, h);
    for (std::size_t r = 0; r < pa.rows; ++r) EXPECT_EQ(pa(r, 0), ph(r, 0));
}

TEST(TrainParams, MinNodeRule) {
    TrainParams p;
    EXPECT_EQ(p.min_node_rows(1000), 20);
    EXPECT_EQ(p.min_node_rows(100000), 100);
    EXPECT_EQ(p.min_node_rows(20001), 21);
}

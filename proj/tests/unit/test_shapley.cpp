#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "arbortune/error.hpp"
#include "arbortune/random.hpp"
#include "arbortune/shapley.hpp"

using namespace arbortune;

namespace {

// Random model with pairwise interactions and a nonlinearity.
struct RandomModel {
    std::vector<double> lin;
    std::vector<std::vector<double>> quad;
    double bias;

    RandomModel(std::size_t m, Rng& rng) : lin(m), quad(m, std::vector<double>(m, 0.0)), bias(rng.uniform(-1, 1)) {
        for (auto& v : lin) v = rng.uniform(-2, 2);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = i + 1; j < m; ++j) quad[i][j] = rng.uniform(-1, 1);
    }
    double operator()(std::span<const double> x) const {
        double s = bias;
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += lin[i] * x[i];
            for (std::size_t j = i + 1; j < x.size(); ++j) s += quad[i][j] * x[i] * x[j];
        }
        return std::tanh(s);
    }
};

std::vector<double> rvec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform();
    return v;
}

// Shapley values by averaging marginal contributions over all orderings:
// an oracle independent of the subset-weight formula.
std::vector<double> permutation_shapley(const ScalarModel& f, const std::vector<double>& x, const std::vector<double>& bg) {
    const std::size_t m = x.size();
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<double> phi(m, 0.0);
    double count = 0;
    do {
        std::vector<double> z = bg;
        double prev = f(z);
        for (auto j : perm) {
            z[j] = x[j];
            const double cur = f(z);
            phi[j] += cur - prev;
            prev = cur;
        }
        ++count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    for (auto& v : phi) v /= count;
    return phi;
}

} // namespace

TEST(Exact, LinearModel) {
    const ScalarModel f = [](std::span<const double> x) { return 2 * x[0] + 3 * x[1]; };
    const auto a = exact_shapley(f, std::vector<double>{1, 1}, std::vector<double>{0, 0});
    EXPECT_DOUBLE_EQ(a.base_value, 0.0);
    EXPECT_DOUBLE_EQ(a.values[0], 2.0);
    EXPECT_DOUBLE_EQ(a.values[1], 3.0);
}

TEST(Exact, SymmetryAndDummy) {
    const ScalarModel f = [](std::span<const double> x) { return x[0] + x[1]; };
    const auto a = exact_shapley(f, std::vector<double>{1, 1, 1}, std::vector<double>{0, 0, 0});
    EXPECT_DOUBLE_EQ(a.values[0], 1.0);
    EXPECT_DOUBLE_EQ(a.values[1], 1.0);
    EXPECT_DOUBLE_EQ(a.values[2], 0.0);
}

TEST(Exact, MatchesPermutationOracle) {
    Rng rng(4);
    for (std::size_t m : {2u, 3u, 5u, 6u}) {
        const RandomModel model(m, rng);
        const ScalarModel f = [&](std::span<const double> x) { return model(x); };
        const auto x = rvec(m, rng), bg = rvec(m, rng);
        const auto a = exact_shapley(f, x, bg);
        const auto b = permutation_shapley(f, x, bg);
        for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(a.values[j], b[j], 1e-12);
    }
}

TEST(Exact, Axioms) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 3 + rng.index(4);
        const RandomModel model(m, rng);
        const auto x = rvec(m, rng), bg = rvec(m, rng);
        // feature m-1 ignored; features 0 and 1 enter symmetrically
        const ScalarModel f = [&](std::span<const double> z) {
            std::vector<double> w(z.begin(), z.end());
            const double s = w[0] + w[1];
            w[m - 1] = 0.3;
            w[0] = s;
            w[1] = s;
            return model(w);
        };
        std::vector<double> xs = x, bs = bg;
        xs[1] = xs[0];
        bs[1] = bs[0];
        const auto a = exact_shapley(f, xs, bs);
        ASSERT_NEAR(a.base_value + std::accumulate(a.values.begin(), a.values.end(), 0.0), f(xs), 1e-9);
        ASSERT_NEAR(a.values[0], a.values[1], 1e-12);
        ASSERT_NEAR(a.values[m - 1], 0.0, 1e-12);
    }
}

TEST(Exact, Errors) {
    const ScalarModel f = [](std::span<const double> x) { return x[0]; };
    EXPECT_THROW(exact_shapley(f, std::vector<double>(21, 0.0), std::vector<double>(21, 0.0)), DataError);
    const ScalarModel bad = [](std::span<const double>) { return NAN; };
    EXPECT_THROW(exact_shapley(bad, std::vector<double>{1}, std::vector<double>{0}), RuntimeFault);
}

TEST(KernelWeight, Values) {
    EXPECT_EQ(kernel_weight(4, 1), 0.25);
    EXPECT_EQ(kernel_weight(4, 2), 0.125);
    for (std::size_t m = 2; m <= 12; ++m)
        for (std::size_t s = 1; s < m; ++s) EXPECT_EQ(kernel_weight(m, s), kernel_weight(m, m - s));
    EXPECT_THROW(kernel_weight(4, 0), DataError);
    EXPECT_THROW(kernel_weight(4, 4), DataError);
}

TEST(KernelShap, FullEnumerationMatchesExact) {
    Rng rng(6);
    for (std::size_t m : {2u, 4u, 6u, 8u, 10u}) {
        const RandomModel model(m, rng);
        const ScalarModel f = [&](std::span<const double> x) { return model(x); };
        std::vector<std::vector<double>> bg;
        for (int r = 0; r < 3; ++r) bg.push_back(rvec(m, rng));
        const auto x = rvec(m, rng);
        const auto k = kernel_shap(f, x, bg, {});
        const auto e = exact_shapley(f, x, bg);
        EXPECT_NEAR(k.base_value, e.base_value, 1e-12);
        for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(k.values[j], e.values[j], 1e-6);
    }
}

TEST(KernelShap, ConstantModelAndEfficiency) {
    const ScalarModel c = [](std::span<const double>) { return 4.2; };
    const std::vector<std::vector<double>> bg{{0, 0, 0, 0, 0}};
    const auto a = kernel_shap(c, std::vector<double>{1, 2, 3, 4, 5}, bg, {});
    EXPECT_DOUBLE_EQ(a.base_value, 4.2);
    for (double v : a.values) EXPECT_NEAR(v, 0.0, 1e-12);

    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 12;
        const RandomModel model(m, rng);
        const ScalarModel f = [&](std::span<const double> x) { return model(x); };
        const std::vector<std::vector<double>> b2{rvec(m, rng), rvec(m, rng)};
        const auto x = rvec(m, rng);
        KernelShapOptions opt;
        opt.budget = 300;
        opt.seed = static_cast<std::uint64_t>(trial);
        const auto s = kernel_shap(f, x, b2, opt);
        ASSERT_NEAR(s.base_value + std::accumulate(s.values.begin(), s.values.end(), 0.0), f(x), 1e-9);
    }
}

TEST(KernelShap, SampledIsCloseAndDeterministic) {
    Rng rng(8);
    const std::size_t m = 8;
    const RandomModel model(m, rng);
    const ScalarModel f = [&](std::span<const double> x) { return model(x); };
    const std::vector<std::vector<double>> bg{rvec(m, rng)};
    const auto x = rvec(m, rng);
    KernelShapOptions opt;
    opt.budget = 200;
    opt.seed = 3;
    const auto a = kernel_shap(f, x, bg, opt);
    const auto b = kernel_shap(f, x, bg, opt);
    EXPECT_EQ(a.values, b.values);
    const auto e = exact_shapley(f, x, bg);
    double worst = 0;
    for (std::size_t j = 0; j < m; ++j) worst = std::max(worst, std::abs(a.values[j] - e.values[j]));
    EXPECT_LT(worst, 0.05);
}

TEST(KernelShap, BudgetErrors) {
    const ScalarModel f = [](std::span<const double> x) { return x[0] * x[1] + x[2]; };
    const std::vector<std::vector<double>> bg{{0, 0, 0, 0, 0, 0}};
    KernelShapOptions opt;
    opt.budget = 7; // M + 1
    EXPECT_THROW(kernel_shap(f, std::vector<double>(6, 1.0), bg, opt), DataError);
    EXPECT_THROW(kernel_shap(f, std::vector<double>(6, 1.0), {}, opt), DataError);
}

TEST(DefaultBudget, Values) {
    EXPECT_EQ(default_budget(4), 14u);
    EXPECT_EQ(default_budget(11), 2046u);
    EXPECT_EQ(default_budget(12), 2048u);
    EXPECT_EQ(default_budget(40), 2048u);
}

TEST(Importance, MeanAbsoluteAndTies) {
    const std::vector<Attribution> rows{{0, {1, -2}}, {0, {-3, 2}}};
    const auto r = global_importance(rows);
    EXPECT_EQ(r.importance, (std::vector<double>{2, 2}));
    EXPECT_EQ(r.ranking, (std::vector<std::size_t>{0, 1}));

    const std::vector<Attribution> one{{0, {0.5, -3, 1}}};
    const auto s = global_importance(one);
    EXPECT_EQ(s.importance, (std::vector<double>{0.5, 3, 1}));
    EXPECT_EQ(s.ranking, (std::vector<std::size_t>{1, 2, 0}));
    EXPECT_THROW(global_importance(std::vector<Attribution>{}), DataError);
    EXPECT_THROW(global_importance(std::vector<Attribution>{{0, {1}}, {0, {1, 2}}}), DataError);
}

TEST(Importance, ScaleInvariantRanking) {
    Rng rng(9);
    std::vector<Attribution> rows(20);
    for (auto& a : rows) a.values = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto base = global_importance(rows);
    auto scaled = rows;
    for (auto& a : scaled)
        for (auto& v : a.values) v *= 3.5;
    const auto r = global_importance(scaled);
    EXPECT_EQ(r.ranking, base.ranking);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.importance[j], 3.5 * base.importance[j], 1e-12);
}

TEST(SelectKnobs, Bounds) {
    const std::vector<Attribution> rows{{0, {0.1, 0.9, 0.5}}};
    const auto r = global_importance(rows);
    EXPECT_EQ(select_knobs(r, 1), (std::vector<std::size_t>{1}));
    EXPECT_EQ(select_knobs(r, 3), r.ranking);
    EXPECT_THROW(select_knobs(r, 0), DataError);
    EXPECT_THROW(select_knobs(r, 4), DataError);
}

TEST(ExplainRows, OrderIndependentSeeds) {
    const ScalarModel f = [](std::span<const double> x) { return x[0] * x[1] + std::sin(x[2]) + x[3] * x[4] * x[5]; };
    Rng rng(10);
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 4; ++i) rows.push_back(rvec(6, rng));
    const std::vector<std::vector<double>> bg{rvec(6, rng), rvec(6, rng)};
    KernelShapOptions opt;
    opt.budget = 20;
    opt.seed = 5;
    const auto all = explain_rows(f, rows, bg, opt);
    const std::vector<std::vector<double>> last{rows[3]};
    KernelShapOptions single = opt;
    single.seed = mix_seed(5, 3);
    EXPECT_EQ(all[3].values, kernel_shap(f, rows[3], bg, single).values);
}

TEST(Report, Json) {
    const auto r = global_importance(std::vector<Attribution>{{0, {0.1, 0.9}}});
    const std::vector<std::string> names{"a", "b"};
    const std::vector<std::size_t> sel{1};
    const auto doc = report_to_json(r, names, sel);
    EXPECT_EQ(doc["ranking"][0]["name"], "b");
    EXPECT_EQ(doc["ranking"][0]["rank"], 1);
    EXPECT_EQ(doc["selected"], nlohmann::json::array({"b"}));
}

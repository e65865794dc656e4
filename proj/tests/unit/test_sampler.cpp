#include <gtest/gtest.h>

#include <set>

#include "arbortune/error.hpp"
#include "arbortune/sampler.hpp"

using namespace arbortune;

namespace {

void expect_stratified(const SampleBatch& b, std::size_t k, std::size_t n) {
    ASSERT_EQ(b.points.size(), n);
    for (std::size_t d = 0; d < k; ++d) {
        std::vector<int> hist(n, 0);
        for (const auto& p : b.points) {
            ASSERT_EQ(p.size(), k);
            ASSERT_GE(p[d], 0.0);
            ASSERT_LT(p[d], 1.0);
            const auto s = static_cast<std::size_t>(p[d] * static_cast<double>(n));
            ASSERT_LT(s, n);
            // the stratum test itself, without the multiplication shortcut
            EXPECT_GE(p[d], static_cast<double>(s) / static_cast<double>(n));
            EXPECT_LT(p[d], static_cast<double>(s + 1) / static_cast<double>(n));
            ++hist[s];
        }
        for (int h : hist) EXPECT_EQ(h, 1);
    }
}

} // namespace

TEST(Lhs, TwoByFour) {
    for (std::uint64_t seed : {0u, 1u, 2u, 99u}) expect_stratified(lhs_sample(2, 4, seed), 2, 4);
}

TEST(Lhs, SinglePoint) {
    const auto b = lhs_sample(1, 1, 5);
    ASSERT_EQ(b.points.size(), 1u);
    EXPECT_GE(b.points[0][0], 0.0);
    EXPECT_LT(b.points[0][0], 1.0);
}

TEST(Lhs, StratifiedAtScale) {
    expect_stratified(lhs_sample(12, 200, 3), 12, 200);
    expect_stratified(lhs_sample(3, 997, 4), 3, 997);
    expect_stratified(lhs_sample(5, 64, 8, StratumPlacement::midpoint), 5, 64);
}

TEST(Lhs, Deterministic) {
    const auto a = lhs_sample(4, 50, 11);
    const auto b = lhs_sample(4, 50, 11);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.seed, 11u);
}

TEST(Lhs, SeedsDiffer) {
    EXPECT_NE(lhs_sample(4, 50, 1).points, lhs_sample(4, 50, 2).points);
}

TEST(Lhs, MidpointPlacement) {
    const auto b = lhs_sample(2, 4, 0, StratumPlacement::midpoint);
    std::set<double> values;
    for (const auto& p : b.points) values.insert(p[0]);
    EXPECT_EQ(values, (std::set<double>{0.125, 0.375, 0.625, 0.875}));
}

TEST(Lhs, Errors) {
    EXPECT_THROW(lhs_sample(0, 4, 0), ConfigError);
    EXPECT_THROW(lhs_sample(2, 0, 0), ConfigError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "arbortune/error.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/random.hpp"
#include "test_util.hpp"

using namespace arbortune;

namespace {

KnobSchema one(double lo, double hi, KnobKind kind = KnobKind::continuous, double def = -1) {
    return KnobSchema({{"k", kind, lo, hi, def < lo ? lo : def}});
}

KnobSchema mixed() {
    return KnobSchema({{"a", KnobKind::continuous, 0, 100, 50},
                       {"b", KnobKind::integer, 1, 64, 4},
                       {"c", KnobKind::continuous, -5, 5, 0},
                       {"d", KnobKind::integer, 0, 9, 0}});
}

} // namespace

TEST(Normalize, LinearMap) {
    EXPECT_DOUBLE_EQ(normalize({{25}}, one(0, 100))[0], 0.25);
    EXPECT_EQ(normalize({{0}}, one(0, 100))[0], 0.0);
    EXPECT_EQ(normalize({{100}}, one(0, 100))[0], 1.0);
}

TEST(Normalize, NonZeroOrigin) {
    // (2048 - 128) / (8192 - 128) = 1920 / 8064 = 5 / 21
    EXPECT_NEAR(normalize({{2048}}, one(128, 8192))[0], 5.0 / 21.0, 1e-15);
    EXPECT_NEAR(normalize({{2048}}, one(128, 8192))[0], 0.238095238095, 1e-12);
}

TEST(Normalize, Errors) {
    EXPECT_THROW(normalize({{1, 2}}, one(0, 10)), DataError);
    EXPECT_THROW(normalize({{11}}, one(0, 10)), DataError);
    EXPECT_THROW(normalize({{-0.5}}, one(0, 10)), DataError);
}

TEST(Denormalize, ContinuousAndInteger) {
    EXPECT_DOUBLE_EQ(denormalize(std::vector<double>{0.5}, one(0, 10)).values[0], 5.0);
    // 0.5 * 9 = 4.5 rounds half-up to 5
    EXPECT_EQ(denormalize(std::vector<double>{0.5}, one(0, 9, KnobKind::integer)).values[0], 5.0);
    EXPECT_EQ(denormalize(std::vector<double>{0.0}, one(0, 9, KnobKind::integer)).values[0], 0.0);
    EXPECT_EQ(denormalize(std::vector<double>{1.0}, one(0, 9, KnobKind::integer)).values[0], 9.0);
}

TEST(Denormalize, Tolerance) {
    EXPECT_EQ(denormalize(std::vector<double>{1.0 + 5e-10}, one(0, 10)).values[0], 10.0);
    EXPECT_EQ(denormalize(std::vector<double>{-5e-10}, one(0, 10)).values[0], 0.0);
    EXPECT_THROW(denormalize(std::vector<double>{1.0 + 1e-8}, one(0, 10)), DataError);
    EXPECT_THROW(denormalize(std::vector<double>{-1e-8}, one(0, 10)), DataError);
    EXPECT_THROW(denormalize(std::vector<double>{0.5, 0.5}, one(0, 10)), DataError);
}

TEST(Denormalize, RoundTripContinuous) {
    const KnobSchema s({{"x", KnobKind::continuous, -3, 17, 0},
                        {"y", KnobKind::continuous, 128, 8192, 128},
                        {"z", KnobKind::continuous, 0, 1e-3, 0}});
    Rng rng(42);
    for (int t = 0; t < 2000; ++t) {
        std::vector<double> u{rng.uniform(), rng.uniform(), rng.uniform()};
        const auto back = normalize(denormalize(u, s), s);
        for (std::size_t j = 0; j < u.size(); ++j) EXPECT_NEAR(back[j], u[j], 1e-12);
    }
}

TEST(Denormalize, AlwaysConforms) {
    const auto s = mixed();
    Rng rng(7);
    for (int t = 0; t < 2000; ++t) {
        std::vector<double> u(4);
        for (auto& v : u) v = rng.uniform();
        if (t % 10 == 0) u[1] = 1.0;
        const auto v = denormalize(u, s);
        EXPECT_TRUE(conforms(v, s));
    }
}

TEST(Schema, Validation) {
    EXPECT_THROW(KnobSchema({{"a", KnobKind::continuous, 0, 1, 0}, {"a", KnobKind::continuous, 0, 1, 0}}), ConfigError);
    EXPECT_THROW(KnobSchema({{"a", KnobKind::continuous, 1, 0, 0}}), ConfigError);
    EXPECT_THROW(KnobSchema({{"a", KnobKind::continuous, 0, 1, 2}}), ConfigError);
    EXPECT_THROW(KnobSchema({{"a", KnobKind::integer, 0, 1.5, 0}}), ConfigError);
}

TEST(Schema, SubsetAndDefaults) {
    const auto s = mixed();
    const std::vector<std::size_t> idx{2, 0};
    const auto sub = s.subset(idx);
    ASSERT_EQ(sub.size(), 2u);
    EXPECT_EQ(sub[0].name, "c");
    EXPECT_EQ(sub[1].name, "a");
    EXPECT_EQ(s.defaults().values, (std::vector<double>{50, 4, 0, 0}));
    EXPECT_EQ(*s.index_of("d"), 3u);
    EXPECT_FALSE(s.index_of("nope"));
}

TEST(LoadSchema, ValidFile) {
    testutil::TempDir dir;
    const auto p = dir.write("s.json", R"({"knobs": [
        {"name": "a", "kind": "continuous", "min": 0, "max": 1, "default": 0.5},
        {"name": "b", "kind": "integer", "min": 1, "max": 64, "default": 4},
        {"name": "c", "kind": "continuous", "min": -1, "max": 1, "default": 0}]})");
    const auto s = load_schema(p);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s[1].kind, KnobKind::integer);
    EXPECT_EQ(s[1].default_value, 4.0);
    EXPECT_EQ(schema_from_json(schema_to_json(s)), s);
}

TEST(LoadSchema, DuplicateNamed) {
    testutil::TempDir dir;
    const auto p = dir.write("s.json", R"({"knobs": [
        {"name": "max_connections", "kind": "integer", "min": 1, "max": 10, "default": 1},
        {"name": "max_connections", "kind": "integer", "min": 1, "max": 10, "default": 1}]})");
    try {
        load_schema(p);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("max_connections"), std::string::npos);
    }
}

TEST(LoadSchema, Rejections) {
    testutil::TempDir dir;
    EXPECT_THROW(load_schema(dir.write("a.json", R"([{"name":"a","kind":"continuous","min":5,"max":1,"default":2}])")),
                 ConfigError);
    EXPECT_THROW(load_schema(dir.write("b.json", R"([{"name":"a","kind":"enum","min":0,"max":1,"default":0}])")),
                 ConfigError);
    EXPECT_THROW(load_schema(dir.write("c.json", R"([{"name":"a","kind":"continuous","min":0,"default":0}])")),
                 ConfigError);
    EXPECT_THROW(load_schema(dir.write("d.json", "{not json")), ConfigError);
    EXPECT_THROW(load_schema(dir.file("missing.json")), ConfigError);
}

TEST(Metrics, NormalizeAndBack) {
    const MetricSchema m({{"r", 0, 1000}, {"w", -10, 10}});
    const auto u = normalize_metrics({{250, 0}}, m);
    EXPECT_DOUBLE_EQ(u[0], 0.25);
    EXPECT_DOUBLE_EQ(u[1], 0.5);
    EXPECT_DOUBLE_EQ(metric_to_physical(m, 0, 0.25), 250);
    // observations outside the range are kept, not clamped
    EXPECT_DOUBLE_EQ(normalize_metrics({{2000, 0}}, m)[0], 2.0);
    EXPECT_THROW(normalize_metrics({{1}}, m), DataError);
    EXPECT_EQ(metric_schema_from_json(metric_schema_to_json(m)), m);
}

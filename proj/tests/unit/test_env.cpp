#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "arbortune/env.hpp"
#include "arbortune/random.hpp"
#include "test_util.hpp"

using namespace arbortune;

namespace {

KnobSchema schema(std::size_t k) {
    std::vector<KnobSpec> specs;
    for (std::size_t j = 0; j < k; ++j) specs.push_back({"k" + std::to_string(j), KnobKind::continuous, 0, 100, 20});
    return KnobSchema(specs);
}

SimEnvConfig base(std::size_t k, double noise = 0.0) {
    SimEnvConfig c;
    c.schema = schema(k);
    c.influential = {{0, 0.8, 1.0}, {2, 0.3, 0.5}};
    c.noise_std = noise;
    c.seed = 11;
    return finalize(c);
}

std::vector<double> random_point(std::size_t k, Rng& rng) {
    std::vector<double> x(k);
    for (auto& v : x) v = rng.uniform();
    return x;
}

} // namespace

TEST(Sim, OptimumGivesClosedForm) {
    const auto cfg = base(5);
    std::vector<double> x(5, 0.5);
    x[0] = 0.8;
    x[2] = 0.3;
    const auto obs = sim_step(cfg, x, 0);
    EXPECT_NEAR(obs.throughput, 1000.0 * std::exp(1.5), 1e-9);
    Rng rng(1);
    for (int i = 0; i < 200; ++i) EXPECT_LE(sim_step(cfg, random_point(5, rng), 0).throughput, obs.throughput);
}

TEST(Sim, NonInfluentialKnobHasNoEffect) {
    const auto cfg = base(5);
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        auto x = random_point(5, rng);
        const auto a = sim_step(cfg, x, 3);
        for (std::size_t j : {1u, 3u, 4u}) {
            auto y = x;
            y[j] = std::min(1.0, y[j] + 0.01); // finite-difference probe
            const auto b = sim_step(cfg, y, 3);
            ASSERT_EQ(a.throughput, b.throughput);
            ASSERT_EQ(a.latency_p95, b.latency_p95);
        }
    }
}

TEST(Sim, Deterministic) {
    const auto cfg = base(5, 0.05);
    const std::vector<double> x{0.1, 0.2, 0.3, 0.4, 0.5};
    const auto a = sim_step(cfg, x, 9), b = sim_step(cfg, x, 9);
    EXPECT_EQ(a.throughput, b.throughput);
    EXPECT_EQ(a.latency_p95, b.latency_p95);
    EXPECT_EQ(a.metrics.values, b.metrics.values);
    EXPECT_NE(a.throughput, sim_step(cfg, x, 10).throughput);
}

TEST(Sim, PositiveAndInverseLatency) {
    const auto cfg = base(4, 0.1);
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const auto o = sim_step(cfg, random_point(4, rng), static_cast<std::uint64_t>(i));
        ASSERT_GT(o.throughput, 0.0);
        ASSERT_GT(o.latency_p95, 0.0);
    }
    const auto clean = base(4);
    for (int i = 0; i < 200; ++i) {
        const auto x = random_point(4, rng), y = random_point(4, rng);
        const auto a = sim_step(clean, x, 0), b = sim_step(clean, y, 0);
        if (a.throughput > b.throughput) ASSERT_LT(a.latency_p95, b.latency_p95);
    }
}

TEST(Sim, FloorsHugeNoise) {
    auto c = base(3, 5.0);
    for (std::uint64_t s = 0; s < 300; ++s) {
        const auto o = sim_step(c, std::vector<double>{0.5, 0.5, 0.5}, s);
        ASSERT_GE(o.throughput, 1e-6 * c.t0);
        ASSERT_GE(o.latency_p95, 1e-6 * c.l0);
    }
}

TEST(Sim, RejectsOutOfRangeKnobs) {
    const auto cfg = base(3);
    EXPECT_THROW(sim_step(cfg, std::vector<double>{0.5, 1.2, 0.5}, 0), DataError);
    EXPECT_THROW(sim_step(cfg, std::vector<double>{0.5, 0.5}, 0), DataError);
}

TEST(Sim, MetricsFollowMixingAndStayInRange) {
    const auto cfg = base(4);
    const auto ms = sim_metric_schema(cfg);
    ASSERT_EQ(ms.size(), 8u);
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        const auto x = random_point(4, rng);
        const auto o = sim_step(cfg, x, 0);
        for (std::size_t m = 0; m < ms.size(); ++m) {
            double v = 0;
            for (std::size_t c = 0; c < 4; ++c) v += cfg.mixing[m][c] * x[c];
            v += cfg.mixing[m][4] * 0.5 + cfg.mixing[m][5] * 0.5;
            ASSERT_NEAR(o.metrics.values[m], 1000.0 * v, 1e-9);
            ASSERT_GE(o.metrics.values[m], ms[m].min);
            ASSERT_LE(o.metrics.values[m], ms[m].max);
        }
    }
}

TEST(Planted, SingleKnob) {
    SimEnvConfig c;
    c.schema = schema(3);
    c.influential = {{1, 0.6, 1.0}};
    c = finalize(c);
    const auto p = planted_optimum(c);
    EXPECT_NEAR(p.throughput, 1000.0 * std::exp(1.0), 1e-9);
    EXPECT_EQ(p.knobs, (std::vector<double>{0.2, 0.6, 0.2}));
    EXPECT_NEAR(sim_step(c, p.knobs, 0).throughput, p.throughput, 1e-12 * p.throughput);
}

TEST(Planted, DefaultsOptimal) {
    SimEnvConfig c;
    c.schema = schema(3);
    c.influential = {{0, 0.2, 1.0}, {1, 0.2, 0.4}, {2, 0.2, 0.7}};
    c = finalize(c);
    const auto def = normalize(c.schema.defaults(), c.schema);
    EXPECT_EQ(planted_optimum(c).knobs, def);
    EXPECT_NEAR(sim_step(c, def, 0).throughput, planted_optimum(c).throughput, 1e-9);
}

TEST(Planted, DefaultConfigShape) {
    const auto c = default_sim_config(schema(12), 5);
    ASSERT_EQ(c.influential.size(), 4u);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(c.influential[j].index, j);
        EXPECT_GE(c.influential[j].optimum, 0.7); // default sits at 0.2
    }
    EXPECT_DOUBLE_EQ(c.noise_std, 0.01);
}

TEST(Config, Validation) {
    SimEnvConfig c;
    c.schema = schema(3);
    EXPECT_THROW(finalize(c), ConfigError);
    c.influential = {{3, 0.5, 1.0}};
    EXPECT_THROW(finalize(c), ConfigError);
    c.influential = {{0, 1.5, 1.0}};
    EXPECT_THROW(finalize(c), ConfigError);
    c.influential = {{0, 0.5, 0.0}};
    EXPECT_THROW(finalize(c), ConfigError);
    c.influential = {{0, 0.5, 1.0}, {0, 0.4, 1.0}};
    EXPECT_THROW(finalize(c), ConfigError);
    c.influential = {{0, 0.5, 1.0}};
    c.noise_std = -1;
    EXPECT_THROW(finalize(c), ConfigError);
    c.noise_std = 0;
    c.mixing = {{1, 2, 3}};
    EXPECT_THROW(finalize(c), ConfigError);
}

TEST(Config, JsonRoundTripAndFiles) {
    const auto c = base(4, 0.02);
    const auto back = sim_config_from_json(sim_config_to_json(c));
    EXPECT_EQ(back.schema, c.schema);
    EXPECT_EQ(back.mixing, c.mixing);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(sim_step(back, std::vector<double>{0.1, 0.2, 0.3, 0.4}, 4).throughput,
              sim_step(c, std::vector<double>{0.1, 0.2, 0.3, 0.4}, 4).throughput);

    testutil::TempDir dir;
    dir.write("schema.json", schema_to_json(c.schema).dump());
    dir.write("env.json", R"({"schema": "schema.json", "influential": [{"name": "k1", "optimum": 0.9, "strength": 0.5}], "seed": 3})");
    const auto loaded = load_sim_config(dir.file("env.json"));
    EXPECT_EQ(loaded.influential[0].index, 1u);
    dir.write("bad.json", R"({"schema": "schema.json", "influential": [{"name": "zz", "optimum": 0.9, "strength": 0.5}]})");
    EXPECT_THROW(load_sim_config(dir.file("bad.json")), ConfigError);
    dir.write("bad2.json", R"({"schema": "schema.json"})");
    EXPECT_THROW(load_sim_config(dir.file("bad2.json")), ConfigError);
}

TEST(SimEnv, ResetDeploysDefaults) {
    SimulatedEnvironment env(base(4));
    const auto r = env.reset();
    EXPECT_EQ(r.throughput, sim_step(env.config(), normalize(env.knob_schema().defaults(), env.knob_schema()), 0).throughput);
    EXPECT_EQ(env.steps_taken(), 1u);
    env.step(env.knob_schema().defaults());
    EXPECT_EQ(env.steps_taken(), 2u);
}

// ---------------------------------------------------------------------------

namespace {

MetricSchema two_metrics() { return MetricSchema({{"m_a", 0, 10}, {"m_b", 0, 10}}); }

std::string script(testutil::TempDir& dir, const std::string& name, const std::string& body) {
    const auto path = dir.write(name, "#!/bin/sh\n" + body);
    return "/bin/sh " + path.string();
}

} // namespace

TEST(Adapter, RequestDocument) {
    const auto s = schema(2);
    EXPECT_EQ(adapter_request(s, KnobVector{{1, 2.5}}), R"({"knobs":{"k0":1.0,"k1":2.5}})");
}

TEST(Adapter, Loopback) {
    testutil::TempDir dir;
    const auto cmd = script(dir, "echo.sh",
                            "cat > \"$(dirname \"$0\")/request.json\"\n"
                            "echo '{\"metrics\": {\"m_b\": 4, \"m_a\": 3}, \"throughput_tps\": 1234.5, \"latency_p95_ms\": 7.25}'\n");
    const auto s = schema(2);
    const auto sample = adapter_step({cmd, std::chrono::milliseconds(5000)}, s, KnobVector{{10, 20}}, two_metrics());
    EXPECT_EQ(sample.throughput, 1234.5);
    EXPECT_EQ(sample.latency_p95, 7.25);
    EXPECT_EQ(sample.metrics.values, (std::vector<double>{3, 4}));
    EXPECT_EQ(sample.knobs.values, (std::vector<double>{10, 20}));
    EXPECT_EQ(testutil::slurp(dir.file("request.json")), adapter_request(s, KnobVector{{10, 20}}));
}

TEST(Adapter, Timeout) {
    testutil::TempDir dir;
    const auto cmd = script(dir, "slow.sh", "sleep 5\necho '{}'\n");
    const auto t0 = std::chrono::steady_clock::now();
    EXPECT_THROW(adapter_step({cmd, std::chrono::milliseconds(200)}, schema(1), KnobVector{{20}}, two_metrics()),
                 AdapterTimeout);
    EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(3));
}

TEST(Adapter, MissingThroughputNamed) {
    try {
        parse_adapter_response(R"({"metrics": {"m_a": 1, "m_b": 2}, "latency_p95_ms": 3})", two_metrics());
        FAIL() << "expected an error";
    } catch (const AdapterMalformedResponse& e) {
        EXPECT_NE(std::string(e.what()).find("throughput_tps"), std::string::npos);
    }
    try {
        parse_adapter_response(R"({"metrics": {"m_a": 1}, "throughput_tps": 2, "latency_p95_ms": 3})", two_metrics());
        FAIL() << "expected an error";
    } catch (const AdapterMalformedResponse& e) {
        EXPECT_NE(std::string(e.what()).find("m_b"), std::string::npos);
    }
    EXPECT_THROW(parse_adapter_response("not json", two_metrics()), AdapterMalformedResponse);
    EXPECT_THROW(parse_adapter_response(R"({"metrics": {"m_a": 1, "m_b": 2}, "throughput_tps": -2, "latency_p95_ms": 3})",
                                        two_metrics()),
                 AdapterMalformedResponse);
}

TEST(Adapter, NonZeroExit) {
    testutil::TempDir dir;
    const auto cmd = script(dir, "fail.sh", "echo boom >&2\nexit 3\n");
    try {
        adapter_step({cmd, std::chrono::milliseconds(5000)}, schema(1), KnobVector{{20}}, two_metrics());
        FAIL() << "expected an error";
    } catch (const AdapterExitFailure& e) {
        EXPECT_EQ(e.exit_status(), 3);
        EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
    }
}

TEST(Adapter, EnvironmentWrapper) {
    testutil::TempDir dir;
    const auto cmd = script(dir, "ok.sh",
                            "cat >/dev/null\necho '{\"metrics\": {\"m_a\": 1, \"m_b\": 2}, \"throughput_tps\": 10, \"latency_p95_ms\": 1}'\n");
    AdapterEnvironment env({cmd, std::chrono::milliseconds(5000)}, schema(2), two_metrics());
    EXPECT_EQ(env.reset().throughput, 10.0);
    EXPECT_THROW(AdapterEnvironment({cmd, std::chrono::milliseconds(5000)}, schema(2), MetricSchema{}), ConfigError);
}

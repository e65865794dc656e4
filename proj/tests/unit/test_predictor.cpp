#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "arbortune/env.hpp"
#include "arbortune/error.hpp"
#include "arbortune/predictor.hpp"
#include "arbortune/random.hpp"
#include "arbortune/sampler.hpp"

using namespace arbortune;

namespace {

KnobSchema unit_schema(std::size_t k) {
    std::vector<KnobSpec> specs;
    for (std::size_t j = 0; j < k; ++j) specs.push_back({"x" + std::to_string(j), KnobKind::continuous, 0, 1, 0.5});
    return KnobSchema(specs);
}

std::vector<PerfSample> with_throughput(const std::vector<double>& t) {
    std::vector<PerfSample> s;
    for (double v : t) s.push_back({{{0.5}}, {}, v, 1.0, std::nullopt});
    return s;
}

// Labels are floor(5 * x0): separable along one knob.
LevelDataset separable(std::size_t n, std::uint64_t seed) {
    LevelDataset d;
    d.knob_names = {"x0", "x1"};
    for (const auto& p : lhs_sample(2, n, seed).points) {
        d.inputs.push_back(p);
        d.levels.push_back(std::min(4, static_cast<int>(5 * p[0])));
    }
    return d;
}

ExpertRuleTree staircase() {
    return expert_tree_from_json(nlohmann::json::parse(R"({
        "feature": "x0", "threshold": 0.5,
        "high": {"feature": "x1", "threshold": 0.5, "high": {"level": 4}, "low": {"level": 3}},
        "low":  {"feature": "x1", "threshold": 0.5, "high": {"level": 1}, "low": {"level": 0}}})"));
}

PredictorModel expert_model(int height = 2) {
    ExpertInit init;
    init.height = height;
    init.alpha = 100;
    PredictorModel m;
    m.knob_names = {"x0", "x1"};
    m.tree = init_from_expert_tree(staircase(), m.knob_names, init);
    return m;
}

int expert_label(const std::vector<double>& x) {
    if (x[0] >= 0.5) return x[1] >= 0.5 ? 4 : 3;
    return x[1] >= 0.5 ? 1 : 0;
}

double sum(const LevelDistribution& p) { return std::accumulate(p.begin(), p.end(), 0.0); }

} // namespace

TEST(BuildDataset, FiveDistinct) {
    const auto d = build_dataset(with_throughput({30, 10, 50, 20, 40}), unit_schema(1));
    EXPECT_EQ(d.levels, (std::vector<int>{2, 0, 4, 1, 3}));
    // type-7 quantiles of 10..50
    EXPECT_DOUBLE_EQ(d.cut_points[0], 18);
    EXPECT_DOUBLE_EQ(d.cut_points[3], 42);
}

TEST(BuildDataset, DegenerateAllEqual) {
    const auto d = build_dataset(with_throughput({7, 7, 7, 7, 7, 7}), unit_schema(1));
    for (int l : d.levels) EXPECT_EQ(l, 2);
}

TEST(BuildDataset, Errors) {
    EXPECT_THROW(build_dataset(with_throughput({1, 2, 3, 4}), unit_schema(1)), DataError);
    EXPECT_THROW(build_dataset(with_throughput({}), unit_schema(1)), DataError);
    EXPECT_THROW(build_dataset(with_throughput({1, 2, 3, 4, 0}), unit_schema(1)), DataError);
}

TEST(BuildDataset, SimulatedQuintiles) {
    const auto schema = unit_schema(3);
    SimEnvConfig cfg;
    cfg.schema = schema;
    cfg.influential = {{0, 0.7, 1.0}, {1, 0.2, 0.5}};
    cfg.noise_std = 0.02;
    cfg.seed = 4;
    cfg = finalize(cfg);
    std::vector<PerfSample> samples;
    const auto batch = lhs_sample(3, 100, 9);
    for (std::size_t i = 0; i < batch.points.size(); ++i) {
        const auto obs = sim_step(cfg, batch.points[i], i);
        samples.push_back({denormalize(batch.points[i], schema), obs.metrics, obs.throughput, obs.latency_p95, {}});
    }
    const auto d = build_dataset(samples, schema);
    std::vector<int> hist(5, 0);
    for (int l : d.levels) ++hist[static_cast<std::size_t>(l)];
    for (int h : hist) EXPECT_NEAR(h, 20, 1);
}

TEST(Predict, DistributionAndScore) {
    const auto m = expert_model();
    Rng rng(3);
    for (int t = 0; t < 500; ++t) {
        const std::vector<double> x{rng.uniform(), rng.uniform()};
        const auto p = predict_level(m, x);
        ASSERT_NEAR(sum(p), 1.0, 1e-9);
        for (double v : p) ASSERT_GE(v, 0.0);
        const double s = predict_score(m, x);
        ASSERT_GE(s, 0.0);
        ASSERT_LE(s, 4.0);
        ASSERT_NEAR(s, ScoreSurrogate(m)(x), 1e-12);
    }
}

TEST(Predict, PureRulePath) {
    const auto m = expert_model();
    EXPECT_GE(predict_level(m, std::vector<double>{0.9, 0.8})[4], 0.99);
    EXPECT_GE(predict_level(m, std::vector<double>{0.9, 0.1})[3], 0.99);
    EXPECT_GE(predict_level(m, std::vector<double>{0.2, 0.1})[0], 0.99);
}

TEST(Predict, HalfwayIsLeafMixture) {
    // both tests at threshold: D = 0.5 everywhere, uniform mixture of four leaves
    const auto m = expert_model();
    const auto p = predict_level(m, std::vector<double>{0.5, 0.5});
    const double peak = std::exp(10.0) / (std::exp(10.0) + 4.0);
    for (int level : {0, 1, 3, 4}) EXPECT_NEAR(p[static_cast<std::size_t>(level)], 0.25 * peak + 0.75 * (1 - peak) / 4, 1e-9);
}

TEST(Predict, ExpectedLevel) {
    EXPECT_DOUBLE_EQ(expected_level(std::vector<double>{0, 0, 0, 1, 0}), 3.0);
    EXPECT_DOUBLE_EQ(expected_level(std::vector<double>{0.2, 0.2, 0.2, 0.2, 0.2}), 2.0);
    EXPECT_DOUBLE_EQ(expected_level(std::vector<double>{0.5, 0, 0, 0, 0.5}), 2.0);
}

TEST(Predict, DimensionMismatch) {
    EXPECT_THROW(predict_level(expert_model(), std::vector<double>{0.1}), DataError);
}

TEST(Train, SeparableReachesAccuracy) {
    const auto data = separable(200, 1);
    PredictorModel m;
    m.knob_names = data.knob_names;
    m.tree = SoftTree::random_init(3, 2, kLevelCount, 10.0, 2);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.adam.learning_rate = 1e-2;
    cfg.seed = 3;
    const auto r = train_predictor(m, data, cfg);
    ASSERT_EQ(r.loss_history.size(), 201u);
    EXPECT_GE(dataset_accuracy(r.model, data), 0.9);
}

TEST(Train, LossMonotoneAtSmallLearningRate) {
    const auto data = separable(200, 5);
    PredictorModel m;
    m.knob_names = data.knob_names;
    m.tree = SoftTree::random_init(3, 2, kLevelCount, 10.0, 6);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.adam.learning_rate = 1e-3;
    cfg.seed = 7;
    const auto r = train_predictor(m, data, cfg);
    for (std::size_t e = 1; e < r.loss_history.size(); ++e) EXPECT_LE(r.loss_history[e], 1.05 * r.loss_history[e - 1]);
    EXPECT_LT(r.loss_history.back(), r.loss_history.front());
}

TEST(Train, KnowledgeInitAlreadyFits) {
    LevelDataset data;
    data.knob_names = {"x0", "x1"};
    for (const auto& p : lhs_sample(2, 200, 8).points) {
        data.inputs.push_back(p);
        data.levels.push_back(expert_label(p));
    }
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.seed = 1;
    const auto r = train_predictor(expert_model(), data, cfg);
    const double first = r.loss_history.front(), last = r.loss_history.back();
    EXPECT_LE(std::abs(first - last), 0.1 * last) << first << " vs " << last;
    EXPECT_GE(dataset_accuracy(expert_model(), data), 0.97);
}

TEST(Train, ZeroEpochsUnchanged) {
    const auto m = expert_model(3);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto r = train_predictor(m, separable(50, 2), cfg);
    EXPECT_EQ(r.loss_history.size(), 1u);
    EXPECT_TRUE(std::equal(m.tree.parameters().begin(), m.tree.parameters().end(), r.model.tree.parameters().begin()));
}

TEST(Train, Deterministic) {
    const auto data = separable(120, 3);
    PredictorModel m;
    m.knob_names = data.knob_names;
    m.tree = SoftTree::random_init(3, 2, kLevelCount, 10.0, 4);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.seed = 9;
    const auto a = train_predictor(m, data, cfg);
    const auto b = train_predictor(m, data, cfg);
    EXPECT_EQ(a.loss_history, b.loss_history);
    cfg.seed = 10;
    EXPECT_NE(train_predictor(m, data, cfg).loss_history, a.loss_history);
}

TEST(Train, Errors) {
    PredictorModel bad;
    bad.tree = SoftTree(2, 2, 3);
    EXPECT_THROW(train_predictor(bad, separable(20, 1), TrainConfig{}), DataError);
    PredictorModel wrong_dim;
    wrong_dim.tree = SoftTree(2, 3, kLevelCount);
    EXPECT_THROW(train_predictor(wrong_dim, separable(20, 1), TrainConfig{}), DataError);
    TrainConfig huge;
    huge.epochs = 5;
    huge.adam.learning_rate = 1e308;
    PredictorModel m = expert_model();
    EXPECT_THROW(train_predictor(m, separable(40, 1), huge), RuntimeFault);
}

TEST(ModelFile, RoundTrip) {
    const auto m = expert_model();
    const auto back = predictor_from_json(nlohmann::json::parse(predictor_to_json(m).dump()));
    EXPECT_EQ(back.knob_names, m.knob_names);
    EXPECT_EQ(back.leaf_sharpness, m.leaf_sharpness);
    const std::vector<double> x{0.3, 0.8};
    EXPECT_EQ(predict_score(back, x), predict_score(m, x));
    EXPECT_THROW(predictor_from_json(nlohmann::json::parse(R"({"kind": "other"})")), ConfigError);
}

TEST(DatasetCsv, RoundTripAndValidation) {
    const KnobSchema schema({{"a", KnobKind::continuous, 0, 10, 1}, {"b", KnobKind::integer, 1, 64, 4}});
    std::vector<PerfSample> s{{{{0.1, 3}}, {}, 123.456, 7.25, {}}, {{{9.999999999, 64}}, {}, 1e-3, 1e6, {}}};
    const auto csv = dataset_to_csv(schema, s);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "a,b,throughput_tps,latency_p95_ms");
    const auto back = dataset_from_csv(csv, schema);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].knobs.values, s[1].knobs.values);
    EXPECT_EQ(back[0].throughput, 123.456);
    EXPECT_EQ(dataset_to_csv(schema, back), csv);

    EXPECT_THROW(dataset_from_csv("x,b,throughput_tps,latency_p95_ms\n", schema), DataError);
    EXPECT_THROW(dataset_from_csv("a,b,throughput_tps,latency_p95_ms\n1,2,3\n", schema), DataError);
    EXPECT_THROW(dataset_from_csv("a,b,throughput_tps,latency_p95_ms\n11,2,3,4\n", schema), DataError);
    EXPECT_THROW(dataset_from_csv("a,b,throughput_tps,latency_p95_ms\n1,2,0,4\n", schema), DataError);
    EXPECT_THROW(dataset_from_csv("a,b,throughput_tps,latency_p95_ms\n1,2,abc,4\n", schema), DataError);
}

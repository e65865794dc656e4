#include "arbortune/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "arbortune/error.hpp"
#include "arbortune/random.hpp"

namespace arbortune {

namespace {

// Type-7 quantile of a sorted sample.
double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> leaf_distribution(std::span<const double> leaf, double sharpness) {
    std::vector<double> q(leaf.size());
    const double m = *std::max_element(leaf.begin(), leaf.end());
    double sum = 0.0;
    for (std::size_t o = 0; o < q.size(); ++o) {
        q[o] = std::exp(sharpness * (leaf[o] - m));
        sum += q[o];
    }
    for (auto& v : q) v /= sum;
    return q;
}

// Copy of the model tree with each leaf replaced by its level distribution.
SoftTree distribution_tree(const PredictorModel& model) {
    SoftTree t = model.tree;
    for (std::size_t j = 0; j < t.leaf_count(); ++j) t.set_leaf(j, leaf_distribution(model.tree.leaf(j), model.leaf_sharpness));
    return t;
}

void check_model(const PredictorModel& model) {
    if (model.tree.output_dim() != kLevelCount)
        throw DataError(fmt::format("predictor tree must have {} outputs, has {}", kLevelCount,
                                    model.tree.output_dim()));
}

constexpr double kProbFloor = 1e-300;

} // namespace

LevelDataset build_dataset(std::span<const PerfSample> samples, const KnobSchema& schema) {
    if (samples.size() < kLevelCount)
        throw DataError(fmt::format("need at least {} samples to build levels, got {}", kLevelCount, samples.size()));
    std::vector<double> tps;
    tps.reserve(samples.size());
    for (const auto& s : samples) {
        if (!(s.throughput > 0.0) || !std::isfinite(s.throughput))
            throw DataError(fmt::format("sample throughput {} must be positive", s.throughput));
        tps.push_back(s.throughput);
    }

    LevelDataset data;
    data.knob_names = schema.names();
    std::vector<double> sorted = tps;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t c = 0; c < data.cut_points.size(); ++c)
        data.cut_points[c] = quantile(sorted, 0.2 * static_cast<double>(c + 1));

    const bool degenerate = sorted.front() == sorted.back();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        data.inputs.push_back(normalize(samples[i].knobs, schema));
        int level = 2;
        if (!degenerate) {
            level = static_cast<int>(std::count_if(data.cut_points.begin(), data.cut_points.end(),
                                                   [&](double cut) { return cut < tps[i]; }));
        }
        data.levels.push_back(level);
    }
    return data;
}

LevelDistribution predict_level(const PredictorModel& model, std::span<const double> knobs_normalized) {
    check_model(model);
    const auto trace = forward(model.tree, knobs_normalized);
    LevelDistribution p{};
    for (std::size_t j = 0; j < model.tree.leaf_count(); ++j) {
        const auto q = leaf_distribution(model.tree.leaf(j), model.leaf_sharpness);
        for (std::size_t o = 0; o < kLevelCount; ++o) p[o] += trace.leaf_probability[j] * q[o];
    }
    return p;
}

double expected_level(std::span<const double> distribution) {
    double s = 0.0;
    for (std::size_t i = 0; i < distribution.size(); ++i) s += static_cast<double>(i) * distribution[i];
    return s;
}

double predict_score(const PredictorModel& model, std::span<const double> knobs_normalized) {
    const auto p = predict_level(model, knobs_normalized);
    return expected_level(p);
}

double dataset_loss(const PredictorModel& model, const LevelDataset& data) {
    check_model(model);
    if (data.size() == 0) throw DataError("empty dataset");
    const SoftTree dist = distribution_tree(model);
    double total = 0.0;
    for (std::size_t r = 0; r < data.size(); ++r) {
        const auto p = evaluate(dist, data.inputs[r]);
        total += -std::log(std::max(p[static_cast<std::size_t>(data.levels[r])], kProbFloor));
    }
    return total / static_cast<double>(data.size());
}

double dataset_accuracy(const PredictorModel& model, const LevelDataset& data) {
    check_model(model);
    if (data.size() == 0) throw DataError("empty dataset");
    const SoftTree dist = distribution_tree(model);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
        const auto p = evaluate(dist, data.inputs[r]);
        const auto arg = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        hits += arg == data.levels[r] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult train_predictor(PredictorModel model, const LevelDataset& data, const TrainConfig& cfg) {
    check_model(model);
    if (data.size() == 0) throw DataError("empty dataset");
    if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
    for (const auto& x : data.inputs)
        if (x.size() != model.tree.input_dim())
            throw DataError(fmt::format("dataset rows have {} knobs, predictor expects {}", x.size(),
                                        model.tree.input_dim()));
    for (int level : data.levels)
        if (level < 0 || static_cast<std::size_t>(level) >= kLevelCount)
            throw DataError(fmt::format("level label {} outside 0..4", level));

    TrainResult result;
    result.loss_history.push_back(dataset_loss(model, data));
    if (!std::isfinite(result.loss_history.back())) throw RuntimeFault("predictor loss is not finite before training");

    Adam adam(model.tree.parameter_count(), cfg.adam);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> params(model.tree.parameters().begin(), model.tree.parameters().end());
    std::vector<double> grad(params.size());
    std::vector<double> grad_out(kLevelCount);
    const SoftTree& tree = model.tree;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double scale = 1.0 / static_cast<double>(end - start);
            const SoftTree dist = distribution_tree(model);
            std::fill(grad.begin(), grad.end(), 0.0);

            for (std::size_t b = start; b < end; ++b) {
                const std::size_t r = order[b];
                const auto y = static_cast<std::size_t>(data.levels[r]);
                const auto trace = forward(dist, data.inputs[r]);
                const double p_y = std::max(trace.output[y], kProbFloor);
                std::fill(grad_out.begin(), grad_out.end(), 0.0);
                grad_out[y] = -scale / p_y;
                // node gradients come straight from the distribution tree; leaf
                // gradients are pulled back through the leaf softmax below
                std::vector<double> g = backward(dist, trace, grad_out);
                for (std::size_t i = 0; i < tree.inner_count(); ++i) {
                    const std::size_t off = tree.weight_offset(i);
                    for (std::size_t k = 0; k < tree.input_dim() + 1; ++k) grad[off + k] += g[off + k];
                    // steepness is a fixed hyperparameter for the predictor
                }
                for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
                    const auto q = dist.leaf(j);
                    const double* gq = g.data() + tree.leaf_offset(j);
                    double dot = 0.0;
                    for (std::size_t o = 0; o < kLevelCount; ++o) dot += q[o] * gq[o];
                    double* gl = grad.data() + tree.leaf_offset(j);
                    for (std::size_t o = 0; o < kLevelCount; ++o)
                        gl[o] += model.leaf_sharpness * q[o] * (gq[o] - dot);
                }
            }
            adam.step(params, grad);
            if (!std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); }))
                throw RuntimeFault(fmt::format("predictor parameters became non-finite at epoch {} (last loss {})",
                                               epoch + 1, result.loss_history.back()));
            model.tree.set_parameters(params);
        }
        const double loss = dataset_loss(model, data);
        if (!std::isfinite(loss))
            throw RuntimeFault(fmt::format("predictor loss became {} at epoch {} (previous {})", loss, epoch + 1,
                                           result.loss_history.back()));
        result.loss_history.push_back(loss);
    }
    result.model = std::move(model);
    return result;
}

ScoreSurrogate::ScoreSurrogate(const PredictorModel& model) : tree_(model.tree.height(), model.tree.input_dim(), 1) {
    check_model(model);
    std::vector<double> params(tree_.parameter_count());
    const auto src = model.tree.parameters();
    const std::size_t node_block = model.tree.inner_count() * model.tree.node_stride();
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(node_block), params.begin());
    for (std::size_t j = 0; j < model.tree.leaf_count(); ++j) {
        const auto q = leaf_distribution(model.tree.leaf(j), model.leaf_sharpness);
        params[tree_.leaf_offset(j)] = expected_level(q);
    }
    tree_.set_parameters(params);
    tree_.set_weighting(model.tree.weighting(), model.tree.gumbel_temperature());
}

double ScoreSurrogate::operator()(std::span<const double> x) const { return evaluate(tree_, x)[0]; }

nlohmann::json predictor_to_json(const PredictorModel& model) {
    return {{"kind", "level_predictor"},
            {"leaf_sharpness", model.leaf_sharpness},
            {"knobs", model.knob_names},
            {"tree", tree_to_json(model.tree)}};
}

PredictorModel predictor_from_json(const nlohmann::json& doc) {
    try {
        if (doc.value("kind", std::string()) != "level_predictor")
            throw ConfigError("not a level predictor checkpoint");
        PredictorModel m;
        m.leaf_sharpness = doc.at("leaf_sharpness").get<double>();
        m.knob_names = doc.at("knobs").get<std::vector<std::string>>();
        m.tree = tree_from_json(doc.at("tree"));
        if (m.knob_names.size() != m.tree.input_dim())
            throw ConfigError("predictor checkpoint knob list does not match tree input size");
        check_model(m);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("predictor checkpoint: {}", e.what()));
    }
}

// ---------------------------------------------------------------------------

std::string dataset_to_csv(const KnobSchema& schema, std::span<const PerfSample> samples) {
    std::string out;
    for (const auto& k : schema.knobs()) out += k.name + ",";
    out += "throughput_tps,latency_p95_ms\n";
    for (const auto& s : samples) {
        if (s.knobs.values.size() != schema.size()) throw DataError("sample knob count does not match schema");
        for (double v : s.knobs.values) out += fmt::format("{},", v);
        out += fmt::format("{},{}\n", s.throughput, s.latency_p95);
    }
    return out;
}

std::vector<PerfSample> dataset_from_csv(const std::string& text, const KnobSchema& schema) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw DataError("dataset file is empty");

    auto split = [](const std::string& l) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(l);
        while (std::getline(ls, cell, ',')) {
            while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
            cells.push_back(cell);
        }
        return cells;
    };

    const auto header = split(line);
    std::vector<std::string> expected = schema.names();
    expected.push_back("throughput_tps");
    expected.push_back("latency_p95_ms");
    if (header != expected)
        throw DataError("dataset header does not match schema (expected knob names then throughput_tps,latency_p95_ms)");

    std::vector<PerfSample> samples;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split(line);
        if (cells.size() != expected.size())
            throw DataError(fmt::format("dataset line {}: {} fields, expected {}", line_no, cells.size(), expected.size()));
        PerfSample s;
        try {
            for (std::size_t j = 0; j < schema.size(); ++j) s.knobs.values.push_back(std::stod(cells[j]));
            s.throughput = std::stod(cells[schema.size()]);
            s.latency_p95 = std::stod(cells[schema.size() + 1]);
        } catch (const std::exception&) {
            throw DataError(fmt::format("dataset line {}: unparsable number", line_no));
        }
        if (!conforms(s.knobs, schema))
            throw DataError(fmt::format("dataset line {}: knob values outside schema bounds", line_no));
        if (!(s.throughput > 0.0) || !(s.latency_p95 > 0.0))
            throw DataError(fmt::format("dataset line {}: throughput and latency must be positive", line_no));
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace arbortune

#include "arbortune/explain.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include <fmt/format.h>

namespace arbortune {

HardTree discretize(const SoftTree& actor, const MetricSchema& metrics, const KnobSchema& knobs) {
    if (actor.height() < 1) throw DataError("cannot discretize an empty tree");
    if (metrics.size() != actor.input_dim())
        throw DataError(fmt::format("actor reads {} inputs, metric schema has {}", actor.input_dim(), metrics.size()));
    if (knobs.size() != actor.output_dim())
        throw DataError(fmt::format("actor writes {} outputs, knob schema has {}", actor.output_dim(), knobs.size()));

    HardTree tree;
    tree.height = actor.height();
    tree.metrics = metrics;
    tree.knobs = knobs;
    for (std::size_t i = 0; i < actor.inner_count(); ++i) {
        const auto w = effective_node_weights(actor, i);
        std::size_t best = 0;
        for (std::size_t k = 1; k < w.size(); ++k)
            if (std::abs(w[k]) > std::abs(w[best])) best = k;
        HardNode node;
        node.feature = best;
        node.feature_name = metrics[best].name;
        // stored weights of zero carry no feature preference, even when a
        // softmax turns them into a uniform vector
        const auto raw = actor.weights(i);
        if (w[best] == 0.0 || std::all_of(raw.begin(), raw.end(), [](double v) { return v == 0.0; })) {
            node.uninformative = true;
        } else {
            node.threshold = actor.threshold(i) / w[best];
            node.flip = w[best] < 0.0;
            if (!std::isfinite(node.threshold))
                throw DataError(fmt::format("node {} has a non-finite discretized threshold", i));
        }
        node.threshold_physical = metric_to_physical(metrics, best, node.threshold);
        tree.nodes.push_back(std::move(node));
    }
    for (std::size_t j = 0; j < actor.leaf_count(); ++j) {
        HardLeaf leaf;
        for (double v : actor.leaf(j)) leaf.normalized.push_back(sigmoid(v));
        leaf.physical = denormalize(leaf.normalized, knobs);
        tree.leaves.push_back(std::move(leaf));
    }
    return tree;
}

namespace {

bool satisfied(const HardNode& n, double x) {
    if (n.uninformative) return true;
    return n.flip ? x <= n.threshold : x >= n.threshold;
}

const char* comparator(const HardNode& n) {
    if (n.uninformative) return "none";
    return n.flip ? "<=" : ">=";
}

} // namespace

DecisionPath trace_decision_normalized(const HardTree& tree, std::span<const double> state) {
    if (state.size() != tree.metrics.size())
        throw DataError(fmt::format("state has {} metrics, tree expects {}", state.size(), tree.metrics.size()));
    DecisionPath path;
    std::size_t pos = 0;
    const std::size_t inner = tree.nodes.size();
    while (pos < inner) {
        const auto& n = tree.nodes[pos];
        DecisionStep s;
        s.node = pos;
        s.metric = n.feature_name;
        s.comparator = comparator(n);
        s.threshold = n.threshold_physical;
        s.observed = metric_to_physical(tree.metrics, n.feature, state[n.feature]);
        s.satisfied = satisfied(n, state[n.feature]);
        path.steps.push_back(std::move(s));
        pos = 2 * pos + (path.steps.back().satisfied ? 1 : 2);
    }
    path.leaf = pos - inner;
    path.payload = tree.leaves.at(path.leaf);
    return path;
}

DecisionPath trace_decision(const HardTree& tree, const MetricVector& state) {
    if (state.values.size() != tree.metrics.size())
        throw DataError(fmt::format("state has {} metrics, tree expects {}", state.values.size(), tree.metrics.size()));
    for (double v : state.values)
        if (!std::isfinite(v)) throw DataError("state holds a non-finite metric");
    const auto u = normalize_metrics(state, tree.metrics);
    auto path = trace_decision_normalized(tree, u);
    // report the observed values exactly as given
    for (auto& s : path.steps) s.observed = state.values[tree.nodes[s.node].feature];
    return path;
}

std::size_t hard_leaf(const HardTree& tree, std::span<const double> state_normalized) {
    std::size_t pos = 0;
    while (pos < tree.nodes.size()) pos = 2 * pos + (satisfied(tree.nodes[pos], state_normalized[tree.nodes[pos].feature]) ? 1 : 2);
    return pos - tree.nodes.size();
}

void attach_fidelity(DecisionPath& path, const SoftTree& actor, std::span<const double> state_normalized) {
    const auto trace = forward(actor, state_normalized);
    path.soft_probability = trace.leaf_probability.at(path.leaf);
}

RenderFormat parse_render_format(const std::string& name) {
    if (name == "text") return RenderFormat::text;
    if (name == "dot") return RenderFormat::dot;
    if (name == "json") return RenderFormat::json;
    throw ConfigError(fmt::format("unknown render format '{}' (expected text, dot or json)", name));
}

namespace {

std::string condition(const HardNode& n) {
    if (n.uninformative) return fmt::format("{} (uninformative, always yes)", n.feature_name);
    return fmt::format("{} {} {:.6g}", n.feature_name, comparator(n), n.threshold_physical);
}

std::string payload(const HardTree& tree, const HardLeaf& leaf) {
    std::string out;
    for (std::size_t k = 0; k < tree.knobs.size(); ++k) {
        if (k) out += ", ";
        out += fmt::format("{}={:.6g}", tree.knobs[k].name, leaf.physical.values[k]);
    }
    return out;
}

std::vector<bool> on_path(const HardTree& tree, const DecisionPath* path) {
    std::vector<bool> mark(tree.nodes.size() + tree.leaves.size(), false);
    if (!path) return mark;
    for (const auto& s : path->steps) mark[s.node] = true;
    mark[tree.nodes.size() + path->leaf] = true;
    return mark;
}

std::string render_text(const HardTree& tree, const DecisionPath* path) {
    const auto mark = on_path(tree, path);
    const std::size_t inner = tree.nodes.size();
    std::string out;
    std::function<void(std::size_t, int, const char*)> emit = [&](std::size_t pos, int depth, const char* label) {
        const std::string indent(static_cast<std::size_t>(2 * depth), ' ');
        const char* tag = mark[pos] ? "  <" : "";
        if (pos >= inner) {
            out += fmt::format("{}{} -> {}{}\n", indent, label, payload(tree, tree.leaves[pos - inner]), tag);
            return;
        }
        const std::string head = depth == 0 ? "" : fmt::format("{}: ", label);
        out += fmt::format("{}{}{} ?{}\n", indent, head, condition(tree.nodes[pos]), tag);
        emit(2 * pos + 1, depth + 1, "yes");
        emit(2 * pos + 2, depth + 1, "no");
    };
    emit(0, 0, "");
    return out;
}

std::string dot_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

std::string render_dot(const HardTree& tree, const DecisionPath* path) {
    const auto mark = on_path(tree, path);
    const std::size_t inner = tree.nodes.size();
    const char* hl = " color=red penwidth=2";
    std::string out = "digraph interpretation {\n  node [fontname=\"Helvetica\"];\n";
    for (std::size_t i = 0; i < inner; ++i)
        out += fmt::format("  n{} [shape=ellipse label=\"{}\"{}];\n", i, dot_escape(condition(tree.nodes[i])),
                           mark[i] ? hl : "");
    for (std::size_t j = 0; j < tree.leaves.size(); ++j)
        out += fmt::format("  n{} [shape=box label=\"{}\"{}];\n", inner + j,
                           dot_escape(payload(tree, tree.leaves[j])), mark[inner + j] ? hl : "");
    for (std::size_t i = 0; i < inner; ++i) {
        for (int side = 1; side <= 2; ++side) {
            const std::size_t child = 2 * i + static_cast<std::size_t>(side);
            out += fmt::format("  n{} -> n{} [label=\"{}\"{}];\n", i, child, side == 1 ? "yes" : "no",
                               mark[i] && mark[child] ? hl : "");
        }
    }
    out += "}\n";
    return out;
}

} // namespace

nlohmann::json hard_tree_to_json(const HardTree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes)
        nodes.push_back({{"feature", n.feature},
                         {"metric", n.feature_name},
                         {"threshold", n.threshold},
                         {"threshold_physical", n.threshold_physical},
                         {"flip", n.flip},
                         {"uninformative", n.uninformative}});
    nlohmann::json leaves = nlohmann::json::array();
    for (const auto& l : tree.leaves) {
        nlohmann::json phys = nlohmann::json::object();
        for (std::size_t k = 0; k < tree.knobs.size(); ++k) phys[tree.knobs[k].name] = l.physical.values[k];
        leaves.push_back({{"normalized", l.normalized}, {"physical", phys}});
    }
    return {{"kind", "interpretation_tree"},
            {"height", tree.height},
            {"metrics", metric_schema_to_json(tree.metrics)},
            {"knobs", schema_to_json(tree.knobs)},
            {"nodes", nodes},
            {"leaves", leaves}};
}

HardTree hard_tree_from_json(const nlohmann::json& doc) {
    HardTree tree;
    try {
        tree.height = doc.at("height").get<int>();
        tree.metrics = metric_schema_from_json(doc.at("metrics"));
        tree.knobs = schema_from_json(doc.at("knobs"));
        for (const auto& n : doc.at("nodes")) {
            HardNode node;
            node.feature = n.at("feature").get<std::size_t>();
            node.feature_name = n.at("metric").get<std::string>();
            node.threshold = n.at("threshold").get<double>();
            node.threshold_physical = n.at("threshold_physical").get<double>();
            node.flip = n.at("flip").get<bool>();
            node.uninformative = n.at("uninformative").get<bool>();
            if (node.feature >= tree.metrics.size()) throw DataError("interpretation node references an unknown metric");
            tree.nodes.push_back(std::move(node));
        }
        for (const auto& l : doc.at("leaves")) {
            HardLeaf leaf;
            leaf.normalized = l.at("normalized").get<std::vector<double>>();
            for (const auto& k : tree.knobs.knobs()) leaf.physical.values.push_back(l.at("physical").at(k.name).get<double>());
            tree.leaves.push_back(std::move(leaf));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("interpretation tree: {}", e.what()));
    }
    if (tree.height < 1 || tree.height > 20 || tree.nodes.size() != (std::size_t{1} << tree.height) - 1 ||
        tree.leaves.size() != std::size_t{1} << tree.height)
        throw DataError("interpretation tree is not a complete binary tree of its height");
    return tree;
}

nlohmann::json path_to_json(const DecisionPath& path, const HardTree& tree) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : path.steps)
        steps.push_back({{"node", s.node},
                         {"metric", s.metric},
                         {"comparator", s.comparator},
                         {"threshold", s.threshold},
                         {"observed", s.observed},
                         {"branch", s.satisfied ? "yes" : "no"}});
    nlohmann::json knobs = nlohmann::json::object();
    for (std::size_t k = 0; k < tree.knobs.size(); ++k) knobs[tree.knobs[k].name] = path.payload.physical.values[k];
    nlohmann::json doc = {{"steps", steps}, {"leaf", path.leaf}, {"knobs", knobs}};
    if (path.soft_probability) doc["soft_path_probability"] = *path.soft_probability;
    return doc;
}

std::string render(const HardTree& tree, RenderFormat format, const DecisionPath* path) {
    switch (format) {
    case RenderFormat::text: return render_text(tree, path);
    case RenderFormat::dot: return render_dot(tree, path);
    case RenderFormat::json: {
        nlohmann::json doc = hard_tree_to_json(tree);
        if (path) doc["path"] = path_to_json(*path, tree);
        return doc.dump(2) + "\n";
    }
    }
    throw ConfigError("unknown render format");
}

} // namespace arbortune

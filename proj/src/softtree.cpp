#include "arbortune/softtree.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>

#include <fmt/format.h>

#include "arbortune/error.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/random.hpp"

namespace arbortune {

namespace {

std::atomic<std::uint64_t> g_revision{0};

constexpr int kMaxHeight = 20;

void softmax_inplace(std::span<double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (auto& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (auto& x : v) x /= sum;
}

void check_input(const SoftTree& tree, std::span<const double> x) {
    if (x.size() != tree.input_dim())
        throw DataError(fmt::format("tree expects {} inputs, got {}", tree.input_dim(), x.size()));
    for (double v : x)
        if (!std::isfinite(v)) throw DataError("non-finite tree input");
}

// Effective weights for every node, optionally perturbed.
void effective_weights(const SoftTree& tree, const GumbelNoise* noise, std::vector<double>& out) {
    const std::size_t in = tree.input_dim();
    out.resize(tree.inner_count() * in);
    for (std::size_t i = 0; i < tree.inner_count(); ++i) {
        auto w = tree.weights(i);
        std::span<double> dst(out.data() + i * in, in);
        if (tree.weighting() == NodeWeighting::linear) {
            std::copy(w.begin(), w.end(), dst.begin());
            continue;
        }
        const double tau = tree.gumbel_temperature();
        for (std::size_t k = 0; k < in; ++k) {
            const double g = noise ? noise->values[i * in + k] : 0.0;
            dst[k] = (w[k] + g) / tau;
        }
        if (in > 0) softmax_inplace(dst);
    }
}

double node_logit(const SoftTree& tree, std::size_t node, const double* w_eff, std::span<const double> x) {
    double dot = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) dot += w_eff[k] * x[k];
    return tree.alpha(node) * (dot - tree.threshold(node));
}

} // namespace

double sigmoid(double z) {
    if (z >= 0.0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------

SoftTree::SoftTree(int height, std::size_t input_dim, std::size_t output_dim)
    : height_(height), input_dim_(input_dim), output_dim_(output_dim) {
    if (height < 1 || height > kMaxHeight)
        throw ConfigError(fmt::format("tree height {} outside [1, {}]", height, kMaxHeight));
    if (output_dim == 0) throw ConfigError("tree output dimension must be positive");
    params_.assign(inner_count() * node_stride() + leaf_count() * output_dim_, 0.0);
    touch();
}

SoftTree SoftTree::random_init(int height, std::size_t input_dim, std::size_t output_dim, double alpha,
                               std::uint64_t seed) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("tree alpha must be positive");
    SoftTree tree(height, input_dim, output_dim);
    Rng rng(seed);
    const double log_alpha = std::log(alpha);
    for (std::size_t i = 0; i < tree.inner_count(); ++i) {
        for (std::size_t k = 0; k < input_dim; ++k) tree.params_[tree.weight_offset(i) + k] = rng.uniform(-0.1, 0.1);
        tree.params_[tree.threshold_offset(i)] = rng.uniform(0.4, 0.6);
        tree.params_[tree.log_alpha_offset(i)] = log_alpha;
    }
    for (std::size_t j = 0; j < tree.leaf_count(); ++j)
        for (std::size_t o = 0; o < output_dim; ++o) tree.params_[tree.leaf_offset(j) + o] = rng.uniform(-0.05, 0.05);
    tree.touch();
    return tree;
}

std::span<const double> SoftTree::weights(std::size_t node) const {
    return {params_.data() + weight_offset(node), input_dim_};
}

double SoftTree::threshold(std::size_t node) const { return params_[threshold_offset(node)]; }

double SoftTree::alpha(std::size_t node) const { return std::exp(params_[log_alpha_offset(node)]); }

std::span<const double> SoftTree::leaf(std::size_t j) const {
    return {params_.data() + leaf_offset(j), output_dim_};
}

void SoftTree::set_node(std::size_t node, std::span<const double> w, double threshold, double alpha) {
    if (node >= inner_count()) throw DataError(fmt::format("node {} out of range", node));
    if (w.size() != input_dim_) throw DataError("node weight size mismatch");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DataError("node alpha must be positive and finite");
    if (!std::isfinite(threshold)) throw DataError("node threshold must be finite");
    std::copy(w.begin(), w.end(), params_.begin() + static_cast<std::ptrdiff_t>(weight_offset(node)));
    params_[threshold_offset(node)] = threshold;
    params_[log_alpha_offset(node)] = std::log(alpha);
    touch();
}

void SoftTree::set_leaf(std::size_t j, std::span<const double> value) {
    if (j >= leaf_count()) throw DataError(fmt::format("leaf {} out of range", j));
    if (value.size() != output_dim_) throw DataError("leaf value size mismatch");
    std::copy(value.begin(), value.end(), params_.begin() + static_cast<std::ptrdiff_t>(leaf_offset(j)));
    touch();
}

void SoftTree::set_parameters(std::span<const double> params) {
    if (params.size() != params_.size())
        throw DataError(fmt::format("tree has {} parameters, got {}", params_.size(), params.size()));
    for (double v : params)
        if (!std::isfinite(v)) throw DataError("non-finite tree parameter");
    std::copy(params.begin(), params.end(), params_.begin());
    touch();
}

void SoftTree::set_weighting(NodeWeighting mode, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw ConfigError("gumbel temperature must be positive");
    weighting_ = mode;
    gumbel_temperature_ = temperature;
    touch();
}

void SoftTree::touch() { revision_ = ++g_revision; }

// ---------------------------------------------------------------------------

GumbelNoise sample_gumbel_noise(const SoftTree& tree, Rng& rng) {
    GumbelNoise noise;
    noise.values.resize(tree.inner_count() * tree.input_dim());
    for (auto& g : noise.values) g = rng.gumbel();
    return noise;
}

std::vector<double> effective_node_weights(const SoftTree& tree, std::size_t node) {
    auto w = tree.weights(node);
    std::vector<double> out(w.begin(), w.end());
    if (tree.weighting() == NodeWeighting::gumbel_softmax && !out.empty()) {
        for (auto& v : out) v /= tree.gumbel_temperature();
        softmax_inplace(out);
    }
    return out;
}

ForwardTrace forward(const SoftTree& tree, std::span<const double> x, const GumbelNoise* noise) {
    check_input(tree, x);
    const std::size_t inner = tree.inner_count();
    const std::size_t in = tree.input_dim();
    const std::size_t out = tree.output_dim();
    if (noise && noise->values.size() != inner * in) throw DataError("gumbel noise size mismatch");

    ForwardTrace t;
    t.revision = tree.revision();
    t.input.assign(x.begin(), x.end());
    t.perturbed = noise != nullptr && tree.weighting() == NodeWeighting::gumbel_softmax;
    effective_weights(tree, t.perturbed ? noise : nullptr, t.effective_weights);

    t.logit.resize(inner);
    t.activation.resize(inner);
    for (std::size_t i = 0; i < inner; ++i) {
        t.logit[i] = node_logit(tree, i, t.effective_weights.data() + i * in, x);
        t.activation[i] = sigmoid(t.logit[i]);
    }

    t.reach.assign(inner, 0.0);
    t.leaf_probability.assign(tree.leaf_count(), 0.0);
    t.reach[0] = 1.0;
    for (std::size_t i = 0; i < inner; ++i) {
        const double left = t.reach[i] * t.activation[i];
        const double right = t.reach[i] * sigmoid(-t.logit[i]);
        const std::size_t l = 2 * i + 1, r = 2 * i + 2;
        if (l < inner) {
            t.reach[l] = left;
            t.reach[r] = right;
        } else {
            t.leaf_probability[l - inner] = left;
            t.leaf_probability[r - inner] = right;
        }
    }

    // Bottom-up: one level at a time, from the deepest inner level to the root.
    t.subtree_value.assign(inner * out, 0.0);
    auto child_value = [&](std::size_t c) -> const double* {
        return c < inner ? t.subtree_value.data() + c * out : tree.leaf(c - inner).data();
    };
    for (int level = tree.height() - 1; level >= 0; --level) {
        const std::size_t first = (std::size_t{1} << level) - 1;
        const std::size_t width = std::size_t{1} << level;
        for (std::size_t i = first; i < first + width; ++i) {
            const double d = t.activation[i];
            const double e = sigmoid(-t.logit[i]);
            const double* a = child_value(2 * i + 1);
            const double* b = child_value(2 * i + 2);
            double* v = t.subtree_value.data() + i * out;
            for (std::size_t o = 0; o < out; ++o) v[o] = d * a[o] + e * b[o];
        }
    }
    t.output.assign(t.subtree_value.begin(), t.subtree_value.begin() + static_cast<std::ptrdiff_t>(out));
    return t;
}

std::vector<double> evaluate(const SoftTree& tree, std::span<const double> x) {
    check_input(tree, x);
    const std::size_t inner = tree.inner_count();
    const std::size_t in = tree.input_dim();
    const std::size_t out = tree.output_dim();
    std::vector<double> w_eff;
    effective_weights(tree, nullptr, w_eff);

    // iter holds the values of the current level, starting from the leaves.
    std::vector<double> iter(tree.parameters().begin() + static_cast<std::ptrdiff_t>(tree.leaf_offset(0)),
                             tree.parameters().end());
    std::vector<double> next;
    for (int level = tree.height() - 1; level >= 0; --level) {
        const std::size_t first = (std::size_t{1} << level) - 1;
        const std::size_t width = std::size_t{1} << level;
        next.assign(width * out, 0.0);
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t node = first + j;
            const double z = node_logit(tree, node, w_eff.data() + node * in, x);
            const double d = sigmoid(z), e = sigmoid(-z);
            for (std::size_t o = 0; o < out; ++o)
                next[j * out + o] = d * iter[(2 * j) * out + o] + e * iter[(2 * j + 1) * out + o];
        }
        iter.swap(next);
    }
    (void)inner;
    return iter;
}

std::vector<double> evaluate_leaf_sum(const SoftTree& tree, std::span<const double> x) {
    check_input(tree, x);
    const std::size_t inner = tree.inner_count();
    const std::size_t in = tree.input_dim();
    std::vector<double> w_eff;
    effective_weights(tree, nullptr, w_eff);
    std::vector<double> z(inner);
    for (std::size_t i = 0; i < inner; ++i) z[i] = node_logit(tree, i, w_eff.data() + i * in, x);

    std::vector<double> out(tree.output_dim(), 0.0);
    for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
        double p = 1.0;
        for (std::size_t pos = j + inner; pos > 0;) {
            const std::size_t parent = (pos - 1) / 2;
            p *= (pos == 2 * parent + 1) ? sigmoid(z[parent]) : sigmoid(-z[parent]);
            pos = parent;
        }
        auto v = tree.leaf(j);
        for (std::size_t o = 0; o < out.size(); ++o) out[o] += p * v[o];
    }
    return out;
}

void backward_accumulate(const SoftTree& tree, const ForwardTrace& trace, std::span<const double> grad_out,
                         std::span<double> grad) {
    if (trace.revision != tree.revision()) throw DataError("stale forward trace: tree changed since forward");
    if (grad_out.size() != tree.output_dim()) throw DataError("grad_out size mismatch");
    if (grad.size() != tree.parameter_count()) throw DataError("gradient buffer size mismatch");

    const std::size_t inner = tree.inner_count();
    const std::size_t in = tree.input_dim();
    const std::size_t out = tree.output_dim();

    for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
        const double p = trace.leaf_probability[j];
        double* g = grad.data() + tree.leaf_offset(j);
        for (std::size_t o = 0; o < out; ++o) g[o] += grad_out[o] * p;
    }

    std::vector<double> dw_eff(in);
    for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t l = 2 * i + 1, r = 2 * i + 2;
        const double* a = l < inner ? trace.subtree_value.data() + l * out : tree.leaf(l - inner).data();
        const double* b = r < inner ? trace.subtree_value.data() + r * out : tree.leaf(r - inner).data();
        double diff = 0.0;
        for (std::size_t o = 0; o < out; ++o) diff += grad_out[o] * (a[o] - b[o]);
        const double d_act = trace.reach[i] * diff;
        const double d_logit = d_act * trace.activation[i] * sigmoid(-trace.logit[i]);
        if (d_logit == 0.0) continue;

        const double alpha = tree.alpha(i);
        grad[tree.threshold_offset(i)] += -alpha * d_logit;
        grad[tree.log_alpha_offset(i)] += trace.logit[i] * d_logit;

        double* gw = grad.data() + tree.weight_offset(i);
        if (tree.weighting() == NodeWeighting::linear) {
            for (std::size_t k = 0; k < in; ++k) gw[k] += alpha * d_logit * trace.input[k];
            continue;
        }
        // Softmax Jacobian: d s_k / d w_m = s_k (delta_km - s_m) / tau.
        const double* s = trace.effective_weights.data() + i * in;
        double inner_prod = 0.0;
        for (std::size_t k = 0; k < in; ++k) {
            dw_eff[k] = alpha * d_logit * trace.input[k];
            inner_prod += s[k] * dw_eff[k];
        }
        const double tau = tree.gumbel_temperature();
        for (std::size_t k = 0; k < in; ++k) gw[k] += s[k] * (dw_eff[k] - inner_prod) / tau;
    }
}

std::vector<double> backward(const SoftTree& tree, const ForwardTrace& trace, std::span<const double> grad_out) {
    std::vector<double> grad(tree.parameter_count(), 0.0);
    backward_accumulate(tree, trace, grad_out, grad);
    return grad;
}

std::vector<double> gumbel_weights(std::span<const double> w, double temperature, std::span<const double> noise) {
    if (!(temperature > 0.0)) throw ConfigError("gumbel temperature must be positive");
    if (w.empty()) throw DataError("gumbel_weights: empty weight vector");
    if (noise.size() != w.size()) throw DataError("gumbel_weights: noise size mismatch");
    for (double v : w)
        if (!std::isfinite(v)) throw DataError("gumbel_weights: non-finite weight");

    // log-softmax of w
    const double m = *std::max_element(w.begin(), w.end());
    double lse = 0.0;
    for (double v : w) lse += std::exp(v - m);
    lse = m + std::log(lse);

    std::vector<double> out(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) out[k] = ((w[k] - lse) + noise[k]) / temperature;
    softmax_inplace(out);
    return out;
}

std::vector<double> gumbel_weights(std::span<const double> w, double temperature, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> noise(w.size());
    for (auto& g : noise) g = rng.gumbel();
    return gumbel_weights(w, temperature, noise);
}

// ---------------------------------------------------------------------------

int ExpertRuleTree::depth() const {
    if (nodes.empty()) return 0;
    std::function<int(int)> walk = [&](int idx) -> int {
        const auto& n = nodes.at(static_cast<std::size_t>(idx));
        if (n.is_leaf) return 0;
        return 1 + std::max(walk(n.low), walk(n.high));
    };
    return walk(0);
}

namespace {

int parse_rule(const nlohmann::json& j, ExpertRuleTree& tree) {
    if (!j.is_object()) throw ConfigError("expert tree node must be an object");
    const int idx = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    ExpertRuleTree::Node node;
    try {
        if (j.contains("feature")) {
            node.feature = j.at("feature").get<std::string>();
            node.threshold = j.at("threshold").get<double>();
            if (!std::isfinite(node.threshold) || node.threshold < 0.0 || node.threshold > 1.0)
                throw ConfigError(fmt::format("rule on '{}': threshold {} outside [0,1]", node.feature,
                                              node.threshold));
            if (!j.contains("low") || !j.contains("high"))
                throw ConfigError(fmt::format("rule on '{}' needs both 'low' and 'high'", node.feature));
            node.low = parse_rule(j.at("low"), tree);
            node.high = parse_rule(j.at("high"), tree);
        } else if (j.contains("level")) {
            node.is_leaf = true;
            node.level = j.at("level").get<int>();
            if (*node.level < 0) throw ConfigError("expert leaf level must be non-negative");
        } else if (j.contains("knobs")) {
            node.is_leaf = true;
            node.knobs = j.at("knobs").get<std::vector<double>>();
            for (double v : node.knobs)
                if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                    throw ConfigError("expert knob payload values must be normalized to [0,1]");
        } else {
            throw ConfigError("expert tree node needs 'feature', 'level' or 'knobs'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("expert tree: {}", e.what()));
    }
    tree.nodes[static_cast<std::size_t>(idx)] = std::move(node);
    return idx;
}

nlohmann::json rule_to_json(const ExpertRuleTree& tree, int idx) {
    const auto& n = tree.nodes.at(static_cast<std::size_t>(idx));
    if (!n.is_leaf)
        return {{"feature", n.feature},
                {"threshold", n.threshold},
                {"low", rule_to_json(tree, n.low)},
                {"high", rule_to_json(tree, n.high)}};
    if (n.level) return {{"level", *n.level}};
    return {{"knobs", n.knobs}};
}

} // namespace

ExpertRuleTree expert_tree_from_json(const nlohmann::json& doc) {
    ExpertRuleTree tree;
    parse_rule(doc, tree);
    return tree;
}

nlohmann::json expert_tree_to_json(const ExpertRuleTree& rules) {
    if (rules.nodes.empty()) return nullptr;
    return rule_to_json(rules, 0);
}

ExpertRuleTree load_expert_tree(const std::filesystem::path& path) {
    return expert_tree_from_json(read_json_file(path));
}

SoftTree init_from_expert_tree(const ExpertRuleTree& rules, std::span<const std::string> feature_names,
                               const ExpertInit& init) {
    if (rules.nodes.empty()) throw ConfigError("empty expert tree");
    if (!(init.alpha > 0.0)) throw ConfigError("expert init alpha must be positive");
    const int depth = rules.depth();
    if (depth > init.height)
        throw ConfigError(fmt::format("expert tree depth {} exceeds tree height {}", depth, init.height));

    SoftTree tree(init.height, feature_names.size(), init.output_dim);
    const std::size_t inner = tree.inner_count();

    auto leaf_vector = [&](const ExpertRuleTree::Node& n) {
        std::vector<double> v(init.output_dim, 0.0);
        if (n.level) {
            if (static_cast<std::size_t>(*n.level) >= init.output_dim)
                throw ConfigError(fmt::format("expert leaf level {} needs output dimension > {}", *n.level, *n.level));
            v[static_cast<std::size_t>(*n.level)] = 1.0;
            return v;
        }
        if (n.knobs.size() != init.output_dim)
            throw ConfigError(fmt::format("expert knob payload has {} values, tree output has {}", n.knobs.size(),
                                          init.output_dim));
        for (std::size_t o = 0; o < v.size(); ++o) {
            if (init.knob_encoding == KnobLeafEncoding::logit) {
                const double u = std::clamp(n.knobs[o], 1e-3, 1.0 - 1e-3);
                v[o] = std::log(u / (1.0 - u));
            } else {
                v[o] = n.knobs[o];
            }
        }
        return v;
    };

    const std::vector<double> zeros(feature_names.size(), 0.0);
    std::function<void(std::size_t, int)> fill = [&](std::size_t pos, int rule_idx) {
        const auto& rule = rules.nodes.at(static_cast<std::size_t>(rule_idx));
        if (pos >= inner) {
            tree.set_leaf(pos - inner, leaf_vector(rule));
            return;
        }
        if (rule.is_leaf) {
            tree.set_node(pos, zeros, 0.0, init.alpha);
            fill(2 * pos + 1, rule_idx);
            fill(2 * pos + 2, rule_idx);
            return;
        }
        const auto it = std::find(feature_names.begin(), feature_names.end(), rule.feature);
        if (it == feature_names.end()) throw ConfigError(fmt::format("expert rule on unknown feature '{}'", rule.feature));
        std::vector<double> w = zeros;
        w[static_cast<std::size_t>(it - feature_names.begin())] = 1.0;
        tree.set_node(pos, w, rule.threshold, init.alpha);
        fill(2 * pos + 1, rule.high);
        fill(2 * pos + 2, rule.low);
    };
    fill(0, 0);
    return tree;
}

// ---------------------------------------------------------------------------

nlohmann::json tree_to_json(const SoftTree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (std::size_t i = 0; i < tree.inner_count(); ++i) {
        auto w = tree.weights(i);
        nodes.push_back({{"w", std::vector<double>(w.begin(), w.end())},
                         {"c", tree.threshold(i)},
                         {"log_alpha", tree.parameters()[tree.log_alpha_offset(i)]}});
    }
    nlohmann::json leaves = nlohmann::json::array();
    for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
        auto v = tree.leaf(j);
        leaves.push_back(std::vector<double>(v.begin(), v.end()));
    }
    return {{"height", tree.height()},
            {"input_dim", tree.input_dim()},
            {"output_dim", tree.output_dim()},
            {"weighting", tree.weighting() == NodeWeighting::linear ? "linear" : "gumbel_softmax"},
            {"gumbel_temperature", tree.gumbel_temperature()},
            {"nodes", nodes},
            {"leaves", leaves}};
}

SoftTree tree_from_json(const nlohmann::json& doc) {
    try {
        SoftTree tree(doc.at("height").get<int>(), doc.at("input_dim").get<std::size_t>(),
                      doc.at("output_dim").get<std::size_t>());
        const auto mode = doc.value("weighting", std::string("linear"));
        if (mode != "linear" && mode != "gumbel_softmax") throw ConfigError("unknown tree weighting '" + mode + "'");
        tree.set_weighting(mode == "linear" ? NodeWeighting::linear : NodeWeighting::gumbel_softmax,
                           doc.value("gumbel_temperature", 1.0));

        const auto& nodes = doc.at("nodes");
        const auto& leaves = doc.at("leaves");
        if (nodes.size() != tree.inner_count() || leaves.size() != tree.leaf_count())
            throw ConfigError("tree checkpoint node/leaf counts do not match its height");
        std::vector<double> params(tree.parameter_count());
        for (std::size_t i = 0; i < tree.inner_count(); ++i) {
            const auto w = nodes[i].at("w").get<std::vector<double>>();
            if (w.size() != tree.input_dim()) throw ConfigError("tree checkpoint weight size mismatch");
            std::copy(w.begin(), w.end(), params.begin() + static_cast<std::ptrdiff_t>(tree.weight_offset(i)));
            params[tree.threshold_offset(i)] = nodes[i].at("c").get<double>();
            params[tree.log_alpha_offset(i)] = nodes[i].at("log_alpha").get<double>();
        }
        for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
            const auto v = leaves[j].get<std::vector<double>>();
            if (v.size() != tree.output_dim()) throw ConfigError("tree checkpoint leaf size mismatch");
            std::copy(v.begin(), v.end(), params.begin() + static_cast<std::ptrdiff_t>(tree.leaf_offset(j)));
        }
        tree.set_parameters(params);
        return tree;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("tree checkpoint: {}", e.what()));
    } catch (const DataError& e) {
        throw ConfigError(fmt::format("tree checkpoint: {}", e.what()));
    }
}

} // namespace arbortune

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arbortune/error.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/softtree.hpp"

namespace arbortune {

/// One axis-aligned test. Unflipped nodes ask `metric >= threshold`,
/// flipped nodes (negative selected weight) ask `metric <= threshold`. A
/// satisfied test, including equality, goes to the left ("yes") child.
struct HardNode {
    std::size_t feature = 0;
    std::string feature_name;
    double threshold = 0.0;          // normalized metric units
    double threshold_physical = 0.0; // metric units
    bool flip = false;
    bool uninformative = false; // all weights zero; traversal always goes left

    bool operator==(const HardNode&) const = default;
};

struct HardLeaf {
    std::vector<double> normalized; // sigmoid-squashed actor output
    KnobVector physical;            // tuned knobs, physical units

    bool operator==(const HardLeaf& o) const { return normalized == o.normalized && physical.values == o.physical.values; }
};

struct HardTree {
    int height = 0;
    std::vector<HardNode> nodes; // level ordered like SoftTree
    std::vector<HardLeaf> leaves;
    MetricSchema metrics;
    KnobSchema knobs; // the tuned knobs, in leaf payload order

    bool operator==(const HardTree&) const = default;
};

/// Per node: k* = argmax_k |w_k| over the noise-free weights (first index on
/// ties), threshold c / w_k*, flip when w_k* < 0. Leaves are squashed with a
/// sigmoid and denormalized through `knobs`.
HardTree discretize(const SoftTree& actor, const MetricSchema& metrics, const KnobSchema& knobs);

struct DecisionStep {
    std::size_t node = 0;
    std::string metric;
    std::string comparator; // ">=", "<=" or "none" for uninformative nodes
    double threshold = 0.0; // physical
    double observed = 0.0;  // physical
    bool satisfied = true;  // branch taken: left when satisfied
};

struct DecisionPath {
    std::vector<DecisionStep> steps; // exactly `height` entries
    std::size_t leaf = 0;
    HardLeaf payload;
    std::optional<double> soft_probability; // fidelity hint from the soft tree
};

/// Traversal on a physical metric vector. Throws DataError when the state
/// does not cover the tree's metric schema.
DecisionPath trace_decision(const HardTree& tree, const MetricVector& state);

/// Traversal on a normalized state.
DecisionPath trace_decision_normalized(const HardTree& tree, std::span<const double> state);

/// Leaf index reached by the hard tree.
std::size_t hard_leaf(const HardTree& tree, std::span<const double> state_normalized);

/// Adds the soft tree's path probability of the traced leaf.
void attach_fidelity(DecisionPath& path, const SoftTree& actor, std::span<const double> state_normalized);

enum class RenderFormat { text, dot, json };

RenderFormat parse_render_format(const std::string& name);

std::string render(const HardTree& tree, RenderFormat format, const DecisionPath* path = nullptr);

nlohmann::json hard_tree_to_json(const HardTree& tree);
HardTree hard_tree_from_json(const nlohmann::json& doc);
nlohmann::json path_to_json(const DecisionPath& path, const HardTree& tree);

} // namespace arbortune

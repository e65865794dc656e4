#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace arbortune {

class Rng;

/// How inner-node weight vectors enter the routing test.
enum class NodeWeighting {
    linear,         // w used as stored
    gumbel_softmax, // softmax((w + g) / tau) while training, softmax(w / tau) otherwise
};

/// Complete binary soft decision tree.
///
/// Inner nodes are level ordered: node i (0-based) has children 2i+1 and
/// 2i+2, positions >= inner_count() are leaves. Node i routes an input x to
/// its left child with probability D_i = sigmoid(alpha_i * (w_i . x - c_i))
/// and to the right child with 1 - D_i. The output is the path-probability
/// weighted sum of leaf vectors.
///
/// All parameters live in one flat vector, node-major:
///   node i: [w_0 .. w_{in-1}, c, log(alpha)]   then   leaf j: [v_0 .. v_{out-1}]
/// Gradients, optimizer state and checkpoints share this layout.
class SoftTree {
  public:
    SoftTree() = default;
    /// All weights, thresholds and leaves zero; alpha = 1.
    SoftTree(int height, std::size_t input_dim, std::size_t output_dim);

    /// w ~ U(-0.1, 0.1), c ~ U(0.4, 0.6), leaves ~ U(-0.05, 0.05), fixed alpha.
    static SoftTree random_init(int height, std::size_t input_dim, std::size_t output_dim, double alpha,
                                std::uint64_t seed);

    int height() const noexcept { return height_; }
    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t output_dim() const noexcept { return output_dim_; }
    std::size_t inner_count() const noexcept { return (std::size_t{1} << height_) - 1; }
    std::size_t leaf_count() const noexcept { return std::size_t{1} << height_; }
    std::size_t parameter_count() const noexcept { return params_.size(); }

    std::size_t node_stride() const noexcept { return input_dim_ + 2; }
    std::size_t weight_offset(std::size_t node) const noexcept { return node * node_stride(); }
    std::size_t threshold_offset(std::size_t node) const noexcept { return node * node_stride() + input_dim_; }
    std::size_t log_alpha_offset(std::size_t node) const noexcept {
        return node * node_stride() + input_dim_ + 1;
    }
    std::size_t leaf_offset(std::size_t leaf) const noexcept {
        return inner_count() * node_stride() + leaf * output_dim_;
    }

    std::span<const double> weights(std::size_t node) const;
    double threshold(std::size_t node) const;
    double alpha(std::size_t node) const;
    std::span<const double> leaf(std::size_t leaf) const;

    /// Throws DataError for size mismatch or alpha <= 0.
    void set_node(std::size_t node, std::span<const double> w, double threshold, double alpha);
    void set_leaf(std::size_t leaf, std::span<const double> value);

    std::span<const double> parameters() const noexcept { return params_; }
    /// Replaces every parameter; throws DataError on size mismatch or non-finite values.
    void set_parameters(std::span<const double> params);

    NodeWeighting weighting() const noexcept { return weighting_; }
    double gumbel_temperature() const noexcept { return gumbel_temperature_; }
    void set_weighting(NodeWeighting mode, double temperature = 1.0);

    /// Changes whenever a parameter is written; traces remember it.
    std::uint64_t revision() const noexcept { return revision_; }

    bool same_shape(const SoftTree& other) const noexcept {
        return height_ == other.height_ && input_dim_ == other.input_dim_ && output_dim_ == other.output_dim_;
    }

  private:
    void touch();

    int height_ = 0;
    std::size_t input_dim_ = 0;
    std::size_t output_dim_ = 0;
    NodeWeighting weighting_ = NodeWeighting::linear;
    double gumbel_temperature_ = 1.0;
    std::vector<double> params_;
    std::uint64_t revision_ = 0;
};

/// Per-node Gumbel noise for one forward pass: inner_count x input_dim values.
struct GumbelNoise {
    std::vector<double> values;
};

GumbelNoise sample_gumbel_noise(const SoftTree& tree, Rng& rng);

struct ForwardTrace {
    std::uint64_t revision = 0;
    std::vector<double> input;
    std::vector<double> effective_weights; // inner x input_dim
    std::vector<double> logit;             // z_i = alpha_i (w_i . x - c_i)
    std::vector<double> activation;        // D_i = sigmoid(z_i), left-branch probability
    std::vector<double> reach;             // probability of arriving at inner node i
    std::vector<double> leaf_probability;  // sums to 1
    std::vector<double> subtree_value;     // inner x output_dim, bottom-up recursion values
    std::vector<double> output;
    bool perturbed = false;
};

/// Full forward pass. `noise` applies only to gumbel_softmax trees.
/// Throws DataError on dimension mismatch or non-finite input.
ForwardTrace forward(const SoftTree& tree, std::span<const double> x, const GumbelNoise* noise = nullptr);

/// Output only, via the bottom-up level recursion
///   iter_j <- D_j * iter_{2j} + (1 - D_j) * iter_{2j+1}.
std::vector<double> evaluate(const SoftTree& tree, std::span<const double> x);

/// Output only, via the explicit sum over leaves of leaf value times the
/// product of branch probabilities on its path.
std::vector<double> evaluate_leaf_sum(const SoftTree& tree, std::span<const double> x);

/// Gradient of dot(grad_out, output) with respect to every parameter, in the
/// flat layout. The steepness slot holds d/d(log alpha). Throws DataError if
/// the trace came from a different revision of the tree.
std::vector<double> backward(const SoftTree& tree, const ForwardTrace& trace, std::span<const double> grad_out);

/// Same as backward but adds into `grad`.
void backward_accumulate(const SoftTree& tree, const ForwardTrace& trace, std::span<const double> grad_out,
                         std::span<double> grad);

/// Effective (noise-free) weight vector of one node: w for linear trees, softmax(w / tau) otherwise.
std::vector<double> effective_node_weights(const SoftTree& tree, std::size_t node);

/// softmax((log_softmax(w) + g) / temperature) with g ~ Gumbel(0,1) drawn from `seed`.
std::vector<double> gumbel_weights(std::span<const double> w, double temperature, std::uint64_t seed);
/// Same with caller-supplied noise.
std::vector<double> gumbel_weights(std::span<const double> w, double temperature, std::span<const double> noise);

double sigmoid(double z);

// ---------------------------------------------------------------------------
// Expert rule trees

/// Hand-written rule tree. Internal nodes test `feature >= threshold`
/// (threshold in normalized units): satisfied routes to `high`, otherwise to
/// `low`. Leaves carry a performance level or a normalized knob vector.
struct ExpertRuleTree {
    struct Node {
        bool is_leaf = false;
        std::string feature;
        double threshold = 0.0;
        int low = -1;
        int high = -1;
        std::optional<int> level;
        std::vector<double> knobs;
    };
    std::vector<Node> nodes; // nodes[0] is the root

    int depth() const;
};

ExpertRuleTree expert_tree_from_json(const nlohmann::json& doc);
nlohmann::json expert_tree_to_json(const ExpertRuleTree& rules);
ExpertRuleTree load_expert_tree(const std::filesystem::path& path);

enum class KnobLeafEncoding {
    raw,   // knob payload copied into the leaf
    logit, // logit(u) so that a sigmoid-squashed output reproduces u
};

struct ExpertInit {
    int height = 4;
    double alpha = 100.0;
    std::size_t output_dim = 5;
    KnobLeafEncoding knob_encoding = KnobLeafEncoding::raw;
};

/// Converts a rule tree into a soft tree: each rule becomes a node with a
/// one-hot weight at its feature, threshold c, and steepness alpha. The
/// satisfied (high) branch is the left child. Rule leaves above the target
/// depth are padded with pass-through nodes (w = 0, c = 0) whose leaves all
/// repeat the payload. Level payloads become one-hot vectors.
/// Throws ConfigError for unknown features, depth overflow, bad payloads.
SoftTree init_from_expert_tree(const ExpertRuleTree& rules, std::span<const std::string> feature_names,
                               const ExpertInit& init);

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json tree_to_json(const SoftTree& tree);
SoftTree tree_from_json(const nlohmann::json& doc);

} // namespace arbortune

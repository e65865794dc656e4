#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "arbortune/adam.hpp"
#include "arbortune/env.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/random.hpp"
#include "arbortune/softtree.hpp"

namespace arbortune {

// ---------------------------------------------------------------------------
// Rewards

enum class Orientation { higher_better, lower_better };

/// Relative change, signed so that positive always means improvement.
/// Throws DataError unless reference > 0.
double compute_delta(double current, double reference, Orientation orientation);

/// delta_t0 > 0:  ((1 + d0)^2 - 1) * |1 + d1|
/// delta_t0 <= 0: -((1 - d0)^2 - 1) * |1 - d1|
double reward_component(double delta_t0, double delta_tt1);

/// C_T * r_T + C_L * r_L. Throws ConfigError unless both weights are >= 0
/// and sum to 1 within 1e-9.
double combined_reward(double r_t, double r_l, double c_t, double c_l);

// ---------------------------------------------------------------------------
// Replay

struct Transition {
    std::vector<double> state;
    std::vector<double> action;
    double reward = 0.0;
    std::vector<double> next_state;
    bool done = false;
};

/// Fixed-capacity FIFO ring: once full, every push evicts the oldest entry.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(std::size_t capacity = 100000);

    void push(Transition t);
    std::size_t size() const noexcept { return items_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    bool empty() const noexcept { return items_.empty(); }
    std::uint64_t total_pushed() const noexcept { return pushed_; }

    /// i = 0 is the oldest stored transition.
    const Transition& at(std::size_t i) const;

    /// Uniform sample with replacement. Throws DataError when empty.
    std::vector<Transition> sample(std::size_t count, Rng& rng) const;

  private:
    std::size_t capacity_;
    std::vector<Transition> items_;
    std::size_t head_ = 0; // index of the oldest entry once full
    std::uint64_t pushed_ = 0;
};

// ---------------------------------------------------------------------------
// Critic: Q(s, a) = W3 relu(W2 relu(W1 [s;a] + b1) + b2) + b3

class Critic {
  public:
    Critic() = default;
    Critic(std::size_t state_dim, std::size_t action_dim, std::size_t hidden1, std::size_t hidden2,
           std::uint64_t seed);

    std::size_t state_dim() const noexcept { return state_dim_; }
    std::size_t action_dim() const noexcept { return action_dim_; }
    std::size_t input_dim() const noexcept { return state_dim_ + action_dim_; }
    std::size_t hidden1() const noexcept { return h1_; }
    std::size_t hidden2() const noexcept { return h2_; }

    std::span<const double> parameters() const noexcept { return params_; }
    std::span<double> parameters() noexcept { return params_; }
    void set_parameters(std::span<const double> p);
    std::size_t parameter_count() const noexcept { return params_.size(); }

    bool same_shape(const Critic& o) const noexcept {
        return state_dim_ == o.state_dim_ && action_dim_ == o.action_dim_ && h1_ == o.h1_ && h2_ == o.h2_;
    }

    struct Cache {
        Eigen::MatrixXd input; // input_dim x batch
        Eigen::MatrixXd hidden1;
        Eigen::MatrixXd hidden2;
        Eigen::RowVectorXd q;
    };

    /// Columns of `input` are [state; action].
    Cache forward(const Eigen::MatrixXd& input) const;
    double q(std::span<const double> state, std::span<const double> action) const;

    /// Gradient of sum_b dq_b * q_b. Parameter gradient is added into
    /// `grad` when given, input gradient written to `dinput` when given.
    void backward(const Cache& cache, const Eigen::RowVectorXd& dq, std::vector<double>* grad,
                  Eigen::MatrixXd* dinput) const;

  private:
    std::size_t state_dim_ = 0, action_dim_ = 0, h1_ = 0, h2_ = 0;
    std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0;
    std::vector<double> params_;
};

nlohmann::json critic_to_json(const Critic& c);
Critic critic_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Agent

struct AgentHyper {
    double gamma = 0.99;
    double tau = 0.005;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t buffer_capacity = 100000;
    double noise_start = 0.2; // Gaussian exploration std, decays linearly over the session
    double noise_end = 0.02;
    double c_t = 0.5;
    double c_l = 0.5;
    std::optional<std::size_t> warmup_steps; // uniform random actions; default 10 * batch_size
    std::size_t updates_per_step = 1;
    std::size_t critic_hidden1 = 128;
    std::size_t critic_hidden2 = 128;
    int actor_height = 5;
    double actor_alpha = 5.0;         // initial steepness for randomly initialized actors
    double gumbel_temperature = 1.0;
    std::uint64_t seed = 0;

    std::size_t warmup() const noexcept { return warmup_steps.value_or(10 * batch_size); }
    /// Throws ConfigError on any out-of-range field.
    void validate() const;
};

AgentHyper hyper_from_json(const nlohmann::json& doc, AgentHyper base = {});
nlohmann::json hyper_to_json(const AgentHyper& h);

struct Agent {
    AgentHyper hyper;
    SoftTree actor;
    SoftTree actor_target;
    Critic critic;
    Critic critic_target;
    Adam actor_opt;
    Adam critic_opt;
    ReplayBuffer buffer;
    Rng rng;

    /// Targets start as copies of the online networks. The actor is switched
    /// to Gumbel-Softmax node weighting.
    Agent(SoftTree actor_tree, const AgentHyper& h);
};

/// Randomly initialized actor for `state_dim` metrics and `action_dim` knobs.
SoftTree make_random_actor(std::size_t state_dim, std::size_t action_dim, const AgentHyper& h);

/// Actor from an expert rule tree over metric names with normalized knob
/// payloads. Rule weights become dominant logits, so the noise-free
/// softmax puts at least 0.999 of a node's weight on the rule's metric.
SoftTree make_expert_actor(const ExpertRuleTree& rules, std::span<const std::string> metric_names,
                           std::size_t action_dim, const AgentHyper& h);

/// sigmoid(actor(state)) + N(0, noise_scale^2) per component, clamped to
/// [0,1]. Uses the noise-free tree. Deterministic for noise_scale = 0.
std::vector<double> select_action(const SoftTree& actor, std::span<const double> state, double noise_scale,
                                  std::uint64_t seed);

/// Deterministic policy output sigmoid(actor(state)) on the noise-free tree.
std::vector<double> policy_action(const SoftTree& actor, std::span<const double> state);

struct UpdateStats {
    double critic_loss = 0.0;     // mean squared TD error before the step
    double actor_objective = 0.0; // mean Q(s, actor(s)) before the step
};

/// One critic step on the TD error against the target networks, then one
/// actor step ascending Q through the critic. Targets are not modified.
/// Throws RuntimeFault on non-finite losses.
UpdateStats ddpg_update(Agent& agent, std::span<const Transition> batch);

/// TD targets r + gamma (1 - done) Q'(s', mu'(s')).
std::vector<double> td_targets(const Agent& agent, std::span<const Transition> batch);

/// Mean Q(s, sigmoid(actor(s))) over states and its gradient with respect to
/// the actor parameters. `noise` (one per state) enables Gumbel perturbation.
double actor_objective(const SoftTree& actor, const Critic& critic, std::span<const std::vector<double>> states,
                       std::vector<double>* grad = nullptr, const std::vector<GumbelNoise>* noise = nullptr);

void soft_update(std::span<double> target, std::span<const double> online, double tau);
void soft_update(SoftTree& target, const SoftTree& online, double tau);
void soft_update(Critic& target, const Critic& online, double tau);

// ---------------------------------------------------------------------------
// Sessions

struct TraceRow {
    std::size_t step = 0;
    double throughput = 0.0;
    double latency = 0.0;
    double reward = 0.0;
    std::vector<double> action; // normalized, selected knobs
    KnobVector knobs;           // physical, full schema
};

struct EpisodeResult {
    std::vector<Transition> transitions;
    std::vector<TraceRow> trace;
    double initial_throughput = 0.0;
    double initial_latency = 0.0;
    bool truncated = false;
    std::string truncation_reason;
    std::optional<std::size_t> best_step; // index into trace with the highest throughput
};

/// Expands a normalized action on the selected knobs to a physical
/// configuration with every other knob at its default.
KnobVector deploy_knobs(const KnobSchema& schema, std::span<const std::size_t> selected,
                        std::span<const double> action);

/// Runs one tuning session of max_steps environment steps. Environment
/// failures end the session early with `truncated` set.
EpisodeResult run_episode(Agent& agent, Environment& env, std::span<const std::size_t> selected,
                          std::size_t max_steps);

std::string trace_to_csv(const EpisodeResult& result);

// ---------------------------------------------------------------------------
// Actor checkpoints

struct ActorCheckpoint {
    SoftTree actor;
    KnobSchema knob_schema;
    std::vector<std::size_t> selected;
    MetricSchema metric_schema;
    std::optional<KnobVector> best_knobs;
    std::optional<double> best_throughput;
};

nlohmann::json checkpoint_to_json(const ActorCheckpoint& ckpt);
ActorCheckpoint checkpoint_from_json(const nlohmann::json& doc);

} // namespace arbortune

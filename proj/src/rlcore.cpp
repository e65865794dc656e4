#include "arbortune/rlcore.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace arbortune {

double compute_delta(double current, double reference, Orientation orientation) {
    if (!(reference > 0.0)) throw DataError(fmt::format("performance delta needs a positive reference, got {}", reference));
    return orientation == Orientation::higher_better ? (current - reference) / reference
                                                     : (reference - current) / reference;
}

double reward_component(double delta_t0, double delta_tt1) {
    if (delta_t0 > 0.0) return ((1.0 + delta_t0) * (1.0 + delta_t0) - 1.0) * std::abs(1.0 + delta_tt1);
    return -((1.0 - delta_t0) * (1.0 - delta_t0) - 1.0) * std::abs(1.0 - delta_tt1);
}

double combined_reward(double r_t, double r_l, double c_t, double c_l) {
    if (!(c_t >= 0.0) || !(c_l >= 0.0) || std::abs(c_t + c_l - 1.0) > 1e-9)
        throw ConfigError(fmt::format("reward weights must be non-negative and sum to 1 (got {} + {})", c_t, c_l));
    return c_t * r_t + c_l * r_l;
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 4096));
}

void ReplayBuffer::push(Transition t) {
    ++pushed_;
    if (items_.size() < capacity_) {
        items_.push_back(std::move(t));
        return;
    }
    items_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
    if (i >= items_.size()) throw DataError("replay buffer index out of range");
    return items_[(head_ + i) % items_.size()];
}

std::vector<Transition> ReplayBuffer::sample(std::size_t count, Rng& rng) const {
    if (items_.empty()) throw DataError("cannot sample from an empty replay buffer");
    std::vector<Transition> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(items_[rng.index(items_.size())]);
    return out;
}

// ---------------------------------------------------------------------------

Critic::Critic(std::size_t state_dim, std::size_t action_dim, std::size_t hidden1, std::size_t hidden2,
               std::uint64_t seed)
    : state_dim_(state_dim), action_dim_(action_dim), h1_(hidden1), h2_(hidden2) {
    if (state_dim + action_dim == 0 || hidden1 == 0 || hidden2 == 0) throw ConfigError("critic dimensions must be positive");
    const std::size_t in = input_dim();
    w1_ = 0;
    b1_ = w1_ + h1_ * in;
    w2_ = b1_ + h1_;
    b2_ = w2_ + h2_ * h1_;
    w3_ = b2_ + h2_;
    b3_ = w3_ + h2_;
    params_.assign(b3_ + 1, 0.0);

    Rng rng(seed);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(h1_));
    for (std::size_t i = w1_; i < w2_; ++i) params_[i] = rng.uniform(-s1, s1);
    for (std::size_t i = w2_; i < w3_; ++i) params_[i] = rng.uniform(-s2, s2);
    for (std::size_t i = w3_; i <= b3_; ++i) params_[i] = rng.uniform(-3e-3, 3e-3);
}

void Critic::set_parameters(std::span<const double> p) {
    if (p.size() != params_.size()) throw DataError("critic parameter size mismatch");
    for (double v : p)
        if (!std::isfinite(v)) throw DataError("critic parameters must be finite");
    std::copy(p.begin(), p.end(), params_.begin());
}

namespace {

using ConstMat = Eigen::Map<const Eigen::MatrixXd>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using Mat = Eigen::Map<Eigen::MatrixXd>;
using Vec = Eigen::Map<Eigen::VectorXd>;

Eigen::Index ix(std::size_t n) { return static_cast<Eigen::Index>(n); }

} // namespace

Critic::Cache Critic::forward(const Eigen::MatrixXd& input) const {
    if (static_cast<std::size_t>(input.rows()) != input_dim()) throw DataError("critic input dimension mismatch");
    const double* p = params_.data();
    ConstMat W1(p + w1_, ix(h1_), ix(input_dim()));
    ConstVec B1(p + b1_, ix(h1_));
    ConstMat W2(p + w2_, ix(h2_), ix(h1_));
    ConstVec B2(p + b2_, ix(h2_));
    ConstMat W3(p + w3_, 1, ix(h2_));

    Cache c;
    c.input = input;
    c.hidden1 = ((W1 * input).colwise() + B1).cwiseMax(0.0);
    c.hidden2 = ((W2 * c.hidden1).colwise() + B2).cwiseMax(0.0);
    c.q = (W3 * c.hidden2).array() + p[b3_];
    return c;
}

double Critic::q(std::span<const double> state, std::span<const double> action) const {
    if (state.size() != state_dim_ || action.size() != action_dim_) throw DataError("critic input dimension mismatch");
    Eigen::MatrixXd x(ix(input_dim()), 1);
    for (std::size_t i = 0; i < state.size(); ++i) x(ix(i), 0) = state[i];
    for (std::size_t i = 0; i < action.size(); ++i) x(ix(state_dim_ + i), 0) = action[i];
    return forward(x).q(0);
}

void Critic::backward(const Cache& cache, const Eigen::RowVectorXd& dq, std::vector<double>* grad,
                      Eigen::MatrixXd* dinput) const {
    if (dq.size() != cache.q.size()) throw DataError("critic backward: batch size mismatch");
    const double* p = params_.data();
    ConstMat W1(p + w1_, ix(h1_), ix(input_dim()));
    ConstMat W2(p + w2_, ix(h2_), ix(h1_));
    ConstMat W3(p + w3_, 1, ix(h2_));

    // dL/d(pre-activation) of each hidden layer
    const Eigen::MatrixXd d2 = (W3.transpose() * dq).cwiseProduct((cache.hidden2.array() > 0.0).cast<double>().matrix());
    const Eigen::MatrixXd d1 = (W2.transpose() * d2).cwiseProduct((cache.hidden1.array() > 0.0).cast<double>().matrix());

    if (grad) {
        if (grad->size() != params_.size()) grad->assign(params_.size(), 0.0);
        double* g = grad->data();
        Mat(g + w1_, ix(h1_), ix(input_dim())) += d1 * cache.input.transpose();
        Vec(g + b1_, ix(h1_)) += d1.rowwise().sum();
        Mat(g + w2_, ix(h2_), ix(h1_)) += d2 * cache.hidden1.transpose();
        Vec(g + b2_, ix(h2_)) += d2.rowwise().sum();
        Mat(g + w3_, 1, ix(h2_)) += dq * cache.hidden2.transpose();
        g[b3_] += dq.sum();
    }
    if (dinput) *dinput = W1.transpose() * d1;
}

nlohmann::json critic_to_json(const Critic& c) {
    return {{"state_dim", c.state_dim()}, {"action_dim", c.action_dim()}, {"hidden1", c.hidden1()},
            {"hidden2", c.hidden2()},     {"parameters", std::vector<double>(c.parameters().begin(), c.parameters().end())}};
}

Critic critic_from_json(const nlohmann::json& doc) {
    try {
        Critic c(doc.at("state_dim").get<std::size_t>(), doc.at("action_dim").get<std::size_t>(),
                 doc.at("hidden1").get<std::size_t>(), doc.at("hidden2").get<std::size_t>(), 0);
        c.set_parameters(doc.at("parameters").get<std::vector<double>>());
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("critic checkpoint: {}", e.what()));
    }
}

// ---------------------------------------------------------------------------

void AgentHyper::validate() const {
    auto unit = [](double v) { return v > 0.0 && v <= 1.0; };
    // gamma = 0 is allowed: a one-step (bandit) critic
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!unit(tau)) throw ConfigError("tau must lie in (0, 1]");
    if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (buffer_capacity == 0) throw ConfigError("buffer capacity must be positive");
    if (!(noise_start >= 0.0) || !(noise_end >= 0.0)) throw ConfigError("noise scales must be >= 0");
    if (!(c_t >= 0.0) || !(c_l >= 0.0) || std::abs(c_t + c_l - 1.0) > 1e-9)
        throw ConfigError(fmt::format("reward weights must be non-negative and sum to 1 (got {} + {})", c_t, c_l));
    if (updates_per_step == 0) throw ConfigError("updates per step must be positive");
    if (critic_hidden1 == 0 || critic_hidden2 == 0) throw ConfigError("critic widths must be positive");
    if (actor_height < 1 || actor_height > 20) throw ConfigError("actor height must lie in [1, 20]");
    if (!(actor_alpha > 0.0)) throw ConfigError("actor alpha must be positive");
    if (!(gumbel_temperature > 0.0)) throw ConfigError("gumbel temperature must be positive");
}

AgentHyper hyper_from_json(const nlohmann::json& doc, AgentHyper h) {
    try {
        h.gamma = doc.value("gamma", h.gamma);
        h.tau = doc.value("tau", h.tau);
        h.actor_lr = doc.value("actor_lr", h.actor_lr);
        h.critic_lr = doc.value("critic_lr", h.critic_lr);
        h.batch_size = doc.value("batch_size", h.batch_size);
        h.buffer_capacity = doc.value("buffer_capacity", h.buffer_capacity);
        h.noise_start = doc.value("noise_start", h.noise_start);
        h.noise_end = doc.value("noise_end", h.noise_end);
        h.c_t = doc.value("c_t", h.c_t);
        h.c_l = doc.value("c_l", h.c_l);
        if (doc.contains("warmup_steps")) h.warmup_steps = doc.at("warmup_steps").get<std::size_t>();
        h.updates_per_step = doc.value("updates_per_step", h.updates_per_step);
        h.critic_hidden1 = doc.value("critic_hidden1", h.critic_hidden1);
        h.critic_hidden2 = doc.value("critic_hidden2", h.critic_hidden2);
        h.actor_height = doc.value("actor_height", h.actor_height);
        h.actor_alpha = doc.value("actor_alpha", h.actor_alpha);
        h.gumbel_temperature = doc.value("gumbel_temperature", h.gumbel_temperature);
        h.seed = doc.value("seed", h.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("agent hyperparameters: {}", e.what()));
    }
    h.validate();
    return h;
}

nlohmann::json hyper_to_json(const AgentHyper& h) {
    return {{"gamma", h.gamma},
            {"tau", h.tau},
            {"actor_lr", h.actor_lr},
            {"critic_lr", h.critic_lr},
            {"batch_size", h.batch_size},
            {"buffer_capacity", h.buffer_capacity},
            {"noise_start", h.noise_start},
            {"noise_end", h.noise_end},
            {"c_t", h.c_t},
            {"c_l", h.c_l},
            {"warmup_steps", h.warmup()},
            {"updates_per_step", h.updates_per_step},
            {"critic_hidden1", h.critic_hidden1},
            {"critic_hidden2", h.critic_hidden2},
            {"actor_height", h.actor_height},
            {"actor_alpha", h.actor_alpha},
            {"gumbel_temperature", h.gumbel_temperature},
            {"seed", h.seed}};
}

Agent::Agent(SoftTree actor_tree, const AgentHyper& h)
    : hyper(h),
      actor(std::move(actor_tree)),
      critic(actor.input_dim(), actor.output_dim(), h.critic_hidden1, h.critic_hidden2, mix_seed(h.seed, 2)),
      buffer(h.buffer_capacity),
      rng(mix_seed(h.seed, 3)) {
    hyper.validate();
    if (actor.height() < 1) throw ConfigError("agent needs a non-empty actor tree");
    if (actor.weighting() != NodeWeighting::gumbel_softmax)
        actor.set_weighting(NodeWeighting::gumbel_softmax, h.gumbel_temperature);
    actor_target = actor;
    critic_target = critic;
    actor_opt = Adam(actor.parameter_count(), {.learning_rate = h.actor_lr});
    critic_opt = Adam(critic.parameter_count(), {.learning_rate = h.critic_lr});
}

SoftTree make_random_actor(std::size_t state_dim, std::size_t action_dim, const AgentHyper& h) {
    if (state_dim == 0 || action_dim == 0) throw ConfigError("actor dimensions must be positive");
    SoftTree t = SoftTree::random_init(h.actor_height, state_dim, action_dim, h.actor_alpha, mix_seed(h.seed, 1));
    t.set_weighting(NodeWeighting::gumbel_softmax, h.gumbel_temperature);
    return t;
}

SoftTree make_expert_actor(const ExpertRuleTree& rules, std::span<const std::string> metric_names,
                           std::size_t action_dim, const AgentHyper& h) {
    ExpertInit init;
    init.height = h.actor_height;
    init.alpha = h.actor_alpha;
    init.output_dim = action_dim;
    init.knob_encoding = KnobLeafEncoding::logit;
    SoftTree t = init_from_expert_tree(rules, metric_names, init);

    // softmax puts 1000/1001 of the mass on the dominant logit
    const std::size_t n = metric_names.size();
    const double dominant = h.gumbel_temperature * std::log(1000.0 * static_cast<double>(std::max<std::size_t>(n - 1, 1)));
    std::vector<double> w(n);
    for (std::size_t node = 0; node < t.inner_count(); ++node) {
        const auto cur = t.weights(node);
        for (std::size_t k = 0; k < n; ++k) w[k] = cur[k] == 1.0 ? dominant : 0.0;
        t.set_node(node, w, t.threshold(node), t.alpha(node));
    }
    t.set_weighting(NodeWeighting::gumbel_softmax, h.gumbel_temperature);
    return t;
}

std::vector<double> policy_action(const SoftTree& actor, std::span<const double> state) {
    auto out = evaluate(actor, state);
    for (auto& v : out) v = sigmoid(v);
    return out;
}

std::vector<double> select_action(const SoftTree& actor, std::span<const double> state, double noise_scale,
                                  std::uint64_t seed) {
    if (!(noise_scale >= 0.0)) throw ConfigError("noise scale must be >= 0");
    auto a = policy_action(actor, state);
    if (noise_scale > 0.0) {
        Rng rng(seed);
        for (auto& v : a) v += noise_scale * rng.normal();
    }
    for (auto& v : a) v = std::clamp(v, 0.0, 1.0);
    return a;
}

namespace {

Eigen::MatrixXd stack_inputs(std::span<const std::vector<double>> states, std::span<const std::vector<double>> actions,
                             std::size_t sdim, std::size_t adim) {
    Eigen::MatrixXd x(ix(sdim + adim), ix(states.size()));
    for (std::size_t b = 0; b < states.size(); ++b) {
        if (states[b].size() != sdim || actions[b].size() != adim) throw DataError("transition dimension mismatch");
        for (std::size_t i = 0; i < sdim; ++i) x(ix(i), ix(b)) = states[b][i];
        for (std::size_t i = 0; i < adim; ++i) x(ix(sdim + i), ix(b)) = actions[b][i];
    }
    return x;
}

} // namespace

std::vector<double> td_targets(const Agent& agent, std::span<const Transition> batch) {
    std::vector<std::vector<double>> next_states, next_actions;
    for (const auto& t : batch) {
        next_states.push_back(t.next_state);
        next_actions.push_back(policy_action(agent.actor_target, t.next_state));
    }
    const auto q_next = agent.critic_target.forward(
        stack_inputs(next_states, next_actions, agent.critic.state_dim(), agent.critic.action_dim()));
    std::vector<double> y(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
        y[b] = batch[b].reward + agent.hyper.gamma * (batch[b].done ? 0.0 : 1.0) * q_next.q(ix(b));
    return y;
}

double actor_objective(const SoftTree& actor, const Critic& critic, std::span<const std::vector<double>> states,
                       std::vector<double>* grad, const std::vector<GumbelNoise>* noise) {
    if (states.empty()) throw DataError("actor objective needs at least one state");
    if (noise && noise->size() != states.size()) throw DataError("one Gumbel noise sample per state is required");
    std::vector<ForwardTrace> traces;
    std::vector<std::vector<double>> actions;
    traces.reserve(states.size());
    for (std::size_t b = 0; b < states.size(); ++b) {
        traces.push_back(forward(actor, states[b], noise ? &(*noise)[b] : nullptr));
        auto a = traces.back().output;
        for (auto& v : a) v = sigmoid(v);
        actions.push_back(std::move(a));
    }
    const auto cache = critic.forward(stack_inputs(states, actions, critic.state_dim(), critic.action_dim()));
    const double n = static_cast<double>(states.size());
    const double objective = cache.q.sum() / n;
    if (grad) {
        Eigen::MatrixXd dinput;
        critic.backward(cache, Eigen::RowVectorXd::Constant(cache.q.size(), 1.0 / n), nullptr, &dinput);
        grad->assign(actor.parameter_count(), 0.0);
        std::vector<double> dout(actor.output_dim());
        for (std::size_t b = 0; b < states.size(); ++b) {
            for (std::size_t o = 0; o < dout.size(); ++o) {
                const double a = actions[b][o];
                dout[o] = dinput(ix(critic.state_dim() + o), ix(b)) * a * (1.0 - a);
            }
            backward_accumulate(actor, traces[b], dout, *grad);
        }
    }
    return objective;
}

UpdateStats ddpg_update(Agent& agent, std::span<const Transition> batch) {
    if (batch.empty()) throw DataError("DDPG update needs a non-empty batch");
    const std::size_t sdim = agent.critic.state_dim();
    const std::size_t adim = agent.critic.action_dim();
    UpdateStats stats;

    // critic: mean squared TD error
    const auto y = td_targets(agent, batch);
    std::vector<std::vector<double>> states, actions;
    for (const auto& t : batch) {
        states.push_back(t.state);
        actions.push_back(t.action);
    }
    const auto cache = agent.critic.forward(stack_inputs(states, actions, sdim, adim));
    const double n = static_cast<double>(batch.size());
    Eigen::RowVectorXd dq(cache.q.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const double err = cache.q(ix(b)) - y[b];
        loss += err * err;
        dq(ix(b)) = 2.0 * err / n;
    }
    stats.critic_loss = loss / n;
    if (!std::isfinite(stats.critic_loss))
        throw RuntimeFault(fmt::format("critic TD loss became non-finite (batch of {})", batch.size()));
    std::vector<double> cgrad(agent.critic.parameter_count(), 0.0);
    agent.critic.backward(cache, dq, &cgrad, nullptr);
    agent.critic_opt.step(agent.critic.parameters(), cgrad);

    // actor: ascend Q(s, mu(s)) through the updated critic
    std::vector<GumbelNoise> noise;
    noise.reserve(states.size());
    for (std::size_t b = 0; b < states.size(); ++b) noise.push_back(sample_gumbel_noise(agent.actor, agent.rng));
    std::vector<double> agrad;
    stats.actor_objective = actor_objective(agent.actor, agent.critic, states, &agrad, &noise);
    if (!std::isfinite(stats.actor_objective)) throw RuntimeFault("actor objective became non-finite");
    for (auto& g : agrad) g = -g;
    std::vector<double> params(agent.actor.parameters().begin(), agent.actor.parameters().end());
    agent.actor_opt.step(params, agrad);
    agent.actor.set_parameters(params);
    return stats;
}

void soft_update(std::span<double> target, std::span<const double> online, double tau) {
    if (target.size() != online.size()) throw DataError("soft update: parameter size mismatch");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("soft update rate must lie in [0, 1]");
    if (tau == 1.0) {
        std::copy(online.begin(), online.end(), target.begin());
        return;
    }
    if (tau == 0.0) return;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = tau * online[i] + (1.0 - tau) * target[i];
}

void soft_update(SoftTree& target, const SoftTree& online, double tau) {
    if (!target.same_shape(online)) throw DataError("soft update: tree shapes differ");
    std::vector<double> p(target.parameters().begin(), target.parameters().end());
    soft_update(p, online.parameters(), tau);
    target.set_parameters(p);
}

void soft_update(Critic& target, const Critic& online, double tau) {
    if (!target.same_shape(online)) throw DataError("soft update: critic shapes differ");
    soft_update(target.parameters(), online.parameters(), tau);
}

// ---------------------------------------------------------------------------

KnobVector deploy_knobs(const KnobSchema& schema, std::span<const std::size_t> selected,
                        std::span<const double> action) {
    if (selected.size() != action.size()) throw DataError("action size does not match selected knob count");
    KnobVector v = schema.defaults();
    const auto sub = schema.subset(selected);
    const auto phys = denormalize(action, sub);
    for (std::size_t i = 0; i < selected.size(); ++i) v.values[selected[i]] = phys.values[i];
    return v;
}

EpisodeResult run_episode(Agent& agent, Environment& env, std::span<const std::size_t> selected,
                          std::size_t max_steps) {
    EpisodeResult result;
    if (max_steps == 0) return result;
    const auto& schema = env.knob_schema();
    const auto& metrics = env.metric_schema();
    if (selected.size() != agent.actor.output_dim())
        throw ConfigError(fmt::format("actor outputs {} knobs, {} selected", agent.actor.output_dim(), selected.size()));
    if (metrics.size() != agent.actor.input_dim())
        throw ConfigError(fmt::format("actor reads {} metrics, environment reports {}", agent.actor.input_dim(),
                                      metrics.size()));
    for (auto j : selected)
        if (j >= schema.size()) throw ConfigError("selected knob index out of range");

    Observation obs;
    try {
        obs = env.reset();
    } catch (const EnvironmentError& e) {
        result.truncated = true;
        result.truncation_reason = e.what();
        return result;
    }
    result.initial_throughput = obs.throughput;
    result.initial_latency = obs.latency_p95;
    std::vector<double> state = normalize_metrics(obs.metrics, metrics);
    double prev_t = obs.throughput, prev_l = obs.latency_p95;

    const auto& h = agent.hyper;
    const std::size_t warmup = h.warmup();
    const KnobSchema tuned = schema.subset(selected);
    for (std::size_t step = 1; step <= max_steps; ++step) {
        const double frac = max_steps > 1 ? static_cast<double>(step - 1) / static_cast<double>(max_steps - 1) : 0.0;
        const double noise_scale = h.noise_start + (h.noise_end - h.noise_start) * frac;
        std::vector<double> action;
        if (step <= warmup) {
            action.resize(selected.size());
            for (auto& v : action) v = agent.rng.uniform();
        } else {
            action = select_action(agent.actor, state, noise_scale, agent.rng.next_u64());
        }
        const KnobVector knobs = deploy_knobs(schema, selected, action);
        // record the action actually applied (integer knobs are rounded)
        KnobVector applied;
        for (auto j : selected) applied.values.push_back(knobs.values[j]);
        action = normalize(applied, tuned);

        Observation next;
        try {
            next = env.step(knobs);
        } catch (const EnvironmentError& e) {
            result.truncated = true;
            result.truncation_reason = e.what();
            break;
        }
        const double r_t = reward_component(compute_delta(next.throughput, result.initial_throughput, Orientation::higher_better),
                                            compute_delta(next.throughput, prev_t, Orientation::higher_better));
        const double r_l = reward_component(compute_delta(next.latency_p95, result.initial_latency, Orientation::lower_better),
                                            compute_delta(next.latency_p95, prev_l, Orientation::lower_better));
        const double reward = combined_reward(r_t, r_l, h.c_t, h.c_l);

        Transition tr;
        tr.state = state;
        tr.action = action;
        tr.reward = reward;
        tr.next_state = normalize_metrics(next.metrics, metrics);
        tr.done = step == max_steps;
        agent.buffer.push(tr);
        result.transitions.push_back(tr);

        result.trace.push_back({step, next.throughput, next.latency_p95, reward, action, knobs});
        if (!result.best_step || next.throughput > result.trace[*result.best_step].throughput)
            result.best_step = result.trace.size() - 1;

        if (step > warmup) {
            for (std::size_t u = 0; u < h.updates_per_step; ++u) {
                const auto batch = agent.buffer.sample(h.batch_size, agent.rng);
                ddpg_update(agent, batch);
                soft_update(agent.actor_target, agent.actor, h.tau);
                soft_update(agent.critic_target, agent.critic, h.tau);
            }
        }
        state = tr.next_state;
        prev_t = next.throughput;
        prev_l = next.latency_p95;
    }
    return result;
}

std::string trace_to_csv(const EpisodeResult& result) {
    std::string out = "step,throughput_tps,latency_p95_ms,reward\n";
    for (const auto& r : result.trace) out += fmt::format("{},{},{},{}\n", r.step, r.throughput, r.latency, r.reward);
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json checkpoint_to_json(const ActorCheckpoint& ckpt) {
    nlohmann::json sel = nlohmann::json::array();
    for (auto j : ckpt.selected) sel.push_back(ckpt.knob_schema[j].name);
    nlohmann::json doc = {{"kind", "tree_actor"},
                          {"knob_schema", schema_to_json(ckpt.knob_schema)},
                          {"selected", sel},
                          {"metric_schema", metric_schema_to_json(ckpt.metric_schema)},
                          {"tree", tree_to_json(ckpt.actor)}};
    if (ckpt.best_knobs) {
        nlohmann::json best = nlohmann::json::object();
        for (std::size_t j = 0; j < ckpt.knob_schema.size(); ++j) best[ckpt.knob_schema[j].name] = ckpt.best_knobs->values[j];
        doc["best"] = {{"knobs", best}, {"throughput_tps", ckpt.best_throughput.value_or(0.0)}};
    }
    return doc;
}

ActorCheckpoint checkpoint_from_json(const nlohmann::json& doc) {
    ActorCheckpoint c;
    try {
        if (doc.value("kind", std::string{}) != "tree_actor") throw ConfigError("not an actor checkpoint (kind != tree_actor)");
        c.knob_schema = schema_from_json(doc.at("knob_schema"));
        c.metric_schema = metric_schema_from_json(doc.at("metric_schema"));
        for (const auto& name : doc.at("selected")) {
            const auto idx = c.knob_schema.index_of(name.get<std::string>());
            if (!idx) throw ConfigError("checkpoint selects unknown knob '" + name.get<std::string>() + "'");
            c.selected.push_back(*idx);
        }
        c.actor = tree_from_json(doc.at("tree"));
        if (doc.contains("best")) {
            KnobVector v;
            for (const auto& k : c.knob_schema.knobs()) v.values.push_back(doc.at("best").at("knobs").at(k.name).get<double>());
            c.best_knobs = v;
            c.best_throughput = doc.at("best").at("throughput_tps").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("actor checkpoint: {}", e.what()));
    }
    if (c.actor.input_dim() != c.metric_schema.size())
        throw ConfigError("actor checkpoint: tree input dimension does not match the metric schema");
    if (c.actor.output_dim() != c.selected.size())
        throw ConfigError("actor checkpoint: tree output dimension does not match the selected knobs");
    return c;
}

} // namespace arbortune

#include "arbortune/cli.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "arbortune/env.hpp"
#include "arbortune/error.hpp"
#include "arbortune/explain.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/predictor.hpp"
#include "arbortune/random.hpp"
#include "arbortune/rlcore.hpp"
#include "arbortune/sampler.hpp"
#include "arbortune/shapley.hpp"

namespace arbortune {

namespace {

// --config files are JSON. Top-level keys set global flags, an object keyed
// by a subcommand name sets that subcommand's flags:
//   {"seed": 7, "tune": {"steps": 100, "env": "sim"}}
class JsonConfig : public CLI::Config {
  public:
    std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
        nlohmann::json doc = nlohmann::json::object();
        for (const auto* opt : app->get_options()) {
            if (opt->get_lnames().empty() || !opt->get_configurable() || opt->count() == 0) continue;
            const auto& res = opt->results();
            doc[opt->get_lnames().front()] = res.size() == 1 ? nlohmann::json(res.front()) : nlohmann::json(res);
        }
        return doc.dump(2);
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(input);
        } catch (const nlohmann::json::parse_error& e) {
            throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
        }
        if (!doc.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        std::vector<CLI::ConfigItem> items;
        collect(doc, {}, items);
        return items;
    }

  private:
    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }

    static void collect(const nlohmann::json& obj, const std::vector<std::string>& parents,
                        std::vector<CLI::ConfigItem>& items) {
        for (const auto& [key, value] : obj.items()) {
            if (value.is_object()) {
                auto p = parents;
                p.push_back(key);
                collect(value, p, items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
    }
};

struct Globals {
    bool verbose = false;
    std::uint64_t seed = 0;
    std::ostream* err = nullptr;

    template <class... Args>
    void log(fmt::format_string<Args...> f, Args&&... args) const {
        if (verbose) *err << fmt::format(f, std::forward<Args>(args)...) << '\n';
    }
};

void write_json(const std::string& path, const nlohmann::json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

std::vector<std::string> split_names(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

SimEnvConfig sim_config_for(const KnobSchema& schema, const std::string& env_config, std::uint64_t seed) {
    if (env_config.empty()) return default_sim_config(schema, seed);
    auto cfg = load_sim_config(env_config);
    if (!(cfg.schema == schema))
        throw ConfigError(fmt::format("environment config '{}' uses a different knob schema", env_config));
    return cfg;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::size_t n = 200;
    std::string schema, out, env_config, adapter_cmd, placement = "random";
    int timeout_ms = 60000;
};

void cmd_sample(const SampleArgs& a, const Globals& g) {
    const auto schema = load_schema(a.schema);
    if (a.n == 0) throw ConfigError("--n must be at least 1");
    const auto placement = a.placement == "midpoint" ? StratumPlacement::midpoint : StratumPlacement::random;
    const auto batch = lhs_sample(schema.size(), a.n, g.seed, placement);

    std::vector<PerfSample> samples;
    samples.reserve(a.n);
    std::optional<SimEnvConfig> sim;
    if (a.adapter_cmd.empty()) sim = sim_config_for(schema, a.env_config, g.seed);
    const AdapterCommand cmd{a.adapter_cmd, std::chrono::milliseconds(a.timeout_ms)};
    for (std::size_t i = 0; i < batch.points.size(); ++i) {
        const KnobVector knobs = denormalize(batch.points[i], schema);
        if (sim) {
            const auto obs = sim_step(*sim, normalize(knobs, schema), i);
            samples.push_back({knobs, obs.metrics, obs.throughput, obs.latency_p95, std::nullopt});
        } else {
            samples.push_back(adapter_step(cmd, schema, knobs, MetricSchema{}));
        }
        if ((i + 1) % 50 == 0) g.log("sampled {}/{}", i + 1, batch.points.size());
    }
    write_text_file(a.out, dataset_to_csv(schema, samples));
    g.log("wrote {} samples to {}", samples.size(), a.out);
}

struct TrainArgs {
    std::string schema, dataset, expert_tree, out, loss_out;
    int height = 4;
    std::optional<double> alpha;
    double sharpness = 10.0;
    std::size_t epochs = 200, batch_size = 32;
    double lr = 1e-3;
};

void cmd_train(const TrainArgs& a, const Globals& g) {
    const auto schema = load_schema(a.schema);
    const auto samples = dataset_from_csv(read_text_file(a.dataset), schema);
    const auto data = build_dataset(samples, schema);

    PredictorModel model;
    model.knob_names = schema.names();
    model.leaf_sharpness = a.sharpness;
    if (!a.expert_tree.empty()) {
        ExpertInit init;
        init.height = a.height;
        init.alpha = a.alpha.value_or(100.0);
        init.output_dim = kLevelCount;
        model.tree = init_from_expert_tree(load_expert_tree(a.expert_tree), model.knob_names, init);
    } else {
        model.tree = SoftTree::random_init(a.height, schema.size(), kLevelCount, a.alpha.value_or(10.0), mix_seed(g.seed, 11));
    }

    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.adam.learning_rate = a.lr;
    cfg.seed = g.seed;
    const auto result = train_predictor(std::move(model), data, cfg);
    g.log("loss {:.6f} -> {:.6f}, training accuracy {:.3f}", result.loss_history.front(), result.loss_history.back(),
          dataset_accuracy(result.model, data));

    auto doc = predictor_to_json(result.model);
    doc["loss_history"] = result.loss_history;
    write_json(a.out, doc);
    if (!a.loss_out.empty()) {
        std::string csv = "epoch,loss\n";
        for (std::size_t e = 0; e < result.loss_history.size(); ++e) csv += fmt::format("{},{}\n", e, result.loss_history[e]);
        write_text_file(a.loss_out, csv);
    }
}

struct RankArgs {
    std::string model, dataset, schema, out, chart_out;
    std::optional<std::size_t> budget;
    std::size_t top_k = 9, background = 50;
};

void cmd_rank(const RankArgs& a, const Globals& g) {
    const auto model = predictor_from_json(read_json_file(a.model));
    const auto schema = load_schema(a.schema);
    if (model.knob_names != schema.names()) throw ConfigError("model was trained on a different knob schema");
    const auto data = build_dataset(dataset_from_csv(read_text_file(a.dataset), schema), schema);
    const std::size_t m = schema.size();
    if (a.top_k < 1 || a.top_k > m) throw ConfigError(fmt::format("--top-k must lie in [1, {}]", m));
    if (a.background == 0) throw ConfigError("--background must be at least 1");

    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(mix_seed(g.seed, 21));
    rng.shuffle(idx.begin(), idx.end());
    std::vector<std::vector<double>> background;
    for (std::size_t i = 0; i < std::min(a.background, idx.size()); ++i) background.push_back(data.inputs[idx[i]]);

    const ScoreSurrogate surrogate(model);
    const ScalarModel f = [&surrogate](std::span<const double> x) { return surrogate(x); };
    KernelShapOptions opts;
    opts.budget = a.budget.value_or(default_budget(m));
    opts.seed = mix_seed(g.seed, 22);
    const auto attributions = explain_rows(f, data.inputs, background, opts);
    const auto report = global_importance(attributions);
    const auto selected = select_knobs(report, a.top_k);

    const auto names = schema.names();
    auto doc = report_to_json(report, names, selected);
    doc["top_k"] = a.top_k;
    doc["budget"] = *opts.budget;
    doc["rows"] = data.size();
    doc["background_rows"] = background.size();
    write_json(a.out, doc);
    if (!a.chart_out.empty()) {
        std::string csv = "rank,knob,importance\n";
        for (std::size_t r = 0; r < m; ++r)
            csv += fmt::format("{},{},{}\n", r + 1, names[report.ranking[r]], report.importance[report.ranking[r]]);
        write_text_file(a.chart_out, csv);
    }
    for (auto j : selected) g.log("selected {} (I = {:.6g})", names[j], report.importance[j]);
}

struct TuneArgs {
    std::string schema, knobs, env = "sim", env_config, adapter_cmd, metrics, actor_tree, hyper;
    std::string checkpoint_out, trace_out;
    int timeout_ms = 60000;
    std::size_t steps = 200;
    std::optional<double> ct, cl, actor_lr, critic_lr, gamma, tau;
    std::optional<std::size_t> batch_size, warmup, updates_per_step;
    std::optional<int> height;
};

std::vector<std::size_t> resolve_knobs(const KnobSchema& schema, const std::string& spec) {
    std::vector<std::string> names;
    if (spec.empty()) {
        names = schema.names();
    } else if (std::filesystem::is_regular_file(spec)) {
        const auto doc = read_json_file(spec);
        try {
            names = doc.at("selected").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(fmt::format("knob report '{}': {}", spec, e.what()));
        }
    } else {
        names = split_names(spec);
    }
    if (names.empty()) throw ConfigError("no knobs selected for tuning");
    std::vector<std::size_t> out;
    for (const auto& n : names) {
        const auto idx = schema.index_of(n);
        if (!idx) throw ConfigError(fmt::format("selected knob '{}' is not in the schema", n));
        if (std::find(out.begin(), out.end(), *idx) != out.end()) throw ConfigError(fmt::format("knob '{}' selected twice", n));
        out.push_back(*idx);
    }
    return out;
}

std::unique_ptr<Environment> make_environment(const KnobSchema& schema, const std::string& kind,
                                              const std::string& env_config, const std::string& adapter_cmd,
                                              const std::string& metrics, int timeout_ms, std::uint64_t seed) {
    if (kind == "sim") return std::make_unique<SimulatedEnvironment>(sim_config_for(schema, env_config, seed));
    if (kind == "adapter") {
        if (adapter_cmd.empty()) throw ConfigError("--env adapter needs --adapter-cmd");
        if (metrics.empty()) throw ConfigError("--env adapter needs --metrics (metric schema file)");
        return std::make_unique<AdapterEnvironment>(AdapterCommand{adapter_cmd, std::chrono::milliseconds(timeout_ms)},
                                                    schema, load_metric_schema(metrics));
    }
    throw ConfigError(fmt::format("unknown environment '{}' (expected sim or adapter)", kind));
}

int cmd_tune(const TuneArgs& a, const Globals& g) {
    const auto schema = load_schema(a.schema);
    const auto selected = resolve_knobs(schema, a.knobs);
    auto env = make_environment(schema, a.env, a.env_config, a.adapter_cmd, a.metrics, a.timeout_ms, g.seed);

    AgentHyper h;
    if (!a.hyper.empty()) h = hyper_from_json(read_json_file(a.hyper));
    h.seed = g.seed;
    if (a.ct) h.c_t = *a.ct;
    if (a.cl) h.c_l = *a.cl;
    if (a.ct && !a.cl) h.c_l = 1.0 - *a.ct;
    if (a.cl && !a.ct) h.c_t = 1.0 - *a.cl;
    if (a.actor_lr) h.actor_lr = *a.actor_lr;
    if (a.critic_lr) h.critic_lr = *a.critic_lr;
    if (a.gamma) h.gamma = *a.gamma;
    if (a.tau) h.tau = *a.tau;
    if (a.batch_size) h.batch_size = *a.batch_size;
    if (a.warmup) h.warmup_steps = *a.warmup;
    if (a.updates_per_step) h.updates_per_step = *a.updates_per_step;
    if (a.height) h.actor_height = *a.height;
    h.validate();

    const auto metric_names = env->metric_schema().names();
    SoftTree actor = a.actor_tree.empty()
                         ? make_random_actor(metric_names.size(), selected.size(), h)
                         : make_expert_actor(load_expert_tree(a.actor_tree), metric_names, selected.size(), h);
    Agent agent(std::move(actor), h);
    g.log("tuning {} of {} knobs for {} steps", selected.size(), schema.size(), a.steps);
    const auto result = run_episode(agent, *env, selected, a.steps);

    ActorCheckpoint ckpt{agent.actor, schema, selected, env->metric_schema(), std::nullopt, std::nullopt};
    if (result.best_step) {
        ckpt.best_knobs = result.trace[*result.best_step].knobs;
        ckpt.best_throughput = result.trace[*result.best_step].throughput;
        g.log("default throughput {:.6g}, best {:.6g} at step {}", result.initial_throughput, *ckpt.best_throughput,
              result.trace[*result.best_step].step);
    }
    auto doc = checkpoint_to_json(ckpt);
    doc["hyper"] = hyper_to_json(h);
    doc["steps"] = result.trace.size();
    doc["truncated"] = result.truncated;
    if (!a.checkpoint_out.empty()) write_json(a.checkpoint_out, doc);
    if (!a.trace_out.empty()) write_text_file(a.trace_out, trace_to_csv(result));
    if (result.truncated) {
        *g.err << "error: session truncated after " << result.trace.size() << " steps: " << result.truncation_reason << '\n';
        return static_cast<int>(ErrorClass::runtime);
    }
    return 0;
}

struct ExplainArgs {
    std::string checkpoint, state, format = "text", out, env = "sim", env_config, adapter_cmd;
    bool from_env = false;
    int timeout_ms = 60000;
};

MetricVector load_state(const std::string& path, const MetricSchema& metrics) {
    const auto doc = read_json_file(path);
    const auto& m = doc.contains("metrics") ? doc.at("metrics") : doc;
    if (!m.is_object()) throw DataError(fmt::format("state file '{}' must map metric names to values", path));
    MetricVector v;
    for (const auto& spec : metrics.metrics()) {
        if (!m.contains(spec.name)) throw DataError(fmt::format("state file '{}' is missing metric '{}'", path, spec.name));
        if (!m.at(spec.name).is_number()) throw DataError(fmt::format("metric '{}' is not a number", spec.name));
        v.values.push_back(m.at(spec.name).get<double>());
    }
    return v;
}

void cmd_explain(const ExplainArgs& a, const Globals& g, std::ostream& out) {
    const auto format = parse_render_format(a.format);
    const auto ckpt = checkpoint_from_json(read_json_file(a.checkpoint));
    const auto tuned = ckpt.knob_schema.subset(ckpt.selected);
    const auto tree = discretize(ckpt.actor, ckpt.metric_schema, tuned);

    std::optional<DecisionPath> path;
    if (!a.state.empty() && a.from_env) throw ConfigError("--state and --from-env are mutually exclusive");
    std::optional<MetricVector> state;
    if (!a.state.empty()) state = load_state(a.state, ckpt.metric_schema);
    if (a.from_env) {
        auto env = make_environment(ckpt.knob_schema, a.env, a.env_config, a.adapter_cmd,
                                    "", a.timeout_ms, g.seed);
        if (!(env->metric_schema().names() == ckpt.metric_schema.names()))
            throw ConfigError("environment metrics do not match the checkpoint");
        state = env->reset().metrics;
    }
    if (state) {
        path = trace_decision(tree, *state);
        attach_fidelity(*path, ckpt.actor, normalize_metrics(*state, ckpt.metric_schema));
        g.log("reached leaf {} (soft path probability {:.4f})", path->leaf, *path->soft_probability);
    }
    const std::string doc = render(tree, format, path ? &*path : nullptr);
    if (a.out.empty()) {
        out << doc;
    } else {
        write_text_file(a.out, doc);
    }
}

} // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Explainable database knob tuning: sample, train-predictor, rank, tune, explain",
                 argv.empty() ? "arbortune" : argv.front()};
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON file supplying flag values; explicit flags win");
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    g.err = &err;
    app.add_flag("--verbose,-v", g.verbose, "Progress messages on stderr");
    app.add_option("--seed", g.seed, "Seed for every random stream")->capture_default_str();

    SampleArgs sa;
    auto* sample = app.add_subcommand("sample", "Latin hypercube sample of the knob space, measured into a dataset");
    sample->add_option("--n", sa.n, "Number of configurations")->capture_default_str();
    sample->add_option("--schema", sa.schema, "Knob schema (JSON)");
    sample->add_option("--out", sa.out, "Dataset CSV to write");
    sample->add_option("--env-config", sa.env_config, "Simulated environment config (JSON)");
    sample->add_option("--adapter-cmd", sa.adapter_cmd, "Measure through an adapter command instead");
    sample->add_option("--adapter-timeout-ms", sa.timeout_ms, "Adapter timeout per step")->capture_default_str();
    sample->add_option("--placement", sa.placement, "Within-stratum placement")
        ->check(CLI::IsMember({"random", "midpoint"}))
        ->capture_default_str();

    TrainArgs ta;
    auto* train = app.add_subcommand("train-predictor", "Train the performance-level tree on a dataset");
    train->add_option("--schema", ta.schema, "Knob schema (JSON)");
    train->add_option("--dataset", ta.dataset, "Dataset CSV");
    train->add_option("--expert-tree", ta.expert_tree, "Expert rule tree used for initialization (JSON)");
    train->add_option("--height", ta.height, "Tree height")->capture_default_str();
    train->add_option("--alpha", ta.alpha, "Node steepness (default 100 with an expert tree, else 10)");
    train->add_option("--leaf-sharpness", ta.sharpness, "Leaf softmax scale")->capture_default_str();
    train->add_option("--epochs", ta.epochs)->capture_default_str();
    train->add_option("--batch-size", ta.batch_size)->capture_default_str();
    train->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--out", ta.out, "Model file to write (JSON)");
    train->add_option("--loss-out", ta.loss_out, "Per-epoch loss CSV");

    RankArgs ra;
    auto* rank = app.add_subcommand("rank", "Shapley importance ranking of knobs under the predictor");
    rank->add_option("--model", ra.model, "Predictor model (JSON)");
    rank->add_option("--dataset", ra.dataset, "Dataset CSV");
    rank->add_option("--schema", ra.schema, "Knob schema (JSON)");
    rank->add_option("--budget", ra.budget, "Coalitions per row (default min(2^M - 2, 2048))");
    rank->add_option("--top-k", ra.top_k, "Number of knobs to select")->capture_default_str();
    rank->add_option("--background", ra.background, "Background rows for imputation")->capture_default_str();
    rank->add_option("--out", ra.out, "Report to write (JSON)");
    rank->add_option("--chart-out", ra.chart_out, "Bar-chart data (CSV)");

    TuneArgs tu;
    auto* tune = app.add_subcommand("tune", "DDPG tuning session with a tree actor");
    tune->add_option("--schema", tu.schema, "Knob schema (JSON)");
    tune->add_option("--knobs", tu.knobs, "Comma-separated knob names or a rank report; default all");
    tune->add_option("--env", tu.env, "Environment")->check(CLI::IsMember({"sim", "adapter"}))->capture_default_str();
    tune->add_option("--env-config", tu.env_config, "Simulated environment config (JSON)");
    tune->add_option("--adapter-cmd", tu.adapter_cmd, "Adapter command run once per step");
    tune->add_option("--adapter-timeout-ms", tu.timeout_ms)->capture_default_str();
    tune->add_option("--metrics", tu.metrics, "Metric schema for the adapter (JSON)");
    tune->add_option("--steps", tu.steps, "Environment steps")->capture_default_str();
    tune->add_option("--ct", tu.ct, "Throughput reward weight C_T");
    tune->add_option("--cl", tu.cl, "Latency reward weight C_L");
    tune->add_option("--actor-tree", tu.actor_tree, "Expert rule tree for the actor (JSON)");
    tune->add_option("--hyper", tu.hyper, "Agent hyperparameters (JSON)");
    tune->add_option("--actor-lr", tu.actor_lr);
    tune->add_option("--critic-lr", tu.critic_lr);
    tune->add_option("--gamma", tu.gamma);
    tune->add_option("--tau", tu.tau);
    tune->add_option("--batch-size", tu.batch_size);
    tune->add_option("--warmup", tu.warmup, "Random-action steps before updates start");
    tune->add_option("--updates-per-step", tu.updates_per_step);
    tune->add_option("--height", tu.height, "Actor tree height");
    tune->add_option("--checkpoint-out", tu.checkpoint_out, "Actor checkpoint to write (JSON)");
    tune->add_option("--trace-out", tu.trace_out, "Per-step trace (CSV)");

    ExplainArgs ea;
    auto* explain = app.add_subcommand("explain", "Interpretation tree of a trained actor");
    explain->add_option("--checkpoint", ea.checkpoint, "Actor checkpoint (JSON)");
    explain->add_option("--state", ea.state, "Metric values to trace (JSON)");
    explain->add_flag("--from-env", ea.from_env, "Trace the state observed at the default configuration");
    explain->add_option("--env", ea.env)->check(CLI::IsMember({"sim", "adapter"}))->capture_default_str();
    explain->add_option("--env-config", ea.env_config, "Simulated environment config (JSON)");
    explain->add_option("--adapter-cmd", ea.adapter_cmd);
    explain->add_option("--adapter-timeout-ms", ea.timeout_ms)->capture_default_str();
    explain->add_option("--format", ea.format)->check(CLI::IsMember({"text", "dot", "json"}))->capture_default_str();
    explain->add_option("--out", ea.out, "Output file (default stdout)");

    std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return static_cast<int>(ErrorClass::config);
    }

    auto need = [](const std::string& v, const char* flag) {
        if (v.empty()) throw ConfigError(fmt::format("missing required flag {}", flag));
    };
    try {
        if (*sample) {
            need(sa.schema, "--schema");
            need(sa.out, "--out");
            cmd_sample(sa, g);
        } else if (*train) {
            need(ta.schema, "--schema");
            need(ta.dataset, "--dataset");
            need(ta.out, "--out");
            cmd_train(ta, g);
        } else if (*rank) {
            need(ra.model, "--model");
            need(ra.dataset, "--dataset");
            need(ra.schema, "--schema");
            need(ra.out, "--out");
            cmd_rank(ra, g);
        } else if (*tune) {
            need(tu.schema, "--schema");
            return cmd_tune(tu, g);
        } else if (*explain) {
            need(ea.checkpoint, "--checkpoint");
            cmd_explain(ea, g, out);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(e.error_class());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorClass::config);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorClass::runtime);
    }
    return 0;
}

} // namespace arbortune

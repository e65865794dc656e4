#include "arbortune/env.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <map>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

#include "arbortune/random.hpp"

namespace arbortune {

namespace {

const std::vector<std::string> kDefaultMetricNames = {
    "buffer_pages_read", "buffer_pages_written", "buffer_data_read", "dml_inserts",
    "dml_deletes",       "threads_connected",    "lock_waits",       "log_writes",
};

double floor_positive(double v, double floor) { return std::max(v, floor); }

} // namespace

SimEnvConfig finalize(SimEnvConfig cfg) {
    const std::size_t k = cfg.schema.size();
    if (k == 0) throw ConfigError("simulated environment needs a non-empty knob schema");
    if (cfg.influential.empty()) throw ConfigError("simulated environment needs at least one influential knob");
    std::vector<bool> seen(k, false);
    for (const auto& inf : cfg.influential) {
        if (inf.index >= k) throw ConfigError(fmt::format("influential knob index {} out of range", inf.index));
        if (seen[inf.index]) throw ConfigError(fmt::format("influential knob {} listed twice", inf.index));
        seen[inf.index] = true;
        if (!(inf.optimum >= 0.0 && inf.optimum <= 1.0))
            throw ConfigError(fmt::format("influential knob {}: optimum {} outside [0,1]", inf.index, inf.optimum));
        if (!(inf.strength > 0.0) || !std::isfinite(inf.strength))
            throw ConfigError(fmt::format("influential knob {}: strength must be positive", inf.index));
    }
    if (!(cfg.t0 > 0.0) || !(cfg.l0 > 0.0)) throw ConfigError("t0 and l0 must be positive");
    if (!(cfg.noise_std >= 0.0) || !std::isfinite(cfg.noise_std)) throw ConfigError("noise_std must be >= 0");
    if (!(cfg.metric_scale > 0.0)) throw ConfigError("metric_scale must be positive");

    if (cfg.metric_names.empty()) cfg.metric_names = kDefaultMetricNames;
    if (cfg.load.empty()) cfg.load = {0.5, 0.5};
    for (double l : cfg.load)
        if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("load features must lie in [0,1]");

    const std::size_t cols = k + cfg.load.size();
    if (cfg.mixing.empty()) {
        Rng rng(mix_seed(cfg.seed, 0x6d6978));
        cfg.mixing.assign(cfg.metric_names.size(), std::vector<double>(cols));
        for (auto& row : cfg.mixing) {
            for (std::size_t c = 0; c < k; ++c) row[c] = rng.uniform(0.0, 0.5);
            for (std::size_t c = k; c < cols; ++c) row[c] = rng.uniform(0.5, 1.5);
        }
    }
    if (cfg.mixing.size() != cfg.metric_names.size())
        throw ConfigError(fmt::format("mixing matrix has {} rows for {} metrics", cfg.mixing.size(),
                                      cfg.metric_names.size()));
    for (const auto& row : cfg.mixing)
        if (row.size() != cols)
            throw ConfigError(fmt::format("mixing matrix rows need {} columns (knobs + load)", cols));
    return cfg;
}

MetricSchema sim_metric_schema(const SimEnvConfig& cfg) {
    std::vector<MetricSpec> specs;
    for (std::size_t i = 0; i < cfg.metric_names.size(); ++i) {
        double lo = 0.0, hi = 0.0;
        for (double m : cfg.mixing[i]) (m < 0 ? lo : hi) += m;
        lo *= cfg.metric_scale;
        hi *= cfg.metric_scale;
        if (!(lo < hi)) hi = lo + 1.0;
        specs.push_back({cfg.metric_names[i], lo, hi});
    }
    return MetricSchema(std::move(specs));
}

double sim_clean_throughput(const SimEnvConfig& cfg, std::span<const double> knobs) {
    if (knobs.size() != cfg.schema.size())
        throw DataError(fmt::format("simulator expects {} knobs, got {}", cfg.schema.size(), knobs.size()));
    double exponent = 0.0;
    for (const auto& inf : cfg.influential) {
        const double d = knobs[inf.index] - inf.optimum;
        exponent += inf.strength * (1.0 - d * d);
    }
    return cfg.t0 * std::exp(exponent);
}

Observation sim_step(const SimEnvConfig& cfg, std::span<const double> knobs, std::uint64_t step_index) {
    if (knobs.size() != cfg.schema.size())
        throw DataError(fmt::format("simulator expects {} knobs, got {}", cfg.schema.size(), knobs.size()));
    for (double x : knobs)
        if (!(x >= 0.0 && x <= 1.0)) throw DataError(fmt::format("simulator knob value {} outside [0,1]", x));

    Rng rng(mix_seed(cfg.seed, step_index));
    const double clean = sim_clean_throughput(cfg, knobs);
    const double reference = sim_clean_throughput(cfg, normalize(cfg.schema.defaults(), cfg.schema));

    Observation obs;
    const double eta_t = cfg.noise_std * rng.normal();
    const double eta_l = cfg.noise_std * rng.normal();
    obs.throughput = floor_positive(clean * (1.0 + eta_t), 1e-6 * cfg.t0);
    obs.latency_p95 = floor_positive(cfg.l0 * reference / clean * (1.0 + eta_l), 1e-6 * cfg.l0);

    const std::size_t k = knobs.size();
    obs.metrics.values.resize(cfg.metric_names.size());
    for (std::size_t i = 0; i < cfg.metric_names.size(); ++i) {
        double v = 0.0;
        for (std::size_t c = 0; c < k; ++c) v += cfg.mixing[i][c] * knobs[c];
        for (std::size_t c = 0; c < cfg.load.size(); ++c) v += cfg.mixing[i][k + c] * cfg.load[c];
        obs.metrics.values[i] = cfg.metric_scale * v * (1.0 + cfg.noise_std * rng.normal());
    }
    return obs;
}

PlantedOptimum planted_optimum(const SimEnvConfig& cfg) {
    PlantedOptimum p;
    p.knobs = normalize(cfg.schema.defaults(), cfg.schema);
    double exponent = 0.0;
    for (const auto& inf : cfg.influential) {
        p.knobs[inf.index] = inf.optimum;
        exponent += inf.strength;
    }
    p.throughput = cfg.t0 * std::exp(exponent);
    return p;
}

SimEnvConfig default_sim_config(const KnobSchema& schema, std::uint64_t seed) {
    SimEnvConfig cfg;
    cfg.schema = schema;
    cfg.seed = seed;
    cfg.noise_std = 0.01;
    Rng rng(mix_seed(seed, 0x736565));
    const auto defaults = normalize(schema.defaults(), schema);
    const std::size_t n = std::min<std::size_t>(4, schema.size());
    for (std::size_t j = 0; j < n; ++j) {
        // keep the optimum well away from the default position
        double o = defaults[j] < 0.5 ? rng.uniform(0.7, 0.95) : rng.uniform(0.05, 0.3);
        cfg.influential.push_back({j, o, 1.0 - 0.15 * static_cast<double>(j)});
    }
    return finalize(std::move(cfg));
}

SimEnvConfig sim_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
    SimEnvConfig cfg;
    try {
        const auto& schema = doc.at("schema");
        if (schema.is_string()) {
            std::filesystem::path p = schema.get<std::string>();
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            cfg.schema = load_schema(p);
        } else {
            cfg.schema = schema_from_json(schema);
        }
        for (const auto& item : doc.at("influential")) {
            InfluentialKnob inf;
            if (item.contains("name")) {
                const auto idx = cfg.schema.index_of(item.at("name").get<std::string>());
                if (!idx) throw ConfigError("influential knob '" + item.at("name").get<std::string>() + "' not in schema");
                inf.index = *idx;
            } else {
                inf.index = item.at("index").get<std::size_t>();
            }
            inf.optimum = item.at("optimum").get<double>();
            inf.strength = item.at("strength").get<double>();
            cfg.influential.push_back(inf);
        }
        cfg.t0 = doc.value("t0", cfg.t0);
        cfg.l0 = doc.value("l0", cfg.l0);
        cfg.noise_std = doc.value("noise_std", cfg.noise_std);
        cfg.seed = doc.value("seed", cfg.seed);
        cfg.metric_scale = doc.value("metric_scale", cfg.metric_scale);
        if (doc.contains("metrics")) cfg.metric_names = doc.at("metrics").get<std::vector<std::string>>();
        if (doc.contains("load")) cfg.load = doc.at("load").get<std::vector<double>>();
        if (doc.contains("mixing")) cfg.mixing = doc.at("mixing").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("simulated environment config: {}", e.what()));
    }
    return finalize(std::move(cfg));
}

nlohmann::json sim_config_to_json(const SimEnvConfig& cfg) {
    nlohmann::json inf = nlohmann::json::array();
    for (const auto& i : cfg.influential)
        inf.push_back({{"index", i.index}, {"optimum", i.optimum}, {"strength", i.strength}});
    return {{"schema", schema_to_json(cfg.schema)}, {"influential", inf},   {"t0", cfg.t0},
            {"l0", cfg.l0},                         {"noise_std", cfg.noise_std}, {"seed", cfg.seed},
            {"metrics", cfg.metric_names},          {"load", cfg.load},     {"mixing", cfg.mixing},
            {"metric_scale", cfg.metric_scale}};
}

SimEnvConfig load_sim_config(const std::filesystem::path& path) {
    return sim_config_from_json(read_json_file(path), path.parent_path());
}

SimulatedEnvironment::SimulatedEnvironment(SimEnvConfig cfg)
    : cfg_(finalize(std::move(cfg))), metrics_(sim_metric_schema(cfg_)) {}

Observation SimulatedEnvironment::reset() {
    step_ = 0;
    return sim_step(cfg_, normalize(cfg_.schema.defaults(), cfg_.schema), step_++);
}

Observation SimulatedEnvironment::step(const KnobVector& knobs) {
    return sim_step(cfg_, normalize(knobs, cfg_.schema), step_++);
}

// ---------------------------------------------------------------------------

std::string adapter_request(const KnobSchema& schema, const KnobVector& knobs) {
    if (knobs.values.size() != schema.size()) throw DataError("adapter request: knob count mismatch");
    nlohmann::ordered_json doc;
    doc["knobs"] = nlohmann::ordered_json::object();
    for (std::size_t j = 0; j < schema.size(); ++j) doc["knobs"][schema[j].name] = knobs.values[j];
    return doc.dump();
}

PerfSample parse_adapter_response(const std::string& text, const MetricSchema& metrics) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw AdapterMalformedResponse(fmt::format("adapter response is not JSON: {}", e.what()));
    }
    if (!doc.is_object()) throw AdapterMalformedResponse("adapter response must be an object");

    auto number = [&](const char* field) {
        if (!doc.contains(field)) throw AdapterMalformedResponse(fmt::format("adapter response missing '{}'", field));
        if (!doc.at(field).is_number())
            throw AdapterMalformedResponse(fmt::format("adapter response field '{}' is not a number", field));
        const double v = doc.at(field).get<double>();
        if (!(v > 0.0) || !std::isfinite(v))
            throw AdapterMalformedResponse(fmt::format("adapter response field '{}' must be positive, got {}", field, v));
        return v;
    };

    PerfSample s;
    s.throughput = number("throughput_tps");
    s.latency_p95 = number("latency_p95_ms");
    if (!doc.contains("metrics") || !doc.at("metrics").is_object())
        throw AdapterMalformedResponse("adapter response missing 'metrics' object");
    const auto& m = doc.at("metrics");
    auto metric_value = [&](const std::string& name, const nlohmann::json& v) {
        if (!v.is_number() || !std::isfinite(v.get<double>()))
            throw AdapterMalformedResponse(fmt::format("adapter metric '{}' is not a finite number", name));
        return v.get<double>();
    };
    if (metrics.size() == 0) {
        for (const auto& [name, v] : m.items()) s.metrics.values.push_back(metric_value(name, v));
    } else {
        for (const auto& spec : metrics.metrics()) {
            if (!m.contains(spec.name))
                throw AdapterMalformedResponse(fmt::format("adapter response missing metric '{}'", spec.name));
            s.metrics.values.push_back(metric_value(spec.name, m.at(spec.name)));
        }
    }
    return s;
}

namespace {

struct ProcessOutput {
    std::string out;
    std::string err;
    int status = 0;
};

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

ProcessOutput run_process(const std::string& command, const std::string& input, std::chrono::milliseconds timeout) {
    int in_pipe[2], out_pipe[2], err_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0 || ::pipe(err_pipe) != 0)
        throw EnvironmentError(fmt::format("adapter: pipe failed: {}", std::strerror(errno)));

    const pid_t pid = ::fork();
    if (pid < 0) throw EnvironmentError(fmt::format("adapter: fork failed: {}", std::strerror(errno)));
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::dup2(err_pipe[1], STDERR_FILENO);
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) ::close(fd);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::setpgid(pid, pid);
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    set_nonblocking(in_pipe[1]);
    set_nonblocking(out_pipe[0]);
    set_nonblocking(err_pipe[0]);

    // writing to a child that already exited must not kill us
    struct sigaction ignore {}, previous {};
    ignore.sa_handler = SIG_IGN;
    ::sigaction(SIGPIPE, &ignore, &previous);

    ProcessOutput result;
    std::size_t written = 0;
    int fds[3] = {in_pipe[1], out_pipe[0], err_pipe[0]};
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    bool timed_out = false;
    char buf[4096];

    while (fds[1] >= 0 || fds[2] >= 0) {
        const auto remaining =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (remaining.count() <= 0) {
            timed_out = true;
            break;
        }
        pollfd pfd[3];
        int n = 0;
        int which[3];
        for (int i = 0; i < 3; ++i) {
            if (fds[i] < 0) continue;
            pfd[n] = {fds[i], static_cast<short>(i == 0 ? POLLOUT : POLLIN), 0};
            which[n++] = i;
        }
        const int rc = ::poll(pfd, static_cast<nfds_t>(n), static_cast<int>(remaining.count()));
        if (rc < 0 && errno == EINTR) continue;
        if (rc < 0) break;
        for (int p = 0; p < n; ++p) {
            if (pfd[p].revents == 0) continue;
            const int i = which[p];
            if (i == 0) {
                const ssize_t w = ::write(fds[0], input.data() + written, input.size() - written);
                if (w > 0) written += static_cast<std::size_t>(w);
                if (w < 0 && errno != EAGAIN) written = input.size();
                if (written >= input.size()) {
                    ::close(fds[0]);
                    fds[0] = -1;
                }
            } else {
                const ssize_t r = ::read(fds[i], buf, sizeof(buf));
                if (r > 0) {
                    (i == 1 ? result.out : result.err).append(buf, static_cast<std::size_t>(r));
                } else if (r == 0 || errno != EAGAIN) {
                    ::close(fds[i]);
                    fds[i] = -1;
                }
            }
        }
        if (fds[0] >= 0 && input.empty()) {
            ::close(fds[0]);
            fds[0] = -1;
        }
    }
    for (int fd : fds)
        if (fd >= 0) ::close(fd);

    if (timed_out) {
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
    }
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    ::sigaction(SIGPIPE, &previous, nullptr);

    if (timed_out)
        throw AdapterTimeout(fmt::format("adapter '{}' exceeded timeout of {} ms", command, timeout.count()));
    result.status = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
    return result;
}

} // namespace

PerfSample adapter_step(const AdapterCommand& cmd, const KnobSchema& schema, const KnobVector& knobs,
                        const MetricSchema& metrics) {
    if (cmd.command.empty()) throw ConfigError("adapter command is empty");
    if (!conforms(knobs, schema)) throw DataError("adapter step: configuration violates schema bounds");
    const auto result = run_process(cmd.command, adapter_request(schema, knobs), cmd.timeout);
    if (result.status != 0) {
        std::string detail = result.err.substr(0, 512);
        throw AdapterExitFailure(fmt::format("adapter exited with status {}: {}", result.status, detail), result.status);
    }
    PerfSample s = parse_adapter_response(result.out, metrics);
    s.knobs = knobs;
    return s;
}

AdapterEnvironment::AdapterEnvironment(AdapterCommand cmd, KnobSchema schema, MetricSchema metrics)
    : cmd_(std::move(cmd)), schema_(std::move(schema)), metrics_(std::move(metrics)) {
    if (metrics_.size() == 0) throw ConfigError("adapter environment needs a declared metric schema");
}

Observation AdapterEnvironment::reset() { return step(schema_.defaults()); }

Observation AdapterEnvironment::step(const KnobVector& knobs) {
    auto s = adapter_step(cmd_, schema_, knobs, metrics_);
    return {std::move(s.metrics), s.throughput, s.latency_p95};
}

} // namespace arbortune

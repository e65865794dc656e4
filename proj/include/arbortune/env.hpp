#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arbortune/error.hpp"
#include "arbortune/knobspace.hpp"

namespace arbortune {

struct Observation {
    MetricVector metrics;
    double throughput = 0.0;  // transactions/s
    double latency_p95 = 0.0; // ms
};

/// A DBMS under test. reset() deploys the schema defaults.
class Environment {
  public:
    virtual ~Environment() = default;
    virtual const KnobSchema& knob_schema() const = 0;
    virtual const MetricSchema& metric_schema() const = 0;
    virtual Observation reset() = 0;
    virtual Observation step(const KnobVector& knobs) = 0;
};

/// Raised when an environment cannot produce a measurement.
class EnvironmentError : public RuntimeFault {
  public:
    using RuntimeFault::RuntimeFault;
};

class AdapterTimeout : public EnvironmentError {
  public:
    using EnvironmentError::EnvironmentError;
};

class AdapterMalformedResponse : public EnvironmentError {
  public:
    using EnvironmentError::EnvironmentError;
};

class AdapterExitFailure : public EnvironmentError {
  public:
    AdapterExitFailure(const std::string& what, int status) : EnvironmentError(what), status_(status) {}
    int exit_status() const noexcept { return status_; }

  private:
    int status_;
};

// ---------------------------------------------------------------------------
// Simulated DBMS with planted ground truth

struct InfluentialKnob {
    std::size_t index = 0;
    double optimum = 0.5;  // normalized
    double strength = 1.0; // a_j > 0
};

struct SimEnvConfig {
    KnobSchema schema;
    std::vector<InfluentialKnob> influential;
    double t0 = 1000.0;
    double l0 = 10.0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> metric_names;   // defaults when empty
    std::vector<double> load;                // load features in [0,1]; default {0.5, 0.5}
    std::vector<std::vector<double>> mixing; // metrics x (knobs + load); generated from seed when empty
    double metric_scale = 1000.0;
};

/// Fills defaults (metric names, load, mixing matrix) and validates.
/// Throws ConfigError on an empty influential set, bad indices, optima
/// outside [0,1], non-positive strengths, or mismatched mixing shapes.
SimEnvConfig finalize(SimEnvConfig cfg);

SimEnvConfig sim_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json sim_config_to_json(const SimEnvConfig& cfg);
SimEnvConfig load_sim_config(const std::filesystem::path& path);

/// Declared metric ranges implied by the mixing matrix (inputs lie in [0,1]).
MetricSchema sim_metric_schema(const SimEnvConfig& cfg);

/// Noise-free throughput at a normalized configuration.
double sim_clean_throughput(const SimEnvConfig& cfg, std::span<const double> knobs);

/// One measurement at a normalized configuration. Noise is drawn from a
/// stream keyed by (cfg.seed, step_index), so the call is a pure function.
/// Non-influential knobs never change throughput or latency.
Observation sim_step(const SimEnvConfig& cfg, std::span<const double> knobs, std::uint64_t step_index);

struct PlantedOptimum {
    std::vector<double> knobs; // normalized
    double throughput = 0.0;   // noise-free
};

PlantedOptimum planted_optimum(const SimEnvConfig& cfg);

/// The first min(4, k) knobs are influential, strengths 1.0, 0.85, 0.7,
/// 0.55, optima drawn from `seed` on the far side of each default.
/// Noise std 0.01.
SimEnvConfig default_sim_config(const KnobSchema& schema, std::uint64_t seed);

class SimulatedEnvironment final : public Environment {
  public:
    explicit SimulatedEnvironment(SimEnvConfig cfg);

    const KnobSchema& knob_schema() const override { return cfg_.schema; }
    const MetricSchema& metric_schema() const override { return metrics_; }
    Observation reset() override;
    Observation step(const KnobVector& knobs) override;

    const SimEnvConfig& config() const noexcept { return cfg_; }
    std::uint64_t steps_taken() const noexcept { return step_; }

  private:
    SimEnvConfig cfg_;
    MetricSchema metrics_;
    std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Subprocess adapter
//
// Per step the command runs once under /bin/sh. It receives
//   {"knobs": {name: value, ...}}
// on standard input and must print
//   {"metrics": {name: value, ...}, "throughput_tps": real, "latency_p95_ms": real}
// on standard output and exit 0.

struct AdapterCommand {
    std::string command;
    std::chrono::milliseconds timeout{60000};
};

/// Runs one adapter step. Metrics are returned in `metrics` schema order; an
/// empty schema accepts whatever metrics are reported (sorted by name).
PerfSample adapter_step(const AdapterCommand& cmd, const KnobSchema& schema, const KnobVector& knobs,
                        const MetricSchema& metrics);

/// Parses and validates a response document (exposed for tests).
PerfSample parse_adapter_response(const std::string& text, const MetricSchema& metrics);
std::string adapter_request(const KnobSchema& schema, const KnobVector& knobs);

class AdapterEnvironment final : public Environment {
  public:
    AdapterEnvironment(AdapterCommand cmd, KnobSchema schema, MetricSchema metrics);

    const KnobSchema& knob_schema() const override { return schema_; }
    const MetricSchema& metric_schema() const override { return metrics_; }
    Observation reset() override;
    Observation step(const KnobVector& knobs) override;

  private:
    AdapterCommand cmd_;
    KnobSchema schema_;
    MetricSchema metrics_;
};

} // namespace arbortune

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace arbortune {

enum class KnobKind { continuous, integer };

struct KnobSpec {
    std::string name;
    KnobKind kind = KnobKind::continuous;
    double min = 0.0;
    double max = 1.0;
    double default_value = 0.0;

    bool operator==(const KnobSpec&) const = default;
};

/// A configuration point in physical units, ordered like its schema.
struct KnobVector {
    std::vector<double> values;
};

/// Ordered, validated list of tunable knobs. Immutable once built.
class KnobSchema {
  public:
    KnobSchema() = default;
    /// Throws ConfigError on duplicate names, inverted ranges, defaults out
    /// of range, or integer knobs with non-integral bounds.
    explicit KnobSchema(std::vector<KnobSpec> knobs);

    std::size_t size() const noexcept { return knobs_.size(); }
    const KnobSpec& operator[](std::size_t i) const { return knobs_.at(i); }
    std::span<const KnobSpec> knobs() const noexcept { return knobs_; }

    std::optional<std::size_t> index_of(const std::string& name) const;
    std::vector<std::string> names() const;
    KnobVector defaults() const;

    /// Returns a schema holding only the knobs at `indices`, in that order.
    KnobSchema subset(std::span<const std::size_t> indices) const;

    bool operator==(const KnobSchema&) const = default;

  private:
    std::vector<KnobSpec> knobs_;
};

/// Maps physical knob values onto [0,1]^k. Throws DataError on dimension
/// mismatch or values outside [min, max].
std::vector<double> normalize(const KnobVector& v, const KnobSchema& schema);

/// Inverse of normalize. Components may exceed [0,1] by at most 1e-9 and are
/// clamped; integer knobs are rounded half-up and clamped into range.
KnobVector denormalize(std::span<const double> u, const KnobSchema& schema);

/// True when every value is within bounds and integer knobs hold integers.
bool conforms(const KnobVector& v, const KnobSchema& schema);

KnobSchema schema_from_json(const nlohmann::json& doc);
nlohmann::json schema_to_json(const KnobSchema& schema);
KnobSchema load_schema(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics

struct MetricSpec {
    std::string name;
    double min = 0.0;
    double max = 1.0;

    bool operator==(const MetricSpec&) const = default;
};
/// Metric names plus the range used to normalize observations into the
/// actor's input space.
class MetricSchema {
  public:
    MetricSchema() = default;
    explicit MetricSchema(std::vector<MetricSpec> metrics);

    std::size_t size() const noexcept { return metrics_.size(); }
    const MetricSpec& operator[](std::size_t i) const { return metrics_.at(i); }
    std::span<const MetricSpec> metrics() const noexcept { return metrics_; }
    std::optional<std::size_t> index_of(const std::string& name) const;
    std::vector<std::string> names() const;

    bool operator==(const MetricSchema&) const = default;

  private:
    std::vector<MetricSpec> metrics_;
};

struct MetricVector {
    std::vector<double> values;
};

/// (value - min) / (max - min) per metric; not clamped, observations may
/// leave the declared range.
std::vector<double> normalize_metrics(const MetricVector& m, const MetricSchema& schema);
double metric_to_physical(const MetricSchema& schema, std::size_t i, double normalized);

MetricSchema metric_schema_from_json(const nlohmann::json& doc);
nlohmann::json metric_schema_to_json(const MetricSchema& schema);
MetricSchema load_metric_schema(const std::filesystem::path& path);

struct PerfSample {
    KnobVector knobs;
    MetricVector metrics;
    double throughput = 0.0;
    double latency_p95 = 0.0;
    std::optional<int> level;
};

/// Reads a whole file, throwing ConfigError if it cannot be opened.
std::string read_text_file(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace arbortune

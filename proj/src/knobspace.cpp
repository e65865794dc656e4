#include "arbortune/knobspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

#include "arbortune/error.hpp"

namespace arbortune {

namespace {

constexpr double kUnitTolerance = 1e-9;

void require_finite(double v, const std::string& name, const char* field) {
    if (!std::isfinite(v))
        throw ConfigError(fmt::format("knob '{}': {} is not finite", name, field));
}

} // namespace

KnobSchema::KnobSchema(std::vector<KnobSpec> knobs) : knobs_(std::move(knobs)) {
    std::unordered_set<std::string> seen;
    for (const auto& k : knobs_) {
        if (k.name.empty())
            throw ConfigError("knob with empty name");
        if (!seen.insert(k.name).second)
            throw ConfigError(fmt::format("duplicate knob name '{}'", k.name));
        require_finite(k.min, k.name, "min");
        require_finite(k.max, k.name, "max");
        require_finite(k.default_value, k.name, "default");
        if (!(k.min < k.max))
            throw ConfigError(fmt::format("knob '{}': min ({}) must be below max ({})", k.name, k.min, k.max));
        if (k.default_value < k.min || k.default_value > k.max)
            throw ConfigError(fmt::format("knob '{}': default {} outside [{}, {}]", k.name, k.default_value,
                                          k.min, k.max));
        if (k.kind == KnobKind::integer) {
            if (std::floor(k.min) != k.min || std::floor(k.max) != k.max ||
                std::floor(k.default_value) != k.default_value)
                throw ConfigError(fmt::format("integer knob '{}' needs integral min/max/default", k.name));
        }
    }
}

std::optional<std::size_t> KnobSchema::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < knobs_.size(); ++i)
        if (knobs_[i].name == name) return i;
    return std::nullopt;
}

std::vector<std::string> KnobSchema::names() const {
    std::vector<std::string> out;
    out.reserve(knobs_.size());
    for (const auto& k : knobs_) out.push_back(k.name);
    return out;
}

KnobVector KnobSchema::defaults() const {
    KnobVector v;
    v.values.reserve(knobs_.size());
    for (const auto& k : knobs_) v.values.push_back(k.default_value);
    return v;
}

KnobSchema KnobSchema::subset(std::span<const std::size_t> indices) const {
    std::vector<KnobSpec> picked;
    picked.reserve(indices.size());
    for (auto i : indices) {
        if (i >= knobs_.size())
            throw ConfigError(fmt::format("knob index {} out of range (schema has {})", i, knobs_.size()));
        picked.push_back(knobs_[i]);
    }
    return KnobSchema(std::move(picked));
}

std::vector<double> normalize(const KnobVector& v, const KnobSchema& schema) {
    if (v.values.size() != schema.size())
        throw DataError(fmt::format("knob vector has {} values, schema has {}", v.values.size(), schema.size()));
    std::vector<double> u(v.values.size());
    for (std::size_t j = 0; j < u.size(); ++j) {
        const auto& k = schema[j];
        const double x = v.values[j];
        if (!std::isfinite(x) || x < k.min || x > k.max)
            throw DataError(fmt::format("knob '{}' value {} outside [{}, {}]", k.name, x, k.min, k.max));
        u[j] = (x - k.min) / (k.max - k.min);
    }
    return u;
}

KnobVector denormalize(std::span<const double> u, const KnobSchema& schema) {
    if (u.size() != schema.size())
        throw DataError(fmt::format("unit vector has {} values, schema has {}", u.size(), schema.size()));
    KnobVector v;
    v.values.resize(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) {
        const auto& k = schema[j];
        double t = u[j];
        if (!std::isfinite(t) || t < -kUnitTolerance || t > 1.0 + kUnitTolerance)
            throw DataError(fmt::format("normalized value {} for knob '{}' outside [0,1]", t, k.name));
        t = std::clamp(t, 0.0, 1.0);
        double x = k.min + t * (k.max - k.min);
        if (k.kind == KnobKind::integer) x = std::floor(x + 0.5);
        v.values[j] = std::clamp(x, k.min, k.max);
    }
    return v;
}

bool conforms(const KnobVector& v, const KnobSchema& schema) {
    if (v.values.size() != schema.size()) return false;
    for (std::size_t j = 0; j < schema.size(); ++j) {
        const auto& k = schema[j];
        const double x = v.values[j];
        if (!std::isfinite(x) || x < k.min || x > k.max) return false;
        if (k.kind == KnobKind::integer && std::floor(x) != x) return false;
    }
    return true;
}

KnobSchema schema_from_json(const nlohmann::json& doc) {
    const nlohmann::json* list = &doc;
    if (doc.is_object()) {
        if (!doc.contains("knobs"))
            throw ConfigError("schema document needs a 'knobs' array");
        list = &doc.at("knobs");
    }
    if (!list->is_array()) throw ConfigError("schema 'knobs' must be an array");

    std::vector<KnobSpec> knobs;
    for (const auto& item : *list) {
        if (!item.is_object()) throw ConfigError("schema entry is not an object");
        KnobSpec k;
        try {
            k.name = item.at("name").get<std::string>();
            const auto kind = item.at("kind").get<std::string>();
            if (kind == "continuous") {
                k.kind = KnobKind::continuous;
            } else if (kind == "integer") {
                k.kind = KnobKind::integer;
            } else if (kind == "enum" || kind == "enumeration" || kind == "categorical") {
                throw ConfigError(fmt::format("knob '{}': enumerated knobs are not supported", k.name));
            } else {
                throw ConfigError(fmt::format("knob '{}': unknown kind '{}'", k.name, kind));
            }
            k.min = item.at("min").get<double>();
            k.max = item.at("max").get<double>();
            k.default_value = item.at("default").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(fmt::format("schema entry '{}': {}", k.name, e.what()));
        }
        knobs.push_back(std::move(k));
    }
    return KnobSchema(std::move(knobs));
}

nlohmann::json schema_to_json(const KnobSchema& schema) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& k : schema.knobs()) {
        list.push_back({{"name", k.name},
                        {"kind", k.kind == KnobKind::integer ? "integer" : "continuous"},
                        {"min", k.min},
                        {"max", k.max},
                        {"default", k.default_value}});
    }
    return {{"knobs", list}};
}

KnobSchema load_schema(const std::filesystem::path& path) { return schema_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------

MetricSchema::MetricSchema(std::vector<MetricSpec> metrics) : metrics_(std::move(metrics)) {
    std::unordered_set<std::string> seen;
    for (const auto& m : metrics_) {
        if (m.name.empty()) throw ConfigError("metric with empty name");
        if (!seen.insert(m.name).second)
            throw ConfigError(fmt::format("duplicate metric name '{}'", m.name));
        if (!std::isfinite(m.min) || !std::isfinite(m.max) || !(m.min < m.max))
            throw ConfigError(fmt::format("metric '{}': invalid range [{}, {}]", m.name, m.min, m.max));
    }
}

std::optional<std::size_t> MetricSchema::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < metrics_.size(); ++i)
        if (metrics_[i].name == name) return i;
    return std::nullopt;
}

std::vector<std::string> MetricSchema::names() const {
    std::vector<std::string> out;
    for (const auto& m : metrics_) out.push_back(m.name);
    return out;
}

std::vector<double> normalize_metrics(const MetricVector& m, const MetricSchema& schema) {
    if (m.values.size() != schema.size())
        throw DataError(fmt::format("metric vector has {} values, schema has {}", m.values.size(), schema.size()));
    std::vector<double> out(m.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!std::isfinite(m.values[i]))
            throw DataError(fmt::format("metric '{}' is not finite", schema[i].name));
        out[i] = (m.values[i] - schema[i].min) / (schema[i].max - schema[i].min);
    }
    return out;
}

double metric_to_physical(const MetricSchema& schema, std::size_t i, double normalized) {
    const auto& m = schema[i];
    return m.min + normalized * (m.max - m.min);
}

MetricSchema metric_schema_from_json(const nlohmann::json& doc) {
    const nlohmann::json* list = &doc;
    if (doc.is_object()) {
        if (!doc.contains("metrics")) throw ConfigError("metric schema needs a 'metrics' array");
        list = &doc.at("metrics");
    }
    if (!list->is_array()) throw ConfigError("metric schema 'metrics' must be an array");
    std::vector<MetricSpec> metrics;
    for (const auto& item : *list) {
        try {
            metrics.push_back({item.at("name").get<std::string>(), item.at("min").get<double>(),
                               item.at("max").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(fmt::format("metric schema entry: {}", e.what()));
        }
    }
    return MetricSchema(std::move(metrics));
}

nlohmann::json metric_schema_to_json(const MetricSchema& schema) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& m : schema.metrics()) list.push_back({{"name", m.name}, {"min", m.min}, {"max", m.max}});
    return {{"metrics", list}};
}

MetricSchema load_metric_schema(const std::filesystem::path& path) {
    return metric_schema_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    const auto text = read_text_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("'{}': {}", path.string(), e.what()));
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
    out << text;
    if (!out) throw RuntimeFault(fmt::format("write to '{}' failed", path.string()));
}

} // namespace arbortune

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arbortune/adam.hpp"
#include "arbortune/knobspace.hpp"
#include "arbortune/softtree.hpp"

namespace arbortune {

/// Poor, Below Average, Average, Above Average, Excellent.
inline constexpr std::size_t kLevelCount = 5;

using LevelDistribution = std::array<double, kLevelCount>;

struct LevelDataset {
    std::vector<std::string> knob_names;
    std::vector<std::vector<double>> inputs; // normalized knobs
    std::vector<int> levels;
    std::array<double, kLevelCount - 1> cut_points{}; // throughput at the 20/40/60/80 percentiles

    std::size_t size() const noexcept { return inputs.size(); }
};

/// Labels each sample by throughput quintile: the level is the number of
/// percentile cut points (20/40/60/80, linear interpolation) strictly below
/// its throughput. If every throughput is equal all rows get level 2.
/// Throws DataError for fewer than 5 samples or non-positive throughput.
LevelDataset build_dataset(std::span<const PerfSample> samples, const KnobSchema& schema);

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    AdamConfig adam{};
    std::uint64_t seed = 0;
};

/// Level classifier: a linear-weighted soft tree whose leaves are mapped to
/// distributions with softmax(leaf_sharpness * leaf). Steepness is fixed.
struct PredictorModel {
    SoftTree tree;
    double leaf_sharpness = 10.0;
    std::vector<std::string> knob_names;
};

struct TrainResult {
    PredictorModel model;
    /// Full-dataset mean cross-entropy; entry 0 is before the first epoch.
    std::vector<double> loss_history;
};

/// Mini-batch Adam on cross-entropy. Deterministic per cfg.seed.
/// Throws RuntimeFault when the loss becomes non-finite.
TrainResult train_predictor(PredictorModel model, const LevelDataset& data, const TrainConfig& cfg);

LevelDistribution predict_level(const PredictorModel& model, std::span<const double> knobs_normalized);

/// Expected level sum_i i * p_i, in [0, 4].
double predict_score(const PredictorModel& model, std::span<const double> knobs_normalized);
double expected_level(std::span<const double> distribution);

double dataset_loss(const PredictorModel& model, const LevelDataset& data);
double dataset_accuracy(const PredictorModel& model, const LevelDataset& data);

/// Fast scalar surrogate for repeated Shapley evaluations: equals
/// predict_score, with per-leaf expected levels precomputed.
class ScoreSurrogate {
  public:
    explicit ScoreSurrogate(const PredictorModel& model);
    double operator()(std::span<const double> knobs_normalized) const;
    std::size_t input_dim() const noexcept { return tree_.input_dim(); }

  private:
    SoftTree tree_;
};

nlohmann::json predictor_to_json(const PredictorModel& model);
PredictorModel predictor_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Dataset file: header `knob_1,...,knob_k,throughput_tps,latency_p95_ms`,
// one row per sample, knob values in physical units.

std::string dataset_to_csv(const KnobSchema& schema, std::span<const PerfSample> samples);
std::vector<PerfSample> dataset_from_csv(const std::string& text, const KnobSchema& schema);

} // namespace arbortune

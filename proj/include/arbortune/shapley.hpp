#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arbortune/error.hpp"

namespace arbortune {

using ScalarModel = std::function<double(std::span<const double>)>;

struct Attribution {
    double base_value = 0.0;    // phi_0
    std::vector<double> values; // phi_j
};

struct ImportanceReport {
    std::vector<double> importance;   // I_j = mean_i |phi_j^(i)|
    std::vector<std::size_t> ranking; // descending I, ties by ascending index
};

inline constexpr std::size_t kMaxExactFeatures = 20;

/// Exact Shapley values by enumerating all 2^M coalitions. The value of a
/// coalition S is the model evaluated with features outside S set to the
/// background vector; phi_0 = model(background).
Attribution exact_shapley(const ScalarModel& model, std::span<const double> x, std::span<const double> background);

/// Same game averaged over several background rows.
Attribution exact_shapley(const ScalarModel& model, std::span<const double> x,
                          std::span<const std::vector<double>> background_set);

/// Shapley kernel (M-1) / (C(M,s) s (M-s)). Throws DataError unless 0 < s < M.
double kernel_weight(std::size_t features, std::size_t coalition_size);

struct KernelShapOptions {
    /// Number of distinct proper coalitions; nullopt means all 2^M - 2.
    std::optional<std::size_t> budget;
    std::uint64_t seed = 0;
};

/// Default budget: min(2^M - 2, 2048).
std::size_t default_budget(std::size_t features);

/// Thrown when the sampled design cannot identify every attribution; retry
/// with a larger budget.
class SingularDesign : public RuntimeFault {
  public:
    using RuntimeFault::RuntimeFault;
};

/// Weighted least squares fit of the additive explanation model with kernel
/// weights. Absent features are imputed row by row from the background set
/// and the model output averaged. The empty and full coalitions enter as
/// exact constraints, so base + sum(phi) == model(x).
///
/// With a budget below 2^M - 2, coalition sizes are drawn in proportion to
/// the kernel mass at each size, subsets of that size uniformly, and each
/// distinct coalition is weighted by how often it was drawn.
Attribution kernel_shap(const ScalarModel& model, std::span<const double> x,
                        std::span<const std::vector<double>> background_set, const KernelShapOptions& options);

/// Mean absolute attribution per feature and the descending ranking.
ImportanceReport global_importance(std::span<const Attribution> attributions);

/// First k entries of the ranking. Throws DataError unless 1 <= k <= M.
std::vector<std::size_t> select_knobs(const ImportanceReport& report, std::size_t k);

/// Runs kernel_shap for every row and aggregates. Row i uses seed
/// mix_seed(seed, i), so the result does not depend on evaluation order.
std::vector<Attribution> explain_rows(const ScalarModel& model, std::span<const std::vector<double>> rows,
                                      std::span<const std::vector<double>> background_set,
                                      const KernelShapOptions& options);

nlohmann::json report_to_json(const ImportanceReport& report, std::span<const std::string> names,
                              std::span<const std::size_t> selected);

} // namespace arbortune

#include "arbortune/shapley.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "arbortune/random.hpp"

namespace arbortune {

namespace {

// Binomial coefficient, exact while it fits in 64 bits.
double binomial(std::size_t n, std::size_t k) {
    if (k > n) return 0.0;
    k = std::min(k, n - k);
    if (n <= 56) {
        std::uint64_t c = 1;
        for (std::size_t i = 1; i <= k; ++i) c = c * (n - k + i) / i; // stays integral at every step
        return static_cast<double>(c);
    }
    return std::exp(std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                    std::lgamma(static_cast<double>(n - k) + 1));
}

double checked(double v) {
    if (!std::isfinite(v)) throw RuntimeFault("model returned a non-finite value during Shapley evaluation");
    return v;
}

void check_shapes(std::span<const double> x, std::span<const std::vector<double>> background_set) {
    if (x.empty()) throw DataError("Shapley: empty feature vector");
    if (background_set.empty()) throw DataError("Shapley: empty background set");
    for (const auto& b : background_set)
        if (b.size() != x.size()) throw DataError("Shapley: background row size mismatch");
}

// Coalition value: features in `mask` from x, the rest from each background
// row, model output averaged over rows.
class CoalitionGame {
  public:
    CoalitionGame(const ScalarModel& model, std::span<const double> x, std::span<const std::vector<double>> bg)
        : model_(model), x_(x), bg_(bg), buf_(x.size()) {}

    double value(std::uint64_t mask) {
        double total = 0.0;
        for (const auto& row : bg_) {
            for (std::size_t j = 0; j < x_.size(); ++j) buf_[j] = (mask >> j) & 1U ? x_[j] : row[j];
            total += checked(model_(buf_));
        }
        return total / static_cast<double>(bg_.size());
    }

  private:
    const ScalarModel& model_;
    std::span<const double> x_;
    std::span<const std::vector<double>> bg_;
    std::vector<double> buf_;
};

} // namespace

Attribution exact_shapley(const ScalarModel& model, std::span<const double> x,
                          std::span<const std::vector<double>> background_set) {
    check_shapes(x, background_set);
    const std::size_t m = x.size();
    if (m > kMaxExactFeatures)
        throw DataError(fmt::format("exact Shapley supports at most {} features, got {}", kMaxExactFeatures, m));

    CoalitionGame game(model, x, background_set);
    const std::uint64_t full = (std::uint64_t{1} << m);
    std::vector<double> v(full);
    for (std::uint64_t s = 0; s < full; ++s) v[s] = game.value(s);

    // |S|! (M-|S|-1)! / M!  ==  1 / (M * C(M-1, |S|))
    std::vector<double> w(m);
    for (std::size_t s = 0; s < m; ++s) w[s] = 1.0 / (static_cast<double>(m) * binomial(m - 1, s));

    Attribution a;
    a.base_value = v[0];
    a.values.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        const std::uint64_t bit = std::uint64_t{1} << j;
        double phi = 0.0;
        for (std::uint64_t s = 0; s < full; ++s) {
            if (s & bit) continue;
            phi += w[static_cast<std::size_t>(std::popcount(s))] * (v[s | bit] - v[s]);
        }
        a.values[j] = phi;
    }
    return a;
}

Attribution exact_shapley(const ScalarModel& model, std::span<const double> x, std::span<const double> background) {
    const std::vector<std::vector<double>> bg{std::vector<double>(background.begin(), background.end())};
    return exact_shapley(model, x, bg);
}

double kernel_weight(std::size_t features, std::size_t coalition_size) {
    if (coalition_size == 0 || coalition_size >= features)
        throw DataError(fmt::format("kernel weight undefined for coalition size {} of {}", coalition_size, features));
    const auto m = static_cast<double>(features);
    const auto s = static_cast<double>(coalition_size);
    return (m - 1.0) / (binomial(features, coalition_size) * s * (m - s));
}

std::size_t default_budget(std::size_t features) {
    if (features >= 12) return 2048; // 2^12 - 2 > 2048
    return std::min<std::size_t>((std::size_t{1} << features) - 2, 2048);
}

Attribution kernel_shap(const ScalarModel& model, std::span<const double> x,
                        std::span<const std::vector<double>> background_set, const KernelShapOptions& options) {
    check_shapes(x, background_set);
    const std::size_t m = x.size();
    if (m > 62) throw DataError("kernel SHAP supports at most 62 features");

    CoalitionGame game(model, x, background_set);
    const std::uint64_t all = (std::uint64_t{1} << m) - 1;
    const double f0 = game.value(0);
    const double fx = game.value(all);
    Attribution a;
    a.base_value = f0;
    if (m == 1) {
        a.values = {fx - f0};
        return a;
    }

    const double proper = std::ldexp(1.0, static_cast<int>(m)) - 2.0;
    std::vector<std::uint64_t> masks;
    std::vector<double> weights;
    const bool full = !options.budget || static_cast<double>(*options.budget) >= proper;
    if (full) {
        for (std::uint64_t s = 1; s < all; ++s) {
            masks.push_back(s);
            weights.push_back(kernel_weight(m, static_cast<std::size_t>(std::popcount(s))));
        }
    } else {
        const std::size_t budget = *options.budget;
        if (budget < m + 2)
            throw DataError(fmt::format("kernel SHAP budget {} below the minimum {} for {} features", budget, m + 2, m));
        // kernel mass at each size: C(M,s) * weight = (M-1) / (s (M-s))
        std::vector<double> size_cdf(m - 1);
        double acc = 0.0;
        for (std::size_t s = 1; s < m; ++s) {
            acc += 1.0 / (static_cast<double>(s) * static_cast<double>(m - s));
            size_cdf[s - 1] = acc;
        }
        Rng rng(options.seed);
        std::unordered_map<std::uint64_t, std::size_t> slot;
        std::vector<std::size_t> idx(m);
        const std::size_t max_draws = 50 * budget + 1000;
        for (std::size_t draw = 0; draw < max_draws && masks.size() < budget; ++draw) {
            const double u = rng.uniform() * acc;
            const auto s = static_cast<std::size_t>(std::upper_bound(size_cdf.begin(), size_cdf.end(), u) -
                                                    size_cdf.begin()) + 1;
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::uint64_t mask = 0;
            for (std::size_t i = 0; i < std::min(s, m - 1); ++i) {
                const auto j = i + static_cast<std::size_t>(rng.index(m - i));
                std::swap(idx[i], idx[j]);
                mask |= std::uint64_t{1} << idx[i];
            }
            auto [it, inserted] = slot.try_emplace(mask, masks.size());
            if (inserted) {
                masks.push_back(mask);
                weights.push_back(1.0);
            } else {
                weights[it->second] += 1.0;
            }
        }
    }

    // Substitute phi_{M-1} = (fx - f0) - sum_{j<M-1} phi_j and solve the
    // weighted least squares problem in the remaining M-1 unknowns.
    const std::size_t n = masks.size();
    const std::size_t p = m - 1;
    const double total = fx - f0;
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    Eigen::VectorXd target(static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) {
        const double sw = std::sqrt(weights[r]);
        const double last = static_cast<double>((masks[r] >> p) & 1U);
        for (std::size_t j = 0; j < p; ++j)
            design(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
                sw * (static_cast<double>((masks[r] >> j) & 1U) - last);
        target(static_cast<Eigen::Index>(r)) = sw * (game.value(masks[r]) - f0 - last * total);
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (static_cast<std::size_t>(qr.rank()) < p)
        throw SingularDesign(fmt::format("kernel SHAP design has rank {} < {} ({} coalitions); increase the budget",
                                         qr.rank(), p, n));
    const Eigen::VectorXd beta = qr.solve(target);

    a.values.resize(m);
    double partial = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        a.values[j] = beta(static_cast<Eigen::Index>(j));
        partial += a.values[j];
    }
    a.values[p] = total - partial;
    return a;
}

ImportanceReport global_importance(std::span<const Attribution> attributions) {
    if (attributions.empty()) throw DataError("global importance needs at least one attribution");
    const std::size_t m = attributions.front().values.size();
    ImportanceReport report;
    report.importance.assign(m, 0.0);
    for (const auto& a : attributions) {
        if (a.values.size() != m) throw DataError("attributions have inconsistent feature counts");
        for (std::size_t j = 0; j < m; ++j) report.importance[j] += std::abs(a.values[j]);
    }
    for (auto& v : report.importance) v /= static_cast<double>(attributions.size());

    report.ranking.resize(m);
    std::iota(report.ranking.begin(), report.ranking.end(), std::size_t{0});
    std::stable_sort(report.ranking.begin(), report.ranking.end(),
                     [&](std::size_t a, std::size_t b) { return report.importance[a] > report.importance[b]; });
    return report;
}

std::vector<std::size_t> select_knobs(const ImportanceReport& report, std::size_t k) {
    if (k < 1 || k > report.ranking.size())
        throw DataError(fmt::format("top-k {} outside [1, {}]", k, report.ranking.size()));
    return {report.ranking.begin(), report.ranking.begin() + static_cast<std::ptrdiff_t>(k)};
}

std::vector<Attribution> explain_rows(const ScalarModel& model, std::span<const std::vector<double>> rows,
                                      std::span<const std::vector<double>> background_set,
                                      const KernelShapOptions& options) {
    std::vector<Attribution> out;
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        KernelShapOptions row_opts = options;
        row_opts.seed = mix_seed(options.seed, i);
        out.push_back(kernel_shap(model, rows[i], background_set, row_opts));
    }
    return out;
}

nlohmann::json report_to_json(const ImportanceReport& report, std::span<const std::string> names,
                              std::span<const std::size_t> selected) {
    if (names.size() != report.importance.size()) throw DataError("report name list size mismatch");
    nlohmann::json knobs = nlohmann::json::array();
    for (std::size_t r = 0; r < report.ranking.size(); ++r) {
        const std::size_t j = report.ranking[r];
        knobs.push_back({{"rank", r + 1}, {"index", j}, {"name", names[j]}, {"importance", report.importance[j]}});
    }
    nlohmann::json sel = nlohmann::json::array();
    for (auto j : selected) sel.push_back(names[j]);
    return {{"ranking", knobs}, {"selected", sel}};
}

} // namespace arbortune

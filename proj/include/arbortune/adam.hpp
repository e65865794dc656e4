#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "arbortune/error.hpp"

namespace arbortune {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam over a flat parameter vector; descends the supplied gradient.
class Adam {
  public:
    Adam() = default;
    Adam(std::size_t size, AdamConfig cfg) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {
        if (!(cfg.learning_rate > 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) ||
            !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) || !(cfg.epsilon > 0.0))
            throw ConfigError("invalid Adam hyperparameters");
    }

    void step(std::span<double> params, std::span<const double> grad) {
        if (params.size() != m_.size() || grad.size() != m_.size())
            throw DataError("Adam: parameter/gradient size mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            const double m_hat = m_[i] / c1;
            const double v_hat = v_[i] / c2;
            params[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
        }
    }

    const AdamConfig& config() const noexcept { return cfg_; }
    std::size_t steps() const noexcept { return t_; }

  private:
    AdamConfig cfg_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

} // namespace arbortune

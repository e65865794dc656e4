#include "arbortune/sampler.hpp"

#include <cmath>
#include <numeric>

#include "arbortune/error.hpp"
#include "arbortune/random.hpp"

namespace arbortune {

SampleBatch lhs_sample(std::size_t dims, std::size_t count, std::uint64_t seed, StratumPlacement placement) {
    if (dims == 0) throw ConfigError("lhs_sample: dimension count must be positive");
    if (count == 0) throw ConfigError("lhs_sample: sample count must be positive");

    Rng rng(seed);
    SampleBatch batch;
    batch.seed = seed;
    batch.points.assign(count, std::vector<double>(dims));

    const double n = static_cast<double>(count);
    std::vector<std::size_t> perm(count);
    for (std::size_t d = 0; d < dims; ++d) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm.begin(), perm.end());
        for (std::size_t i = 0; i < count; ++i) {
            const auto stratum = static_cast<double>(perm[i]);
            const double lo = stratum / n;
            const double hi = (stratum + 1.0) / n;
            const double offset = placement == StratumPlacement::midpoint ? 0.5 : rng.uniform();
            double x = lo + offset * (hi - lo);
            // rounding can land exactly on the upper edge
            if (x >= hi) x = std::nextafter(hi, 0.0);
            if (x < lo) x = lo;
            batch.points[i][d] = x;
        }
    }
    return batch;
}

} // namespace arbortune

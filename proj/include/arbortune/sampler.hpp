#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace arbortune {

enum class StratumPlacement {
    random,   // uniform offset inside each stratum (standard LHS)
    midpoint, // stratum centres; reproducible documentation examples
};

struct SampleBatch {
    std::vector<std::vector<double>> points;
    std::uint64_t seed = 0;
};

/// Latin hypercube sample of n points in [0,1)^k: along every dimension each
/// of the n strata [i/n, (i+1)/n) holds exactly one point. Permutations and
/// offsets come from Rng (mt19937_64) seeded with `seed`.
SampleBatch lhs_sample(std::size_t dims, std::size_t count, std::uint64_t seed,
                       StratumPlacement placement = StratumPlacement::random);

} // namespace arbortune

#pragma once

#include <cstdint>
#include <vector>

#include "chunkflow/common.hpp"
#include "chunkflow/rng.hpp"

namespace chunkflow {

// Shifted flow-matching noise schedule. Training timesteps are drawn uniform
// on [sigma_min, sigma_max] and pushed through the shift map; solver grids
// use the same map over a linspace.
struct NoiseConfig {
    double shift = 3.0;
    double sigma_min = 0.02;
    double sigma_max = 0.98;
    std::uint64_t rng_seed = 0;
};

inline void validate(const NoiseConfig& c) {
    require(c.shift > 0.0, "noise: shift must be positive");
    require(c.sigma_min >= 0.0 && c.sigma_max <= 1.0 && c.sigma_min <= c.sigma_max,
            "noise: sigma range must satisfy 0 <= min <= max <= 1");
}

inline double shift_sigma(double s, double shift) { return shift * s / (1.0 + (shift - 1.0) * s); }

inline double sample_sigma(const NoiseConfig& c, Rng& rng) {
    validate(c);
    return shift_sigma(rng.uniform(c.sigma_min, c.sigma_max), c.shift);
}

// Strictly decreasing solver grid: sigma_0 = 1 down to sigma_steps = 0,
// steps+1 values. Euler integration runs one update per interval.
inline std::vector<double> sigma_levels(int steps, double shift) {
    require(steps >= 1, "sigma_levels: steps must be >= 1");
    require(shift > 0.0, "sigma_levels: shift must be positive");
    std::vector<double> levels(static_cast<std::size_t>(steps) + 1);
    for (int j = 0; j <= steps; ++j)
        levels[static_cast<std::size_t>(j)] = shift_sigma(1.0 - static_cast<double>(j) / steps, shift);
    levels.front() = 1.0;
    levels.back() = 0.0;
    return levels;
}

// Evenly subsample a solver grid down to `steps` intervals; the result is a
// subsequence of `full` with the same endpoints.
inline std::vector<double> subsample_levels(const std::vector<double>& full, int steps) {
    require(steps >= 1 && full.size() >= static_cast<std::size_t>(steps) + 1, "subsample_levels: grid too small");
    int full_steps = static_cast<int>(full.size()) - 1;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(steps) + 1);
    for (int j = 0; j <= steps; ++j) out.push_back(full[static_cast<std::size_t>(j * full_steps / steps)]);
    out.back() = full.back();
    return out;
}

}  // namespace chunkflow

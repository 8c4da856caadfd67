#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "chunkflow/common.hpp"

namespace chunkflow {

// Deterministic RNG with serializable state. Distributions are implemented
// here (not via <random> distribution objects) so draws are identical across
// standard libraries and carry no hidden state between calls; a snapshot of
// the engine state is enough to replay a stream exactly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, cosine branch only: exactly two engine draws per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    void fill_normal(std::span<double> out, double scale = 1.0) {
        for (double& x : out) x = scale * normal();
    }

    // Draw without replacement from [0, n)
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        ensure(!is.fail(), "rng: bad serialized state");
    }

    bool operator==(const Rng& o) const { return engine_ == o.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace chunkflow

#include <catch2/catch_amalgamated.hpp>

#include "chunkflow/noise.hpp"

using namespace chunkflow;

TEST_CASE("sample_sigma with shift=1 is uniform: Monte-Carlo mean 0.5 +- 0.01", "[noise]") {
    NoiseConfig cfg;
    cfg.shift = 1.0;
    Rng rng(42);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sample_sigma(cfg, rng);
    CHECK(sum / n == Catch::Approx(0.5).margin(0.01));
}

TEST_CASE("sample_sigma is deterministic for identical rng state", "[noise]") {
    NoiseConfig cfg;
    Rng a(7), b(7);
    for (int i = 0; i < 10; ++i) CHECK(sample_sigma(cfg, a) == sample_sigma(cfg, b));
}

TEST_CASE("all sigma draws stay in [0,1]", "[noise]") {
    NoiseConfig cfg;
    cfg.shift = 5.0;
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        double s = sample_sigma(cfg, rng);
        REQUIRE(s >= 0.0);
        REQUIRE(s <= 1.0);
    }
}

TEST_CASE("shift map is monotone on [0,1] and fixes the endpoints", "[noise]") {
    for (double shift : {0.5, 1.0, 3.0, 8.0}) {
        CHECK(shift_sigma(0.0, shift) == 0.0);
        CHECK(shift_sigma(1.0, shift) == Catch::Approx(1.0));
        double prev = 0.0;
        for (int i = 1; i <= 50; ++i) {
            double cur = shift_sigma(i / 50.0, shift);
            CHECK(cur > prev);
            prev = cur;
        }
    }
}

TEST_CASE("solver sigma grid is strictly decreasing from 1 to 0", "[noise]") {
    auto levels = sigma_levels(48, 3.0);
    REQUIRE(levels.size() == 49);
    CHECK(levels.front() == 1.0);
    CHECK(levels.back() == 0.0);
    for (std::size_t i = 1; i < levels.size(); ++i) CHECK(levels[i] < levels[i - 1]);
}

TEST_CASE("subsampled grid is a subsequence sharing endpoints", "[noise]") {
    auto full = sigma_levels(48, 3.0);
    auto sub = subsample_levels(full, 4);
    REQUIRE(sub.size() == 5);
    CHECK(sub.front() == full.front());
    CHECK(sub.back() == full.back());
    std::size_t cursor = 0;
    for (double v : sub) {
        while (cursor < full.size() && full[cursor] != v) ++cursor;
        REQUIRE(cursor < full.size());  // found in order
    }
}

#include <catch2/catch_amalgamated.hpp>

#include "chunkflow/latent.hpp"
#include "chunkflow/rng.hpp"

using namespace chunkflow;

namespace {

std::vector<LatentFrame> random_frames(int n, LatentShape shape, Rng& rng) {
    std::vector<LatentFrame> frames(static_cast<std::size_t>(n), LatentFrame(shape));
    for (auto& f : frames) rng.fill_normal(f.values);
    return frames;
}

}  // namespace

TEST_CASE("chunk_sequence splits 12 frames at L=3 into 4 chunks", "[latent]") {
    Rng rng(1);
    auto frames = random_frames(12, {2, 2, 2}, rng);
    auto chunks = chunk_sequence(frames, 3);
    REQUIRE(chunks.size() == 4);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        CHECK(chunks[i].chunk_index == static_cast<std::int64_t>(i) + 1);
        CHECK(chunks[i].frames.size() == 3);
    }
    // chunk i holds frames [(i-1)L .. iL-1] in order
    CHECK(chunks[1].frames[0].values == frames[3].values);
    CHECK(chunks[3].frames[2].values == frames[11].values);
}

TEST_CASE("chunk_sequence with L=1 is frame-wise autoregression", "[latent]") {
    Rng rng(2);
    auto frames = random_frames(5, {2, 2, 2}, rng);
    auto chunks = chunk_sequence(frames, 1);
    REQUIRE(chunks.size() == 5);
    for (const auto& c : chunks) CHECK(c.frames.size() == 1);
}

TEST_CASE("chunk_sequence rejects non-divisible lengths", "[latent]") {
    Rng rng(3);
    auto frames = random_frames(13, {2, 2, 2}, rng);
    CHECK_THROWS_AS(chunk_sequence(frames, 3), std::invalid_argument);
}

TEST_CASE("chunking then flattening reproduces the input exactly", "[latent]") {
    Rng rng(4);
    for (int l : {1, 2, 3, 5}) {
        auto frames = random_frames(2 * 3 * 5, {3, 2, 2}, rng);
        auto back = flatten_chunks(chunk_sequence(frames, l));
        REQUIRE(back.size() == frames.size());
        for (std::size_t i = 0; i < frames.size(); ++i) CHECK(back[i].values == frames[i].values);
    }
}

TEST_CASE("flow_interpolate endpoints", "[latent]") {
    Rng rng(5);
    LatentFrame x0({2, 2, 2});
    LatentFrame eps({2, 2, 2});
    rng.fill_normal(x0.values);
    rng.fill_normal(eps.values);
    CHECK(flow_interpolate(x0, eps, 0.0).values == x0.values);
    CHECK(flow_interpolate(x0, eps, 1.0).values == eps.values);
}

TEST_CASE("flow_interpolate midpoint arithmetic", "[latent]") {
    std::vector<double> x0{2.0}, eps{0.0};
    auto out = flow_interpolate(x0, eps, 0.5);
    CHECK(out[0] == Catch::Approx(1.0));
}

TEST_CASE("flow_interpolate rejects shape mismatch", "[latent]") {
    std::vector<double> x0{1.0, 2.0}, eps{0.0};
    CHECK_THROWS_AS(flow_interpolate(std::span<const double>(x0), std::span<const double>(eps), 0.5),
                    std::invalid_argument);
}

TEST_CASE("flow_interpolate is linear in (x0, eps)", "[latent]") {
    Rng rng(6);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x0(16), eps(16);
        rng.fill_normal(x0);
        rng.fill_normal(eps);
        double a = rng.uniform(-2.0, 2.0);
        double sigma = rng.uniform();
        auto base = flow_interpolate(std::span<const double>(x0), std::span<const double>(eps), sigma);
        std::vector<double> ax0(16), aeps(16);
        for (int i = 0; i < 16; ++i) {
            ax0[static_cast<std::size_t>(i)] = a * x0[static_cast<std::size_t>(i)];
            aeps[static_cast<std::size_t>(i)] = a * eps[static_cast<std::size_t>(i)];
        }
        auto scaled = flow_interpolate(std::span<const double>(ax0), std::span<const double>(aeps), sigma);
        for (int i = 0; i < 16; ++i)
            CHECK(scaled[static_cast<std::size_t>(i)] ==
                  Catch::Approx(a * base[static_cast<std::size_t>(i)]).margin(1e-12));
    }
}

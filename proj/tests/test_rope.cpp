#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "chunkflow/rng.hpp"
#include "chunkflow/rope.hpp"

using namespace chunkflow;

TEST_CASE("position 0 leaves vectors unchanged", "[rope]") {
    RopeTable table(RopeConfig{8, 10000.0, 61});
    Rng rng(1);
    std::vector<double> v(8);
    rng.fill_normal(v);
    auto w = v;
    table.rotate(w, 0);
    CHECK(w == v);
}

TEST_CASE("rotation preserves the L2 norm", "[rope]") {
    RopeTable table(RopeConfig{16, 10000.0, 61});
    Rng rng(2);
    for (int rep = 0; rep < 30; ++rep) {
        std::vector<double> v(16);
        rng.fill_normal(v);
        double n0 = 0.0;
        for (double x : v) n0 += x * x;
        table.rotate(v, static_cast<std::int64_t>(rng.index(60)));
        double n1 = 0.0;
        for (double x : v) n1 += x * x;
        CHECK(std::sqrt(n1) == Catch::Approx(std::sqrt(n0)).epsilon(1e-6));
    }
}

TEST_CASE("D=2, base 10000, position 1 rotates (1,0) to (cos 1, sin 1)", "[rope]") {
    RopeTable table(RopeConfig{2, 10000.0, 61});
    std::vector<double> v{1.0, 0.0};
    table.rotate(v, 1);
    CHECK(v[0] == Catch::Approx(0.5403023058681398).margin(1e-12));
    CHECK(v[1] == Catch::Approx(0.8414709848078965).margin(1e-12));
}

TEST_CASE("relative phase: dot products depend only on position differences", "[rope]") {
    RopeTable table(RopeConfig{12, 10000.0, 1000});
    Rng rng(3);
    std::vector<double> q(12), k(12);
    rng.fill_normal(q);
    rng.fill_normal(k);
    auto dot_at = [&](std::int64_t pq, std::int64_t pk) {
        auto qr = q;
        auto kr = k;
        table.rotate(qr, pq);
        table.rotate(kr, pk);
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += qr[static_cast<std::size_t>(i)] * kr[static_cast<std::size_t>(i)];
        return s;
    };
    for (int rep = 0; rep < 20; ++rep) {
        auto pq = static_cast<std::int64_t>(rng.index(200));
        auto pk = static_cast<std::int64_t>(rng.index(200));
        auto shift = static_cast<std::int64_t>(rng.index(300));
        CHECK(dot_at(pq, pk) == Catch::Approx(dot_at(pq + shift, pk + shift)).margin(1e-9));
    }
}

TEST_CASE("rotating stored keys at two offsets leaves the cache entry intact", "[rope]") {
    RopeTable table(RopeConfig{8, 10000.0, 61});
    Rng rng(4);
    std::vector<double> stored(8);
    rng.fill_normal(stored);
    const auto snapshot = stored;
    auto r1 = stored;
    table.rotate(r1, 3);
    auto r2 = stored;
    table.rotate(r2, 9);
    CHECK(stored == snapshot);  // unrotated entry bit-identical
    CHECK(r1 != r2);            // different relative positions, different phases
}

TEST_CASE("odd head_dim is a config error", "[rope]") {
    CHECK_THROWS_AS(RopeTable(RopeConfig{7, 10000.0, 61}), std::invalid_argument);
}

TEST_CASE("block-relative positions: paper configuration W=3, k=5, L=3", "[rope]") {
    auto pos = block_relative_positions(5, 3, 3);
    REQUIRE(pos.size() == 17);  // 5 + 4*3
    for (std::size_t i = 0; i < pos.size(); ++i) CHECK(pos[i] == static_cast<std::int64_t>(i));
    CHECK(position_span(5, 3, 3) == 17);
    CHECK_NOTHROW(check_position_span(5, 3, 3, RopeConfig{8, 10000.0, 61}));
}

TEST_CASE("block-relative positions: single current frame", "[rope]") {
    auto pos = block_relative_positions(0, 0, 1);
    REQUIRE(pos.size() == 1);
    CHECK(pos[0] == 0);
}

TEST_CASE("block-relative positions: k_sel=2, W=1, L=3 lays out 0..7", "[rope]") {
    auto pos = block_relative_positions(2, 1, 3);
    REQUIRE(pos.size() == 8);
    // memory [0,1], window [2,3,4], current [5,6,7]
    CHECK(pos == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("span exceeding F_train is rejected at config time", "[rope]") {
    CHECK_THROWS_AS(check_position_span(5, 20, 3, RopeConfig{8, 10000.0, 61}), std::invalid_argument);
}

TEST_CASE("rotate_tokens validates positions and shapes", "[rope]") {
    RopeTable table(RopeConfig{4, 10000.0, 61});
    std::vector<double> vecs(2 * 2 * 4, 1.0);  // 2 tokens, 2 heads
    std::vector<std::int64_t> pos{1, -1};
    CHECK_THROWS_AS(rotate_tokens(vecs, 2, 2, pos, table), std::invalid_argument);
    pos[1] = 2;
    auto out = rotate_tokens(vecs, 2, 2, pos, table);
    CHECK(out.size() == vecs.size());
}

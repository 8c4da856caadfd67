#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>

#include "chunkflow/camr.hpp"
#include "chunkflow/rng.hpp"

using namespace chunkflow;

namespace {

// Independent mean oracle: plain nested loops, no pooling helpers.
std::vector<double> naive_mean(const std::vector<double>& data, int groups, int dim) {
    std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
    for (int g = 0; g < groups; ++g)
        for (int i = 0; i < dim; ++i) out[static_cast<std::size_t>(i)] += data[static_cast<std::size_t>(g) * dim + i];
    for (double& x : out) x /= groups;
    return out;
}

// Full-sort oracle for top-k with the earliest-index tie rule.
std::vector<std::int64_t> topk_oracle(std::vector<ScoredFrame> scores, int k) {
    std::sort(scores.begin(), scores.end(), [](const ScoredFrame& a, const ScoredFrame& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.frame < b.frame;
    });
    if (static_cast<int>(scores.size()) > k) scores.resize(static_cast<std::size_t>(k));
    std::vector<std::int64_t> out;
    for (const auto& s : scores) out.push_back(s.frame);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("frame descriptor of identical tokens equals the token", "[camr]") {
    Rng rng(1);
    std::vector<double> one(8);
    rng.fill_normal(one);
    std::vector<double> keys;
    for (int p = 0; p < 5; ++p) keys.insert(keys.end(), one.begin(), one.end());
    auto d = frame_descriptor(keys, 5, 2, 4);
    for (int i = 0; i < 8; ++i)
        CHECK(d[static_cast<std::size_t>(i)] == Catch::Approx(one[static_cast<std::size_t>(i)]).margin(1e-12));
}

TEST_CASE("frame descriptor with P=1 is the identity", "[camr]") {
    Rng rng(2);
    std::vector<double> keys(6);
    rng.fill_normal(keys);
    CHECK(frame_descriptor(keys, 1, 3, 2) == keys);
}

TEST_CASE("frame descriptor matches the naive mean for P=7", "[camr]") {
    Rng rng(3);
    std::vector<double> keys(7 * 8);
    rng.fill_normal(keys);
    auto d = frame_descriptor(keys, 7, 2, 4);
    auto oracle = naive_mean(keys, 7, 8);
    for (int i = 0; i < 8; ++i)
        CHECK(d[static_cast<std::size_t>(i)] == Catch::Approx(oracle[static_cast<std::size_t>(i)]).margin(1e-7));
}

TEST_CASE("chunk query descriptor: L=1, P=1 identity and constant queries", "[camr]") {
    Rng rng(4);
    std::vector<double> q(4);
    rng.fill_normal(q);
    CHECK(chunk_query_descriptor(q, 1, 1, 2, 2) == q);
    std::vector<double> rep;
    for (int i = 0; i < 6; ++i) rep.insert(rep.end(), q.begin(), q.end());
    auto d = chunk_query_descriptor(rep, 2, 3, 2, 2);
    for (int i = 0; i < 4; ++i)
        CHECK(d[static_cast<std::size_t>(i)] == Catch::Approx(q[static_cast<std::size_t>(i)]).margin(1e-12));
}

TEST_CASE("chunk query descriptor matches the loop oracle for L=3, P=4", "[camr]") {
    Rng rng(5);
    std::vector<double> q(3 * 4 * 8);
    rng.fill_normal(q);
    auto d = chunk_query_descriptor(q, 3, 4, 4, 2);
    auto oracle = naive_mean(q, 12, 8);
    for (int i = 0; i < 8; ++i)
        CHECK(d[static_cast<std::size_t>(i)] == Catch::Approx(oracle[static_cast<std::size_t>(i)]).margin(1e-7));
}

TEST_CASE("route score: orthogonal, self, and random pairs", "[camr]") {
    std::vector<double> a{1.0, 0.0, 0.0, 0.0}, b{0.0, 1.0, 0.0, 0.0};
    CHECK(route_score(a, b) == 0.0);
    std::vector<double> unit{0.5, 0.5, 0.5, 0.5};
    CHECK(route_score(unit, unit) == Catch::Approx(1.0));
    Rng rng(6);
    std::vector<double> q(16), d(16);
    rng.fill_normal(q);
    rng.fill_normal(d);
    double flat = 0.0;
    for (int i = 0; i < 16; ++i) flat += q[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(i)];
    CHECK(route_score(q, d) == Catch::Approx(flat).margin(1e-7));
}

TEST_CASE("select_topk: empty history and fewer-than-k cases", "[camr]") {
    CHECK(select_topk({}, 5).empty());
    std::vector<ScoredFrame> three{{10, 0.3}, {4, 0.9}, {7, -0.2}};
    auto sel = select_topk(three, 5);
    CHECK(sel == std::vector<std::int64_t>{4, 7, 10});
}

TEST_CASE("select_topk equals the full-sort oracle over 1000 random score sets", "[camr]") {
    Rng rng(7);
    for (int rep = 0; rep < 1000; ++rep) {
        const int n = static_cast<int>(rng.index(40));
        std::vector<ScoredFrame> scores;
        for (int i = 0; i < n; ++i) {
            // coarse quantization forces frequent ties
            double s = std::floor(rng.uniform(-3.0, 3.0) * 4.0) / 4.0;
            scores.push_back({static_cast<std::int64_t>(i), s});
        }
        const int k = static_cast<int>(rng.index(8));
        REQUIRE(select_topk(scores, k) == topk_oracle(scores, k));
    }
}

namespace {

KVMemoryStore store_with_linear_descriptors(int frames, int chunk_len, int p, int heads, int d) {
    KVMemoryStore store(1, p, heads, d);
    Rng rng(99);
    for (int f = 0; f < frames; ++f) {
        std::vector<double> keys(static_cast<std::size_t>(p) * heads * d);
        for (int pp = 0; pp < p; ++pp)
            for (int i = 0; i < heads * d; ++i)
                keys[static_cast<std::size_t>(pp) * heads * d + i] = (i == 0) ? static_cast<double>(f) : 0.0;
        std::vector<double> values(keys.size());
        rng.fill_normal(values);
        store.append_frame(0, f, f / chunk_len + 1, std::move(keys), std::move(values));
    }
    return store;
}

}  // namespace

TEST_CASE("receptive field: first chunk has no history", "[camr]") {
    KVMemoryStore store(1, 2, 2, 2);
    std::vector<double> qd(4, 0.0);
    auto rf = assemble_receptive_field(1, store.layer(0), 3, 5, qd);
    CHECK(rf.memory_frames.empty());
    CHECK(rf.window_chunk_count() == 0);
    CHECK(rf.current_chunk == 1);
}

TEST_CASE("receptive field: i <= W+1 has window only, no semantic memory", "[camr]") {
    auto store = store_with_linear_descriptors(6, 3, 2, 2, 2);  // chunks 1..2
    std::vector<double> qd(4, 1.0);
    auto rf = assemble_receptive_field(3, store.layer(0), 3, 5, qd);
    CHECK(rf.memory_frames.empty());
    CHECK(rf.window_first_chunk == 1);
    CHECK(rf.window_last_chunk == 2);
}

TEST_CASE("receptive field at i=20, W=3, k=5 picks the top scoring history frames", "[camr]") {
    auto store = store_with_linear_descriptors(19 * 3, 3, 2, 2, 2);  // chunks 1..19 stored
    std::vector<double> qd(4, 0.0);
    qd[0] = 1.0;  // score equals the frame index by construction
    auto rf = assemble_receptive_field(20, store.layer(0), 3, 5, qd);
    CHECK(rf.window_first_chunk == 17);
    CHECK(rf.window_last_chunk == 19);
    // history is chunks 1..16 = frames 0..47; the five largest scores are 43..47
    CHECK(rf.memory_frames == std::vector<std::int64_t>{43, 44, 45, 46, 47});
    // negated query flips the preference to the earliest frames
    qd[0] = -1.0;
    auto rf2 = assemble_receptive_field(20, store.layer(0), 3, 5, qd);
    CHECK(rf2.memory_frames == std::vector<std::int64_t>{0, 1, 2, 3, 4});
}

TEST_CASE("receptive field memory and window are disjoint and bounded", "[camr]") {
    Rng rng(8);
    auto store = store_with_linear_descriptors(60, 3, 2, 2, 2);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> qd(4);
        rng.fill_normal(qd);
        const std::int64_t i = 5 + static_cast<std::int64_t>(rng.index(15));
        auto rf = assemble_receptive_field(i, store.layer(0), 3, 5, qd);
        CHECK(rf.k_selected() <= 5);
        for (std::int64_t f : rf.memory_frames) CHECK(f < (rf.window_first_chunk - 1) * 3);
        // |memory| + W*L + L bounded by k + (W+1)*L
        CHECK(rf.k_selected() + rf.window_chunk_count() * 3 + 3 <= 5 + 4 * 3);
    }
}

TEST_CASE("identical stores and queries give identical receptive fields", "[camr]") {
    auto store = store_with_linear_descriptors(30, 3, 2, 2, 2);
    Rng rng(9);
    std::vector<double> qd(4);
    rng.fill_normal(qd);
    auto a = assemble_receptive_field(9, store.layer(0), 3, 5, qd);
    auto b = assemble_receptive_field(9, store.layer(0), 3, 5, qd);
    CHECK(a.memory_frames == b.memory_frames);
    CHECK(a.window_first_chunk == b.window_first_chunk);
    CHECK(a.window_last_chunk == b.window_last_chunk);
}

TEST_CASE("first-frame-sink policy returns the earliest stored frames", "[camr]") {
    auto store = store_with_linear_descriptors(30, 3, 2, 2, 2);
    std::vector<double> qd(4, 1.0);  // would prefer late frames under camr
    auto rf = assemble_receptive_field(9, store.layer(0), 3, 5, qd, MemoryPolicy::kFirstFrameSink);
    CHECK(rf.memory_frames == std::vector<std::int64_t>{0, 1, 2, 3, 4});
}

TEST_CASE("per-layer stores route independently", "[camr]") {
    KVMemoryStore store(2, 1, 1, 2);
    // layer 0 descriptors rise with the frame, layer 1 descriptors fall
    for (int f = 0; f < 12; ++f) {
        store.append_frame(0, f, f / 2 + 1, {static_cast<double>(f), 0.0}, {0.0, 0.0});
        store.append_frame(1, f, f / 2 + 1, {static_cast<double>(-f), 0.0}, {0.0, 0.0});
    }
    std::vector<double> qd{1.0, 0.0};
    auto rf0 = assemble_receptive_field(7, store.layer(0), 2, 2, qd);
    auto rf1 = assemble_receptive_field(7, store.layer(1), 2, 2, qd);
    CHECK(rf0.memory_frames == std::vector<std::int64_t>{6, 7});
    CHECK(rf1.memory_frames == std::vector<std::int64_t>{0, 1});
}

TEST_CASE("store enforces strictly increasing frame indices", "[camr]") {
    KVMemoryStore store(1, 1, 1, 2);
    store.append_frame(0, 0, 1, {1.0, 0.0}, {0.0, 0.0});
    CHECK_THROWS_AS(store.append_frame(0, 0, 1, {1.0, 0.0}, {0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("optional frame cap drops oldest entries", "[camr]") {
    KVMemoryStore store(1, 1, 1, 2, 4);
    for (int f = 0; f < 10; ++f) store.append_frame(0, f, f + 1, {1.0, 0.0}, {0.0, 0.0});
    REQUIRE(store.layer(0).size() == 4);
    CHECK(store.layer(0).front().frame_index == 6);
    CHECK(store.layer(0).back().frame_index == 9);
}

TEST_CASE("descriptors are fixed at insertion and match a recomputation", "[camr]") {
    Rng rng(10);
    KVMemoryStore store(1, 4, 2, 3);
    std::vector<double> keys(4 * 6), values(4 * 6);
    rng.fill_normal(keys);
    rng.fill_normal(values);
    auto expected = frame_descriptor(keys, 4, 2, 3);
    store.append_frame(0, 0, 1, std::move(keys), std::move(values));
    CHECK(store.layer(0)[0].descriptor == expected);
}

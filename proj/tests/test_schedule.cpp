#include <catch2/catch_amalgamated.hpp>

#include "chunkflow/schedule.hpp"

using namespace chunkflow;

TEST_CASE("single shot maps every chunk to shot 1", "[schedule]") {
    auto s = ShotSchedule::from_seeds({7}, {}, 8);
    for (int i = 1; i <= 10; ++i) CHECK(shot_of_chunk(i, s, 3) == 1);
}

TEST_CASE("boundary at frame 6 with L=3 splits chunks 1-2 from 3+", "[schedule]") {
    auto s = ShotSchedule::from_seeds({1, 2}, {6}, 8);
    CHECK(shot_of_chunk(1, s, 3) == 1);
    CHECK(shot_of_chunk(2, s, 3) == 1);
    CHECK(shot_of_chunk(3, s, 3) == 2);
    CHECK(shot_of_chunk(5, s, 3) == 2);
}

TEST_CASE("boundary not aligned to L is a construction error", "[schedule]") {
    auto s = ShotSchedule::from_seeds({1, 2}, {7}, 8);
    CHECK_THROWS_AS(validate(s, 3), std::invalid_argument);
}

TEST_CASE("shot_of_chunk is monotone non-decreasing in chunk index", "[schedule]") {
    auto s = ShotSchedule::from_seeds({1, 2, 3, 4}, {6, 12, 24}, 8);
    int prev = 1;
    for (int i = 1; i <= 12; ++i) {
        int shot = shot_of_chunk(i, s, 3);
        CHECK(shot >= prev);
        prev = shot;
    }
    CHECK(prev == 4);
}

TEST_CASE("every frame belongs to exactly one shot", "[schedule]") {
    auto s = ShotSchedule::from_seeds({1, 2, 3}, {4, 10}, 8);
    std::vector<int> count(3, 0);
    for (std::int64_t f = 0; f < 16; ++f) {
        int shot = shot_of_frame(f, s);
        REQUIRE(shot >= 1);
        REQUIRE(shot <= 3);
        ++count[static_cast<std::size_t>(shot) - 1];
    }
    CHECK(count[0] == 4);
    CHECK(count[1] == 6);
    CHECK(count[2] == 6);
}

TEST_CASE("schedule json round trip preserves structure and prompts", "[schedule]") {
    auto s = ShotSchedule::from_seeds({11, 22, 33}, {6, 18}, 12);
    auto j = to_json(s, 3);
    CHECK(j.at("L") == 3);
    int l = 0;
    auto back = schedule_from_json(j, 12, &l);
    CHECK(l == 3);
    CHECK(back.boundaries == s.boundaries);
    CHECK(back.prompt_seeds == s.prompt_seeds);
    REQUIRE(back.prompts.size() == s.prompts.size());
    for (std::size_t i = 0; i < s.prompts.size(); ++i) CHECK(back.prompts[i] == s.prompts[i]);
}

TEST_CASE("boundaries beyond the sequence are rejected", "[schedule]") {
    auto s = ShotSchedule::from_seeds({1, 2}, {12}, 8);
    CHECK_THROWS_AS(validate(s, 3, 12), std::invalid_argument);
    CHECK_NOTHROW(validate(s, 3, 15));
}

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"

#include "chunkflow/common.hpp"
#include "chunkflow/rng.hpp"

namespace chunkflow {

// Prompt embeddings are derived deterministically from integer seeds so
// schedules serialize as plain numbers.
inline std::vector<double> prompt_embedding(std::uint64_t seed, int dim) {
    require(dim >= 1, "prompt_embedding: dim must be >= 1");
    Rng rng(mix_seed(seed, 0x70726f6d70ull));  // "promp"
    std::vector<double> e(static_cast<std::size_t>(dim));
    double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    rng.fill_normal(e, scale);
    return e;
}

// Shot boundaries in latent-frame units (0-based frame indices; boundary b_s
// is the first frame of shot s+1) plus one prompt embedding per shot.
// Shots and chunks are 1-based throughout.
struct ShotSchedule {
    std::vector<std::int64_t> boundaries;        // strictly increasing, size S-1
    std::vector<std::vector<double>> prompts;    // size S
    std::vector<std::uint64_t> prompt_seeds;     // size S when seed-derived, else empty

    int shot_count() const { return static_cast<int>(prompts.size()); }

    static ShotSchedule from_seeds(std::vector<std::uint64_t> seeds, std::vector<std::int64_t> bounds, int prompt_dim) {
        ShotSchedule s;
        s.boundaries = std::move(bounds);
        s.prompt_seeds = std::move(seeds);
        s.prompts.reserve(s.prompt_seeds.size());
        for (auto seed : s.prompt_seeds) s.prompts.push_back(prompt_embedding(seed, prompt_dim));
        return s;
    }
};

// total_frames < 0 means open-ended (streaming sessions grow the sequence).
inline void validate(const ShotSchedule& s, int chunk_len, std::int64_t total_frames = -1) {
    require(chunk_len >= 1, "schedule: L must be >= 1");
    require(!s.prompts.empty(), "schedule: needs at least one shot prompt");
    require(s.boundaries.size() + 1 == s.prompts.size(), "schedule: |boundaries| must be |prompts| - 1");
    std::int64_t prev = 0;
    for (std::int64_t b : s.boundaries) {
        require(b > prev, "schedule: boundaries must be strictly increasing and > 0");
        require(b % chunk_len == 0, "schedule: boundary not aligned to chunk length L");
        prev = b;
    }
    if (total_frames >= 0 && !s.boundaries.empty())
        require(s.boundaries.back() < total_frames, "schedule: boundary beyond sequence end");
    for (const auto& p : s.prompts) require(p.size() == s.prompts.front().size(), "schedule: prompt widths differ");
}

// Shot containing a 0-based frame index, 1-based result.
inline int shot_of_frame(std::int64_t frame, const ShotSchedule& s) {
    int shot = 1;
    for (std::int64_t b : s.boundaries) {
        if (frame >= b) ++shot;
        else break;
    }
    return shot;
}

// Shot containing chunk `chunk_index` (1-based). The schedule must be
// L-aligned so the whole chunk lies in one shot.
inline int shot_of_chunk(std::int64_t chunk_index, const ShotSchedule& s, int chunk_len) {
    require(chunk_index >= 1, "shot_of_chunk: chunk index is 1-based");
    validate(s, chunk_len);
    return shot_of_frame((chunk_index - 1) * chunk_len, s);
}

inline nlohmann::json to_json(const ShotSchedule& s, int chunk_len) {
    require(!s.prompt_seeds.empty(), "schedule: serialization requires seed-derived prompts");
    return nlohmann::json{{"L", chunk_len}, {"boundaries", s.boundaries}, {"prompt_seeds", s.prompt_seeds}};
}

inline ShotSchedule schedule_from_json(const nlohmann::json& j, int prompt_dim, int* chunk_len_out = nullptr) {
    ensure(j.contains("L") && j.contains("boundaries") && j.contains("prompt_seeds"), "schedule json: missing fields");
    int chunk_len = j.at("L").get<int>();
    auto s = ShotSchedule::from_seeds(j.at("prompt_seeds").get<std::vector<std::uint64_t>>(),
                                      j.at("boundaries").get<std::vector<std::int64_t>>(), prompt_dim);
    validate(s, chunk_len);
    if (chunk_len_out) *chunk_len_out = chunk_len;
    return s;
}

}  // namespace chunkflow

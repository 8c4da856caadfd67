#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "chunkflow/common.hpp"
#include "chunkflow/latent.hpp"
#include "chunkflow/rng.hpp"
#include "chunkflow/schedule.hpp"

namespace chunkflow {

// Synthetic multi-shot latent streams. Per-shot backgrounds are a fixed
// global linear map of the shot's prompt embedding (so prompt -> background
// is learnable across fresh scenarios) plus a decaying per-shot transient.
// Entities are random additive patches recorded with exact placements, so
// recall after a multi-shot gap has ground truth: their content appears only
// in the frames themselves, never in any prompt.

struct EntitySpec {
    double gain = 1.5;     // L2 norm of the patch pattern
    int entry_offset = 0;  // frames after the start of shot 1 before the entity appears
    int patch_h = 1;
    int patch_w = 1;
};

struct ScenarioSpec {
    int shots = 5;
    int chunks_per_shot = 3;
    int chunk_len = 3;
    LatentShape latent{4, 2, 2};
    int prompt_dim = 12;
    std::vector<EntitySpec> entities{{1.5, 0, 1, 1}, {1.5, 5, 1, 1}};
    double bg_scale = 0.5;
    double transient_scale = 0.6;
    double transient_decay = 0.5;
    std::uint64_t world_seed = 77;   // seeds the global prompt->background modes
    bool reuse_first_prompt = true;  // final shot returns to shot 1's prompt
};

inline void validate(const ScenarioSpec& s) {
    require(s.shots >= 1 && s.chunks_per_shot >= 1 && s.chunk_len >= 1, "scenario: counts must be >= 1");
    validate(s.latent);
    require(s.prompt_dim >= 1, "scenario: prompt_dim must be >= 1");
    for (const auto& e : s.entities) {
        require(e.gain > 0.0, "scenario: entity gain must be positive");
        require(e.entry_offset >= 0 && e.entry_offset < s.chunks_per_shot * s.chunk_len,
                "scenario: entity entry offset outside shot 1");
        require(e.patch_h >= 1 && e.patch_h <= s.latent.height && e.patch_w >= 1 && e.patch_w <= s.latent.width,
                "scenario: patch exceeds the frame");
    }
}

struct EntityRecord {
    std::vector<double> pattern;  // C x patch_h x patch_w, additive
    int y = 0, x = 0;
    int patch_h = 1, patch_w = 1;
    std::vector<std::int64_t> frames;  // global frames where the entity is present
};

struct Scenario {
    int chunk_len = 3;
    std::vector<LatentFrame> frames;
    ShotSchedule schedule;
    std::vector<EntityRecord> records;
};

// Global low-rank background modes: one C x H x W grid per prompt dimension,
// fixed by world_seed across all scenarios.
inline std::vector<std::vector<double>> world_modes(const ScenarioSpec& spec) {
    Rng rng(mix_seed(spec.world_seed, 0x776f726cull));  // "worl"
    std::vector<std::vector<double>> modes(static_cast<std::size_t>(spec.prompt_dim));
    for (auto& m : modes) {
        m.resize(static_cast<std::size_t>(spec.latent.frame_values()));
        rng.fill_normal(m);
    }
    return modes;
}

inline Scenario gen_scenario(const ScenarioSpec& spec, Rng& rng) {
    validate(spec);
    const auto modes = world_modes(spec);
    const int frames_per_shot = spec.chunks_per_shot * spec.chunk_len;
    const int total_frames = spec.shots * frames_per_shot;
    const int fv = spec.latent.frame_values();

    Scenario sc;
    sc.chunk_len = spec.chunk_len;

    std::vector<std::uint64_t> seeds;
    std::vector<std::int64_t> bounds;
    for (int s = 0; s < spec.shots; ++s) {
        seeds.push_back(rng.next_u64());
        if (s > 0) bounds.push_back(static_cast<std::int64_t>(s) * frames_per_shot);
    }
    if (spec.reuse_first_prompt && spec.shots >= 2) seeds.back() = seeds.front();
    sc.schedule = ShotSchedule::from_seeds(seeds, bounds, spec.prompt_dim);
    validate(sc.schedule, spec.chunk_len, total_frames);

    // backgrounds: linear in the prompt embedding, plus a decaying transient
    sc.frames.assign(static_cast<std::size_t>(total_frames), LatentFrame(spec.latent));
    for (int s = 0; s < spec.shots; ++s) {
        std::vector<double> bg(static_cast<std::size_t>(fv), 0.0);
        const auto& prompt = sc.schedule.prompts[static_cast<std::size_t>(s)];
        // prompt components have variance 1/dim, so the mode sum has unit
        // variance and bg_scale sets the background amplitude directly
        for (int j = 0; j < spec.prompt_dim; ++j)
            for (int i = 0; i < fv; ++i)
                bg[static_cast<std::size_t>(i)] += prompt[static_cast<std::size_t>(j)] * modes[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
        for (int i = 0; i < fv; ++i) bg[static_cast<std::size_t>(i)] *= spec.bg_scale;
        std::vector<double> transient(static_cast<std::size_t>(fv));
        rng.fill_normal(transient);
        for (int f = 0; f < frames_per_shot; ++f) {
            auto& frame = sc.frames[static_cast<std::size_t>(s) * frames_per_shot + f];
            const double decay = spec.transient_scale * std::pow(spec.transient_decay, f);
            for (int i = 0; i < fv; ++i)
                frame.values[static_cast<std::size_t>(i)] =
                    bg[static_cast<std::size_t>(i)] + decay * transient[static_cast<std::size_t>(i)];
        }
    }

    // entities: appear in shot 1 (after their entry offset) and again through
    // the final shot; identical pattern and placement at every appearance
    for (const auto& espec : spec.entities) {
        EntityRecord rec;
        rec.patch_h = espec.patch_h;
        rec.patch_w = espec.patch_w;
        rec.pattern.resize(static_cast<std::size_t>(spec.latent.channels) * espec.patch_h * espec.patch_w);
        rng.fill_normal(rec.pattern);
        double norm = 0.0;
        for (double v : rec.pattern) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : rec.pattern) v *= espec.gain / norm;
        rec.y = static_cast<int>(rng.index(static_cast<std::size_t>(spec.latent.height - espec.patch_h + 1)));
        rec.x = static_cast<int>(rng.index(static_cast<std::size_t>(spec.latent.width - espec.patch_w + 1)));
        for (int f = espec.entry_offset; f < frames_per_shot; ++f) rec.frames.push_back(f);
        if (spec.shots >= 2) {
            const std::int64_t last_start = static_cast<std::int64_t>(spec.shots - 1) * frames_per_shot;
            for (int f = 0; f < frames_per_shot; ++f) rec.frames.push_back(last_start + f);
        }
        for (std::int64_t f : rec.frames) {
            auto& frame = sc.frames[static_cast<std::size_t>(f)];
            for (int c = 0; c < spec.latent.channels; ++c)
                for (int py = 0; py < espec.patch_h; ++py)
                    for (int px = 0; px < espec.patch_w; ++px)
                        frame.at(c, rec.y + py, rec.x + px) +=
                            rec.pattern[(static_cast<std::size_t>(c) * espec.patch_h + py) * espec.patch_w + px];
        }
        sc.records.push_back(std::move(rec));
    }
    return sc;
}

// Normalized L2 distance between the generated patch at the recorded
// placement and the entity pattern, over the appearance frames covered by the
// chunk. Placements outside the chunk are rejected.
inline double recall_error(const LatentChunk& chunk, const EntityRecord& rec) {
    const std::int64_t first = chunk.first_frame();
    const std::int64_t last = first + static_cast<std::int64_t>(chunk.frames.size()) - 1;
    double dist = 0.0, norm = 0.0;
    bool any = false;
    for (std::int64_t f : rec.frames) {
        if (f < first || f > last) continue;
        any = true;
        const auto& frame = chunk.frames[static_cast<std::size_t>(f - first)];
        for (int c = 0; c < frame.shape.channels; ++c)
            for (int py = 0; py < rec.patch_h; ++py)
                for (int px = 0; px < rec.patch_w; ++px) {
                    const double want =
                        rec.pattern[(static_cast<std::size_t>(c) * rec.patch_h + py) * rec.patch_w + px];
                    const double got = frame.at(c, rec.y + py, rec.x + px);
                    dist += (got - want) * (got - want);
                    norm += want * want;
                }
    }
    require(any, "recall_error: record placement outside the chunk");
    return std::sqrt(dist) / std::sqrt(norm);
}

// Shot-cut proxy: fraction of true boundaries whose inter-chunk jump in the
// time-averaged frame statistic exceeds the 95th percentile of within-shot
// jumps.
inline double shotcut_proxy(const std::vector<LatentChunk>& chunks, const ShotSchedule& schedule) {
    require(schedule.shot_count() >= 2, "shotcut_proxy: needs at least two shots");
    require(chunks.size() >= 2, "shotcut_proxy: needs at least two chunks");
    const int chunk_len = static_cast<int>(chunks.front().frames.size());
    const int fv = chunks.front().frames.front().shape.frame_values();

    std::vector<std::vector<double>> stats;
    for (const auto& c : chunks) {
        std::vector<double> mean(static_cast<std::size_t>(fv), 0.0);
        for (const auto& f : c.frames)
            for (int i = 0; i < fv; ++i) mean[static_cast<std::size_t>(i)] += f.values[static_cast<std::size_t>(i)];
        for (double& v : mean) v /= static_cast<double>(c.frames.size());
        stats.push_back(std::move(mean));
    }
    std::vector<double> jumps(stats.size() - 1);
    for (std::size_t j = 0; j + 1 < stats.size(); ++j) {
        double d = 0.0;
        for (int i = 0; i < fv; ++i) {
            const double diff = stats[j + 1][static_cast<std::size_t>(i)] - stats[j][static_cast<std::size_t>(i)];
            d += diff * diff;
        }
        jumps[j] = std::sqrt(d);
    }
    // a boundary at frame b separates chunk b/L and b/L + 1 -> jump index b/L - 1
    std::vector<bool> is_boundary(jumps.size(), false);
    int boundaries_in_range = 0;
    for (std::int64_t b : schedule.boundaries) {
        const std::int64_t j = b / chunk_len - 1;
        if (j >= 0 && j < static_cast<std::int64_t>(jumps.size())) {
            is_boundary[static_cast<std::size_t>(j)] = true;
            ++boundaries_in_range;
        }
    }
    require(boundaries_in_range > 0, "shotcut_proxy: no boundary falls inside the chunk range");
    std::vector<double> within;
    for (std::size_t j = 0; j < jumps.size(); ++j)
        if (!is_boundary[j]) within.push_back(jumps[j]);
    double threshold = 0.0;
    if (!within.empty()) {
        std::sort(within.begin(), within.end());
        const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(within.size()))) - 1;
        threshold = within[std::min(idx, within.size() - 1)];
    }
    int hits = 0;
    for (std::size_t j = 0; j < jumps.size(); ++j)
        if (is_boundary[j] && jumps[j] > threshold) ++hits;
    return static_cast<double>(hits) / boundaries_in_range;
}

}  // namespace chunkflow

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "chunkflow/common.hpp"
#include "chunkflow/mask.hpp"

namespace chunkflow {

// Content-aware memory routing: frames are addressed by the spatial mean of
// their attention keys; a chunk scores every out-of-window history frame with
// a head-aggregated dot product and keeps the top-k. Parameter-free; the same
// functions drive teacher-forcing training and streaming inference.

// d_f = mean over the P spatial tokens of a frame's keys (keys laid out
// token-major: P x heads x head_dim).
inline std::vector<double> frame_descriptor(std::span<const double> keys, int spatial_tokens, int heads,
                                            int head_dim) {
    require(spatial_tokens >= 1, "frame_descriptor: P must be >= 1");
    const std::size_t hd = static_cast<std::size_t>(heads) * head_dim;
    require(keys.size() == hd * spatial_tokens, "frame_descriptor: key count mismatch");
    std::vector<double> d(hd, 0.0);
    for (int p = 0; p < spatial_tokens; ++p)
        for (std::size_t i = 0; i < hd; ++i) d[i] += keys[static_cast<std::size_t>(p) * hd + i];
    for (double& x : d) x /= spatial_tokens;
    return d;
}

// One routing decision per chunk: mean over the chunk's L*P query tokens.
inline std::vector<double> chunk_query_descriptor(std::span<const double> queries, int chunk_len, int spatial_tokens,
                                                  int heads, int head_dim) {
    require(chunk_len >= 1 && spatial_tokens >= 1, "chunk_query_descriptor: L and P must be >= 1");
    const std::size_t hd = static_cast<std::size_t>(heads) * head_dim;
    const std::size_t n = static_cast<std::size_t>(chunk_len) * spatial_tokens;
    require(queries.size() == hd * n, "chunk_query_descriptor: query count mismatch");
    std::vector<double> q(hd, 0.0);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i < hd; ++i) q[i] += queries[t * hd + i];
    for (double& x : q) x /= static_cast<double>(n);
    return q;
}

// s = sum_{h,d} q[h,d] * d[h,d]; no 1/sqrt(D) scaling.
inline double route_score(std::span<const double> query_desc, std::span<const double> frame_desc) {
    require(query_desc.size() == frame_desc.size(), "route_score: descriptor shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < query_desc.size(); ++i) s += query_desc[i] * frame_desc[i];
    return s;
}

struct ScoredFrame {
    std::int64_t frame = 0;
    double score = 0.0;
};

// Top-k by score, ties broken toward the earlier frame; result sorted by
// ascending frame index for position assignment.
inline std::vector<std::int64_t> select_topk(std::vector<ScoredFrame> scores, int k) {
    require(k >= 0, "select_topk: k must be >= 0");
    if (k == 0 || scores.empty()) return {};
    auto better = [](const ScoredFrame& a, const ScoredFrame& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.frame < b.frame;
    };
    if (scores.size() > static_cast<std::size_t>(k)) {
        std::nth_element(scores.begin(), scores.begin() + k - 1, scores.end(), better);
        scores.resize(static_cast<std::size_t>(k));
    }
    std::vector<std::int64_t> out;
    out.reserve(scores.size());
    for (const auto& s : scores) out.push_back(s.frame);
    std::sort(out.begin(), out.end());
    return out;
}

enum class MemoryPolicy {
    kCamr,            // content-routed top-k
    kFirstFrameSink,  // first k stored frames, ignoring scores
};

// One frame of cached attention state. Keys are stored unrotated; the
// descriptor is fixed at insertion (keys are immutable afterwards).
struct FrameEntry {
    std::int64_t frame_index = 0;
    std::int64_t chunk_index = 0;
    std::vector<double> keys;    // P x heads x head_dim
    std::vector<double> values;  // P x heads x head_dim
    std::vector<double> descriptor;
};

// Append-only per-layer KV store. An optional frame cap drops oldest entries
// for constrained runs; default is unlimited.
class KVMemoryStore {
public:
    KVMemoryStore() = default;
    KVMemoryStore(int layers, int spatial_tokens, int heads, int head_dim, std::int64_t max_store_frames = 0)
        : p_(spatial_tokens), heads_(heads), head_dim_(head_dim), cap_(max_store_frames),
          layers_(static_cast<std::size_t>(layers)) {
        require(layers >= 1, "kv store: needs at least one layer");
    }

    int layer_count() const { return static_cast<int>(layers_.size()); }
    int spatial_tokens() const { return p_; }
    int heads() const { return heads_; }
    int head_dim() const { return head_dim_; }
    std::int64_t frame_cap() const { return cap_; }

    const std::vector<FrameEntry>& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

    std::int64_t frames_stored() const { return layers_.empty() ? 0 : static_cast<std::int64_t>(layers_[0].size()); }

    void append_frame(int l, std::int64_t frame_index, std::int64_t chunk_index, std::vector<double> keys,
                      std::vector<double> values) {
        auto& entries = layers_[static_cast<std::size_t>(l)];
        require(entries.empty() || frame_index > entries.back().frame_index,
                "kv store: frame indices must be strictly increasing");
        FrameEntry e;
        e.frame_index = frame_index;
        e.chunk_index = chunk_index;
        e.descriptor = frame_descriptor(keys, p_, heads_, head_dim_);
        e.keys = std::move(keys);
        e.values = std::move(values);
        entries.push_back(std::move(e));
        if (cap_ > 0 && static_cast<std::int64_t>(entries.size()) > cap_)
            entries.erase(entries.begin(), entries.begin() + (static_cast<std::ptrdiff_t>(entries.size()) - cap_));
    }

    bool operator==(const KVMemoryStore& o) const {
        if (layer_count() != o.layer_count() || p_ != o.p_ || heads_ != o.heads_ || head_dim_ != o.head_dim_)
            return false;
        for (int l = 0; l < layer_count(); ++l) {
            const auto& a = layer(l);
            const auto& b = o.layer(l);
            if (a.size() != b.size()) return false;
            for (std::size_t i = 0; i < a.size(); ++i)
                if (a[i].frame_index != b[i].frame_index || a[i].chunk_index != b[i].chunk_index ||
                    a[i].keys != b[i].keys || a[i].values != b[i].values || a[i].descriptor != b[i].descriptor)
                    return false;
        }
        return true;
    }

private:
    int p_ = 1;
    int heads_ = 1;
    int head_dim_ = 2;
    std::int64_t cap_ = 0;
    std::vector<std::vector<FrameEntry>> layers_;
};

// Bounded key set a chunk attends to: top-k semantic memory out of window,
// the local window of (up to) W preceding chunks, and the current chunk.
struct ReceptiveField {
    std::int64_t current_chunk = 1;
    std::int64_t window_first_chunk = 1;  // empty window iff first > last
    std::int64_t window_last_chunk = 0;
    std::vector<std::int64_t> memory_frames;  // ascending, all precede the window

    int window_chunk_count() const {
        return window_last_chunk < window_first_chunk ? 0 : static_cast<int>(window_last_chunk - window_first_chunk + 1);
    }
    int k_selected() const { return static_cast<int>(memory_frames.size()); }

    // Clean frames visible to this chunk (memory then window), as mask routing.
    std::vector<std::int64_t> visible_clean_frames(int chunk_len) const {
        std::vector<std::int64_t> out = memory_frames;
        for (std::int64_t c = window_first_chunk; c <= window_last_chunk; ++c)
            for (int f = 0; f < chunk_len; ++f) out.push_back((c - 1) * chunk_len + f);
        return out;
    }
};

// Non-owning view of one cached frame's routing address; lets teacher-forcing
// training (in-flight keys) and streaming inference (KVMemoryStore) share one
// routing implementation.
struct FrameMeta {
    std::int64_t frame_index = 0;
    std::int64_t chunk_index = 0;
    const double* descriptor = nullptr;  // heads * head_dim
};

// Routing for chunk `chunk_index` given the history frames of chunks
// < chunk_index (phase-separated append/retrieve contract).
inline ReceptiveField assemble_receptive_field(std::int64_t chunk_index, std::span<const FrameMeta> history,
                                               int window_chunks, int k, std::span<const double> query_desc,
                                               MemoryPolicy policy = MemoryPolicy::kCamr) {
    require(chunk_index >= 1, "assemble_receptive_field: chunk index is 1-based");
    require(window_chunks >= 0 && k >= 0, "assemble_receptive_field: W and k must be >= 0");
    ReceptiveField rf;
    rf.current_chunk = chunk_index;
    rf.window_first_chunk = std::max<std::int64_t>(1, chunk_index - window_chunks);
    rf.window_last_chunk = chunk_index - 1;
    if (k > 0) {
        std::vector<ScoredFrame> scored;
        for (const auto& e : history) {
            if (e.chunk_index >= rf.window_first_chunk) continue;  // in window or current
            if (policy == MemoryPolicy::kFirstFrameSink) {
                if (static_cast<int>(scored.size()) < k) scored.push_back({e.frame_index, 0.0});
            } else {
                std::span<const double> d(e.descriptor, query_desc.size());
                scored.push_back({e.frame_index, route_score(query_desc, d)});
            }
        }
        if (policy == MemoryPolicy::kFirstFrameSink) {
            for (const auto& s : scored) rf.memory_frames.push_back(s.frame);
        } else {
            rf.memory_frames = select_topk(std::move(scored), k);
        }
    }
    return rf;
}

inline ReceptiveField assemble_receptive_field(std::int64_t chunk_index, const std::vector<FrameEntry>& entries,
                                               int window_chunks, int k, std::span<const double> query_desc,
                                               MemoryPolicy policy = MemoryPolicy::kCamr) {
    std::vector<FrameMeta> meta;
    meta.reserve(entries.size());
    for (const auto& e : entries) meta.push_back({e.frame_index, e.chunk_index, e.descriptor.data()});
    return assemble_receptive_field(chunk_index, std::span<const FrameMeta>(meta), window_chunks, k, query_desc,
                                    policy);
}

}  // namespace chunkflow

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chunkflow/common.hpp"

namespace chunkflow {

// Visible clean frames for one query chunk when routing sparsifies history.
// Frame indices are global (0-based); the set replaces the "all preceding
// clean chunks" default for out-of-window history.
struct ChunkRouting {
    std::vector<std::int64_t> clean_frames;  // sorted ascending
};

using RoutingTable = std::vector<ChunkRouting>;  // size N, entry i-1 for chunk i

// Boolean visibility over (query frame, key frame) pairs of the packed
// 2N-segment layout, frame-block granularity. Rows/cols 0..NL-1 are the clean
// copies of frames 0..NL-1; rows/cols NL..2NL-1 are the noisy copies.
class VisibilityMask {
public:
    VisibilityMask(int n_chunks, int chunk_len)
        : n_(n_chunks), l_(chunk_len), bits_(static_cast<std::size_t>(2 * n_chunks * chunk_len) *
                                             static_cast<std::size_t>(2 * n_chunks * chunk_len)) {}

    int chunks() const { return n_; }
    int chunk_len() const { return l_; }
    int packed_frames() const { return 2 * n_ * l_; }

    bool visible(int query_frame, int key_frame) const {
        return bits_[static_cast<std::size_t>(query_frame) * packed_frames() + key_frame] != 0;
    }
    void set(int query_frame, int key_frame, bool v) {
        bits_[static_cast<std::size_t>(query_frame) * packed_frames() + key_frame] = v ? 1 : 0;
    }

    bool operator==(const VisibilityMask& o) const = default;

private:
    int n_;
    int l_;
    std::vector<std::uint8_t> bits_;
};

namespace detail {

inline void check_routing(const RoutingTable& routing, int n_chunks, int chunk_len) {
    require(routing.size() == static_cast<std::size_t>(n_chunks), "routing: need one entry per chunk");
    for (const auto& r : routing)
        for (std::int64_t f : r.clean_frames)
            require(f >= 0 && f < static_cast<std::int64_t>(n_chunks) * chunk_len,
                    "routing: frame refers to a non-existent chunk");
}

// History visibility for a query in chunk `qc` (1-based): default is every
// frame of chunks < qc; with routing, the routed set intersected with
// chunks < qc.
inline bool history_visible(int qc, std::int64_t key_frame, int chunk_len, const ChunkRouting* routed) {
    std::int64_t kc = key_frame / chunk_len + 1;
    if (kc >= qc) return false;
    if (!routed) return true;
    for (std::int64_t f : routed->clean_frames)
        if (f == key_frame) return true;
    return false;
}

}  // namespace detail

// Quadrant rules of the 2N-segment teacher-forcing layout:
//   clean->clean  chunk i sees preceding clean chunks and itself
//   noisy->clean  chunk i sees clean chunks < i
//   noisy->noisy  diagonal only (a chunk sees its own noisy copy)
//   clean->noisy  fully masked
// `noisy_routing` / `clean_routing` restrict the history halves of the first
// two rules to routed receptive fields (window + retrieved memory).
inline VisibilityMask build_tf_mask(int n_chunks, int chunk_len, const RoutingTable* noisy_routing = nullptr,
                                    const RoutingTable* clean_routing = nullptr) {
    require(n_chunks >= 1 && chunk_len >= 1, "build_tf_mask: N and L must be >= 1");
    if (noisy_routing) detail::check_routing(*noisy_routing, n_chunks, chunk_len);
    if (clean_routing) detail::check_routing(*clean_routing, n_chunks, chunk_len);

    VisibilityMask m(n_chunks, chunk_len);
    const int nl = n_chunks * chunk_len;
    for (int qf = 0; qf < 2 * nl; ++qf) {
        const bool q_noisy = qf >= nl;
        const int q_frame = q_noisy ? qf - nl : qf;
        const int qc = q_frame / chunk_len + 1;
        const RoutingTable* table = q_noisy ? noisy_routing : clean_routing;
        const ChunkRouting* routed = table ? &(*table)[static_cast<std::size_t>(qc) - 1] : nullptr;
        for (int kf = 0; kf < 2 * nl; ++kf) {
            const bool k_noisy = kf >= nl;
            const int k_frame = k_noisy ? kf - nl : kf;
            const int kc = k_frame / chunk_len + 1;
            bool v = false;
            if (q_noisy && k_noisy) {
                v = (qc == kc);
            } else if (!q_noisy && !k_noisy) {
                v = (qc == kc) || detail::history_visible(qc, k_frame, chunk_len, routed);
            } else if (q_noisy && !k_noisy) {
                v = detail::history_visible(qc, k_frame, chunk_len, routed);
            }  // clean query, noisy key: never
            m.set(qf, kf, v);
        }
    }
    return m;
}

// Packed segment -> prompt index (0-based into schedule.prompts). Clean
// segment i and noisy segment N+i share pi(i); cross-attention to any other
// shot's prompt is forbidden.
template <typename Schedule>
std::vector<int> build_cross_routing(int n_chunks, const Schedule& schedule, int chunk_len) {
    require(n_chunks >= 1, "build_cross_routing: N must be >= 1");
    std::vector<int> seg_prompt(static_cast<std::size_t>(2 * n_chunks));
    for (int i = 1; i <= n_chunks; ++i) {
        int prompt = shot_of_chunk(i, schedule, chunk_len) - 1;
        seg_prompt[static_cast<std::size_t>(i) - 1] = prompt;
        seg_prompt[static_cast<std::size_t>(n_chunks + i) - 1] = prompt;
    }
    return seg_prompt;
}

// ASCII rendering for documentation and golden tests: rows are query frames,
// '#' marks a visible key, '.' masked; a blank band separates the clean and
// noisy halves.
inline std::string ascii_grid(const VisibilityMask& m) {
    std::string out;
    const int nl = m.packed_frames() / 2;
    for (int qf = 0; qf < m.packed_frames(); ++qf) {
        if (qf == nl) out.push_back('\n');
        for (int kf = 0; kf < m.packed_frames(); ++kf) {
            if (kf == nl) out.push_back(' ');
            out.push_back(m.visible(qf, kf) ? '#' : '.');
        }
        out.push_back('\n');
    }
    return out;
}

}  // namespace chunkflow

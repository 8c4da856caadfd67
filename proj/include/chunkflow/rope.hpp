#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "chunkflow/common.hpp"

namespace chunkflow {

// Rotary positions on the temporal axis. Keys live unrotated in the cache and
// are rotated per query block after retrieval, so the training horizon
// F_train bounds every phase a rollout can emit.
struct RopeConfig {
    int head_dim = 16;
    double base = 10000.0;
    std::int64_t f_train = 61;
};

inline void validate(const RopeConfig& c) {
    require(c.head_dim >= 2 && c.head_dim % 2 == 0, "rope: head_dim must be even and >= 2");
    require(c.base > 1.0, "rope: base must exceed 1");
    require(c.f_train >= 1, "rope: f_train must be >= 1");
}

class RopeTable {
public:
    RopeTable() = default;
    explicit RopeTable(const RopeConfig& c) : cfg_(c) {
        validate(c);
        inv_freq_.resize(static_cast<std::size_t>(c.head_dim) / 2);
        for (std::size_t m = 0; m < inv_freq_.size(); ++m)
            inv_freq_[m] = std::pow(c.base, -2.0 * static_cast<double>(m) / c.head_dim);
    }

    const RopeConfig& config() const { return cfg_; }

    // In-place rotation of one head vector; position may be negative for the
    // inverse rotation (transpose of the forward map).
    void rotate(std::span<double> head_vec, std::int64_t position) const {
        for (std::size_t m = 0; m < inv_freq_.size(); ++m) {
            double theta = static_cast<double>(position) * inv_freq_[m];
            double c = std::cos(theta), s = std::sin(theta);
            double a = head_vec[2 * m], b = head_vec[2 * m + 1];
            head_vec[2 * m] = a * c - b * s;
            head_vec[2 * m + 1] = a * s + b * c;
        }
    }

private:
    RopeConfig cfg_;
    std::vector<double> inv_freq_;
};

// Rotate a batch of per-token head stacks (heads x head_dim per token).
// Positions must be non-negative and within the training horizon.
inline std::vector<double> rotate_tokens(std::span<const double> vectors, int n_tokens, int heads,
                                         std::span<const std::int64_t> positions, const RopeTable& table) {
    const int d = table.config().head_dim;
    require(static_cast<int>(positions.size()) == n_tokens, "rotate: one position per token");
    require(vectors.size() == static_cast<std::size_t>(n_tokens) * heads * d, "rotate: vector count mismatch");
    for (std::int64_t p : positions) require(p >= 0, "rotate: positions must be non-negative");
    std::vector<double> out(vectors.begin(), vectors.end());
    for (int t = 0; t < n_tokens; ++t)
        for (int h = 0; h < heads; ++h)
            table.rotate(std::span<double>(out.data() + (static_cast<std::size_t>(t) * heads + h) * d, d),
                         positions[static_cast<std::size_t>(t)]);
    return out;
}

// Re-anchored positions for one query block: retrieved memory frames first,
// then the local window, then the current chunk. Span is k_sel + (W+1)*L.
inline std::vector<std::int64_t> block_relative_positions(int k_sel, int window_chunks, int chunk_len) {
    require(k_sel >= 0 && window_chunks >= 0 && chunk_len >= 1, "block_relative_positions: bad arguments");
    std::vector<std::int64_t> pos(static_cast<std::size_t>(k_sel + (window_chunks + 1) * chunk_len));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
    return pos;
}

inline std::int64_t position_span(int k, int window_chunks, int chunk_len) {
    return static_cast<std::int64_t>(k) + static_cast<std::int64_t>(window_chunks + 1) * chunk_len;
}

inline void check_position_span(int k, int window_chunks, int chunk_len, const RopeConfig& rope) {
    require(position_span(k, window_chunks, chunk_len) <= rope.f_train,
            "rope: receptive-field span k + (W+1)L exceeds the training horizon F_train");
}

}  // namespace chunkflow

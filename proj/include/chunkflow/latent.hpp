#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chunkflow/common.hpp"

namespace chunkflow {

struct LatentShape {
    int channels = 8;
    int height = 8;
    int width = 8;

    int spatial_tokens() const { return height * width; }
    int frame_values() const { return channels * height * width; }

    bool operator==(const LatentShape&) const = default;
};

inline void validate(const LatentShape& s) {
    require(s.channels >= 1 && s.height >= 1 && s.width >= 1, "latent shape: dims must be >= 1");
}

// One latent frame, a C x H x W value grid stored row-major (c, y, x).
struct LatentFrame {
    LatentShape shape;
    std::vector<double> values;

    LatentFrame() = default;
    LatentFrame(LatentShape s, double fill = 0.0) : shape(s), values(static_cast<std::size_t>(s.frame_values()), fill) {
        validate(s);
    }

    double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x]; }
    double at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
    }
};

inline void validate(const LatentFrame& f) {
    validate(f.shape);
    require(f.values.size() == static_cast<std::size_t>(f.shape.frame_values()), "latent frame: value count mismatch");
    require(all_finite(f.values), "latent frame: non-finite values");
}

// The unit of autoregression: exactly L consecutive frames. chunk_index is
// 1-based and contiguous within a sequence.
struct LatentChunk {
    std::int64_t chunk_index = 1;
    std::vector<LatentFrame> frames;

    std::int64_t first_frame() const { return (chunk_index - 1) * static_cast<std::int64_t>(frames.size()); }
};

inline std::vector<LatentChunk> chunk_sequence(const std::vector<LatentFrame>& frames, int chunk_len) {
    require(chunk_len >= 1, "chunk_sequence: L must be >= 1");
    require(frames.size() % static_cast<std::size_t>(chunk_len) == 0,
            "chunk_sequence: frame count not divisible by L (no padding)");
    std::vector<LatentChunk> chunks;
    chunks.reserve(frames.size() / chunk_len);
    for (std::size_t i = 0; i < frames.size(); i += chunk_len) {
        LatentChunk c;
        c.chunk_index = static_cast<std::int64_t>(i / chunk_len) + 1;
        c.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(i),
                        frames.begin() + static_cast<std::ptrdiff_t>(i + chunk_len));
        chunks.push_back(std::move(c));
    }
    return chunks;
}

inline std::vector<LatentFrame> flatten_chunks(const std::vector<LatentChunk>& chunks) {
    std::vector<LatentFrame> frames;
    for (const auto& c : chunks) frames.insert(frames.end(), c.frames.begin(), c.frames.end());
    return frames;
}

// x_sigma = (1 - sigma) * x0 + sigma * eps, elementwise.
inline std::vector<double> flow_interpolate(std::span<const double> x0, std::span<const double> eps, double sigma) {
    require(x0.size() == eps.size(), "flow_interpolate: shape mismatch");
    require(sigma >= 0.0 && sigma <= 1.0, "flow_interpolate: sigma outside [0,1]");
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = (1.0 - sigma) * x0[i] + sigma * eps[i];
    return out;
}

inline LatentFrame flow_interpolate(const LatentFrame& x0, const LatentFrame& eps, double sigma) {
    require(x0.shape == eps.shape, "flow_interpolate: frame shape mismatch");
    LatentFrame out(x0.shape);
    out.values = flow_interpolate(std::span<const double>(x0.values), std::span<const double>(eps.values), sigma);
    return out;
}

}  // namespace chunkflow

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "chunkflow/common.hpp"
#include "chunkflow/latent.hpp"

namespace chunkflow {

// All on-disk formats are little-endian. Helpers below write scalar payloads
// byte-by-byte so the files are identical on any host.

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& off) {
    ensure(off + sizeof(T) <= in.size(), "deserialize: truncated payload");
    T value;
    std::memcpy(&value, in.data() + off, sizeof(T));
    off += sizeof(T);
    return value;
}

inline void put_f64_span(std::string& out, std::span<const double> v) {
    put_le<std::uint64_t>(out, v.size());
    for (double x : v) put_le<double>(out, x);
}

inline std::vector<double> get_f64_span(const std::string& in, std::size_t& off) {
    auto n = get_le<std::uint64_t>(in, off);
    ensure(off + n * sizeof(double) <= in.size(), "deserialize: truncated f64 block");
    std::vector<double> v(n);
    std::memcpy(v.data(), in.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    return v;
}

}  // namespace detail

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    ensure(f.good(), "cannot open for writing: " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    ensure(f.good(), "write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    ensure(f.good(), "cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

// Latent container: <stem>.f32 holds raw little-endian float32 in [frame][c][y][x]
// order; <stem>.json describes the shape so any language can read the payload.
inline void write_latent_container(const std::filesystem::path& stem, const std::vector<LatentFrame>& frames) {
    require(!frames.empty(), "latent container: no frames");
    const LatentShape shape = frames.front().shape;
    std::string payload;
    payload.reserve(frames.size() * static_cast<std::size_t>(shape.frame_values()) * 4);
    for (const auto& fr : frames) {
        require(fr.shape == shape, "latent container: mixed frame shapes");
        for (double x : fr.values) detail::put_le<float>(payload, static_cast<float>(x));
    }
    write_file(std::filesystem::path(stem).concat(".f32"), payload);
    nlohmann::json sidecar{{"shape", {frames.size(), shape.channels, shape.height, shape.width}},
                           {"dtype", "f32"},
                           {"byte_order", "little"},
                           {"layout", "FCHW"}};
    write_file(std::filesystem::path(stem).concat(".json"), sidecar.dump(2) + "\n");
}

inline std::vector<LatentFrame> read_latent_container(const std::filesystem::path& stem) {
    auto sidecar = nlohmann::json::parse(read_file(std::filesystem::path(stem).concat(".json")));
    ensure(sidecar.value("dtype", "") == "f32" && sidecar.value("layout", "") == "FCHW",
           "latent container: unsupported sidecar");
    auto dims = sidecar.at("shape").get<std::vector<std::int64_t>>();
    ensure(dims.size() == 4, "latent container: shape must be [F,C,H,W]");
    LatentShape shape{static_cast<int>(dims[1]), static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    std::string payload = read_file(std::filesystem::path(stem).concat(".f32"));
    std::size_t expect = static_cast<std::size_t>(dims[0]) * shape.frame_values() * 4;
    ensure(payload.size() == expect, "latent container: payload size mismatch");
    std::vector<LatentFrame> frames(static_cast<std::size_t>(dims[0]), LatentFrame(shape));
    std::size_t off = 0;
    for (auto& fr : frames)
        for (double& x : fr.values) x = detail::get_le<float>(payload, off);
    return frames;
}

// Append-only line-delimited training log.
class JsonlLogger {
public:
    JsonlLogger() = default;
    explicit JsonlLogger(const std::filesystem::path& path) {
        if (!path.empty()) {
            out_.open(path, std::ios::app);
            ensure(out_.good(), "cannot open log: " + path.string());
        }
    }
    void log(const nlohmann::json& record) {
        if (out_.is_open()) out_ << record.dump() << "\n" << std::flush;
    }

private:
    std::ofstream out_;
};

}  // namespace chunkflow

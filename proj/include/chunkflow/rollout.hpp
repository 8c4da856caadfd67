#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "chunkflow/camr.hpp"
#include "chunkflow/common.hpp"
#include "chunkflow/latent.hpp"
#include "chunkflow/model.hpp"
#include "chunkflow/noise.hpp"
#include "chunkflow/rng.hpp"
#include "chunkflow/schedule.hpp"
#include "chunkflow/serialize.hpp"

namespace chunkflow {

struct SessionConfig {
    int chunk_len = 3;
    int window_chunks = 3;
    int top_k = 5;
    bool routing = true;
    bool clean_routing = true;
    bool route_per_step = false;  // per-chunk routing by default
    MemoryPolicy policy = MemoryPolicy::kCamr;
    int denoise_steps = 4;
    double sigma_shift = 3.0;
    std::uint64_t seed = 0;
    std::int64_t max_store_frames = 0;  // unlimited
};

inline nlohmann::json to_json(const SessionConfig& c) {
    return nlohmann::json{{"chunk_len", c.chunk_len},
                          {"window_chunks", c.window_chunks},
                          {"top_k", c.top_k},
                          {"routing", c.routing},
                          {"clean_routing", c.clean_routing},
                          {"route_per_step", c.route_per_step},
                          {"policy", c.policy == MemoryPolicy::kCamr ? "camr" : "sink"},
                          {"denoise_steps", c.denoise_steps},
                          {"sigma_shift", c.sigma_shift},
                          {"seed", c.seed},
                          {"max_store_frames", c.max_store_frames}};
}

inline SessionConfig session_config_from_json(const nlohmann::json& j) {
    SessionConfig c;
    c.chunk_len = j.value("chunk_len", 3);
    c.window_chunks = j.value("window_chunks", 3);
    c.top_k = j.value("top_k", 5);
    c.routing = j.value("routing", true);
    c.clean_routing = j.value("clean_routing", true);
    c.route_per_step = j.value("route_per_step", false);
    c.policy = j.value("policy", std::string("camr")) == "sink" ? MemoryPolicy::kFirstFrameSink : MemoryPolicy::kCamr;
    c.denoise_steps = j.value("denoise_steps", 4);
    c.sigma_shift = j.value("sigma_shift", 3.0);
    c.seed = j.value("seed", std::uint64_t{0});
    c.max_store_frames = j.value("max_store_frames", std::int64_t{0});
    return c;
}

// Streaming chunk-by-chunk generation with KV caching, runtime prompt
// appends, content-routed retrieval, and block-relative positions. One
// session is one logical generation thread; sessions are independent.
class RolloutSession {
public:
    RolloutSession(std::shared_ptr<const CausalTransformer> model, SessionConfig cfg,
                   std::vector<double> first_prompt)
        : model_(std::move(model)), cfg_(cfg), rng_(cfg.seed) {
        require(model_ != nullptr, "session: model required");
        require(cfg_.chunk_len >= 1 && cfg_.denoise_steps >= 1, "session: bad chunk_len or steps");
        require(first_prompt.size() == static_cast<std::size_t>(model_->config().prompt_dim),
                "session: prompt width mismatch");
        if (cfg_.routing)
            check_position_span(cfg_.top_k, cfg_.window_chunks, cfg_.chunk_len, model_->config().rope());
        schedule_.prompts.push_back(std::move(first_prompt));
        sigma_grid_ = sigma_levels(cfg_.denoise_steps, cfg_.sigma_shift);
        store_ = KVMemoryStore(model_->config().layers, model_->config().spatial_tokens(), model_->config().heads,
                               model_->config().head_dim, cfg_.max_store_frames);
    }

    const ShotSchedule& schedule() const { return schedule_; }
    const SessionConfig& config() const { return cfg_; }
    const CausalTransformer& model() const { return *model_; }
    const KVMemoryStore& store() const { return store_; }

    std::int64_t cursor() const { return cursor_; }  // next chunk to generate (1-based)
    std::int64_t frames_generated() const { return (cursor_ - 1) * cfg_.chunk_len; }

    // Instrumentation: forward passes split by purpose (denoise vs clean
    // context), plus per-chunk attention footprints.
    std::int64_t denoise_passes() const { return denoise_passes_; }
    std::int64_t context_passes() const { return context_passes_; }
    std::int64_t max_position_seen() const { return max_position_seen_; }
    const std::vector<std::int64_t>& attended_per_chunk() const { return attended_per_chunk_; }

    // Append a future shot. The boundary must lie on a chunk edge and beyond
    // every generated frame; previously generated chunks are never recomputed.
    void append_shot(std::vector<double> prompt, std::int64_t boundary_frame) {
        require(prompt.size() == static_cast<std::size_t>(model_->config().prompt_dim),
                "append_shot: prompt width mismatch");
        require(boundary_frame % cfg_.chunk_len == 0, "append_shot: boundary not aligned to chunk length");
        require(boundary_frame >= frames_generated(), "append_shot: boundary lies in already-generated frames");
        require(schedule_.boundaries.empty() || boundary_frame > schedule_.boundaries.back(),
                "append_shot: boundaries must be strictly increasing");
        require(boundary_frame > 0, "append_shot: boundary must be positive");
        schedule_.boundaries.push_back(boundary_frame);
        schedule_.prompts.push_back(std::move(prompt));
        if (!schedule_.prompt_seeds.empty()) schedule_.prompt_seeds.clear();  // raw prompt breaks seed derivation
    }

    void append_shot_seed(std::uint64_t prompt_seed, std::int64_t boundary_frame) {
        append_shot(prompt_embedding(prompt_seed, model_->config().prompt_dim), boundary_frame);
    }

    // Generate the next chunk: denoise from pure noise under the current
    // shot's prompt, then write the clean chunk's unrotated KV to the cache.
    LatentChunk generate_chunk() {
        const auto& mc = model_->config();
        const int t = cfg_.chunk_len * mc.spatial_tokens();
        std::vector<double> x(static_cast<std::size_t>(t) * mc.channels());
        rng_.fill_normal(x);

        const auto prompt = active_prompt(cursor_);
        std::vector<ReceptiveField> fields;
        std::int64_t attended = 0;
        for (int j = 0; j < cfg_.denoise_steps; ++j) {
            StreamCtx ctx = base_ctx(prompt);
            ctx.sigma = sigma_grid_[static_cast<std::size_t>(j)];
            const bool fresh_route = (j == 0) || cfg_.route_per_step;
            ctx.fields_in = fresh_route ? nullptr : &fields;
            ctx.fields_out = fresh_route ? &fields : nullptr;
            ctx.attended_frames = &attended;
            ctx.max_position = &max_position_seen_;
            auto v = model_->forward_stream(x, ctx);
            ++denoise_passes_;
            const double dsig = sigma_grid_[static_cast<std::size_t>(j) + 1] - sigma_grid_[static_cast<std::size_t>(j)];
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += dsig * v[i];
        }
        ensure(all_finite(x), "generate_chunk: non-finite state; session kept at last good chunk");
        commit_clean_chunk(x, prompt);
        attended_per_chunk_.push_back(attended);
        require(max_position_seen_ < mc.f_train, "generate_chunk: RoPE position reached the training horizon");
        return make_chunk(x);
    }

    // Ingest a ground-truth chunk as context without denoising (continuation
    // from existing material, bench priming).
    LatentChunk prime_chunk(const std::vector<LatentFrame>& frames) {
        require(static_cast<int>(frames.size()) == cfg_.chunk_len, "prime_chunk: wrong frame count");
        auto x = chunk_to_tokens(frames);
        const auto prompt = active_prompt(cursor_);
        commit_clean_chunk(x, prompt);
        attended_per_chunk_.push_back(0);
        return make_chunk(x);
    }

    // ---- snapshot / resume ----------------------------------------------

    std::string snapshot() const {
        nlohmann::json header{{"session", to_json(cfg_)},
                              {"model", to_json(model_->config())},
                              {"cursor", cursor_},
                              {"boundaries", schedule_.boundaries},
                              {"rng", rng_.state()},
                              {"denoise_passes", denoise_passes_},
                              {"context_passes", context_passes_},
                              {"max_position_seen", max_position_seen_},
                              {"attended_per_chunk", attended_per_chunk_}};
        std::string payload;
        for_each_tensor(const_cast<Params&>(model_->params()), model_->config(),
                        [&](const std::string&, std::vector<double>& tns, int, int) {
                            detail::put_f64_span(payload, tns);
                        });
        detail::put_le<std::uint64_t>(payload, schedule_.prompts.size());
        for (const auto& p : schedule_.prompts) detail::put_f64_span(payload, p);
        for (int l = 0; l < store_.layer_count(); ++l) {
            const auto& entries = store_.layer(l);
            detail::put_le<std::uint64_t>(payload, entries.size());
            for (const auto& e : entries) {
                detail::put_le<std::int64_t>(payload, e.frame_index);
                detail::put_le<std::int64_t>(payload, e.chunk_index);
                detail::put_f64_span(payload, e.keys);
                detail::put_f64_span(payload, e.values);
            }
        }
        std::string head_str = header.dump();
        std::string bytes;
        bytes.append("CFSN", 4);
        detail::put_le<std::uint32_t>(bytes, 1);
        detail::put_le<std::uint64_t>(bytes, head_str.size());
        bytes.append(head_str);
        detail::put_le<std::uint64_t>(bytes, payload.size());
        bytes.append(payload);
        detail::put_le<std::uint64_t>(bytes, fnv1a(payload.data(), payload.size()));
        return bytes;
    }

    static RolloutSession resume(const std::string& bytes) {
        ensure(bytes.size() > 16 && bytes.compare(0, 4, "CFSN") == 0, "snapshot: bad magic");
        std::size_t off = 4;
        ensure(detail::get_le<std::uint32_t>(bytes, off) == 1, "snapshot: unsupported version");
        auto head_len = detail::get_le<std::uint64_t>(bytes, off);
        ensure(off + head_len <= bytes.size(), "snapshot: truncated header");
        auto header = nlohmann::json::parse(bytes.substr(off, head_len), nullptr, false);
        ensure(!header.is_discarded(), "snapshot: corrupt header json");
        off += head_len;
        auto payload_len = detail::get_le<std::uint64_t>(bytes, off);
        ensure(off + payload_len + 8 <= bytes.size(), "snapshot: truncated payload");
        const std::size_t payload_off = off;
        off = payload_off + payload_len;
        auto stored_hash = detail::get_le<std::uint64_t>(bytes, off);
        ensure(stored_hash == fnv1a(bytes.data() + payload_off, payload_len), "snapshot: payload hash mismatch");

        auto model = std::make_shared<CausalTransformer>(model_config_from_json(header.at("model")));
        std::size_t p = payload_off;
        for_each_tensor(model->params(), model->config(), [&](const std::string&, std::vector<double>& tns, int, int) {
            auto block = detail::get_f64_span(bytes, p);
            ensure(block.size() == tns.size(), "snapshot: parameter block size mismatch");
            tns = std::move(block);
        });
        auto cfg = session_config_from_json(header.at("session"));
        auto n_prompts = detail::get_le<std::uint64_t>(bytes, p);
        ensure(n_prompts >= 1, "snapshot: no prompts");
        std::vector<std::vector<double>> prompts;
        for (std::uint64_t i = 0; i < n_prompts; ++i) prompts.push_back(detail::get_f64_span(bytes, p));

        RolloutSession s(model, cfg, prompts.front());
        for (std::size_t i = 1; i < prompts.size(); ++i) s.schedule_.prompts.push_back(prompts[i]);
        s.schedule_.boundaries = header.at("boundaries").get<std::vector<std::int64_t>>();
        s.cursor_ = header.at("cursor").get<std::int64_t>();
        s.rng_.restore(header.at("rng").get<std::string>());
        s.denoise_passes_ = header.at("denoise_passes").get<std::int64_t>();
        s.context_passes_ = header.at("context_passes").get<std::int64_t>();
        s.max_position_seen_ = header.at("max_position_seen").get<std::int64_t>();
        s.attended_per_chunk_ = header.at("attended_per_chunk").get<std::vector<std::int64_t>>();
        for (int l = 0; l < s.store_.layer_count(); ++l) {
            auto n_frames = detail::get_le<std::uint64_t>(bytes, p);
            for (std::uint64_t i = 0; i < n_frames; ++i) {
                auto frame_index = detail::get_le<std::int64_t>(bytes, p);
                auto chunk_index = detail::get_le<std::int64_t>(bytes, p);
                auto keys = detail::get_f64_span(bytes, p);
                auto values = detail::get_f64_span(bytes, p);
                s.store_.append_frame(l, frame_index, chunk_index, std::move(keys), std::move(values));
            }
        }
        ensure(p == payload_off + payload_len, "snapshot: payload size mismatch");
        return s;
    }

private:
    StreamCtx base_ctx(std::span<const double> prompt) const {
        StreamCtx ctx;
        ctx.store = &store_;
        ctx.chunk_index = cursor_;
        ctx.chunk_len = cfg_.chunk_len;
        ctx.prompt = prompt;
        ctx.routing = cfg_.routing;
        ctx.window_chunks = cfg_.window_chunks;
        ctx.top_k = cfg_.top_k;
        ctx.policy = cfg_.policy;
        return ctx;
    }

    std::span<const double> active_prompt(std::int64_t chunk_index) const {
        const int shot = shot_of_frame((chunk_index - 1) * cfg_.chunk_len, schedule_);
        return schedule_.prompts[static_cast<std::size_t>(shot) - 1];
    }

    void commit_clean_chunk(const std::vector<double>& x0_tokens, std::span<const double> prompt) {
        StreamCtx ctx = base_ctx(prompt);
        ctx.sigma = 0.0;
        ctx.routing = cfg_.routing && cfg_.clean_routing;
        ctx.append_to = &store_;
        ctx.max_position = &max_position_seen_;
        model_->forward_stream(x0_tokens, ctx);
        ++context_passes_;
        ++cursor_;
    }

    LatentChunk make_chunk(const std::vector<double>& tokens) const {
        LatentChunk chunk;
        chunk.chunk_index = cursor_ - 1;  // committed just before
        chunk.frames = tokens_to_frames(tokens, cfg_.chunk_len, model_->config().latent);
        return chunk;
    }

    std::shared_ptr<const CausalTransformer> model_;
    SessionConfig cfg_;
    ShotSchedule schedule_;
    KVMemoryStore store_;
    Rng rng_;
    std::vector<double> sigma_grid_;
    std::int64_t cursor_ = 1;
    std::int64_t denoise_passes_ = 0;
    std::int64_t context_passes_ = 0;
    std::int64_t max_position_seen_ = 0;
    std::vector<std::int64_t> attended_per_chunk_;
};

}  // namespace chunkflow

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "chunkflow/common.hpp"
#include "chunkflow/distill.hpp"
#include "chunkflow/model.hpp"
#include "chunkflow/noise.hpp"
#include "chunkflow/rollout.hpp"
#include "chunkflow/serialize.hpp"
#include "chunkflow/synthetic.hpp"

namespace chunkflow {

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Params m, v;
    long step = 0;

    static AdamState init(const ModelConfig& cfg) {
        AdamState s;
        s.m = make_params(cfg, false);
        s.v = make_params(cfg, false);
        return s;
    }
};

inline void adam_step(Params& params, const Params& grads, AdamState& state, const AdamConfig& opt,
                      const ModelConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, state.step);
    const double bc2 = 1.0 - std::pow(opt.beta2, state.step);
    std::vector<const std::vector<double>*> g_list;
    std::vector<std::vector<double>*> m_list, v_list;
    for_each_tensor(const_cast<Params&>(grads), cfg,
                    [&](const std::string&, std::vector<double>& t, int, int) { g_list.push_back(&t); });
    for_each_tensor(state.m, cfg, [&](const std::string&, std::vector<double>& t, int, int) { m_list.push_back(&t); });
    for_each_tensor(state.v, cfg, [&](const std::string&, std::vector<double>& t, int, int) { v_list.push_back(&t); });
    std::size_t ti = 0;
    for_each_tensor(params, cfg, [&](const std::string&, std::vector<double>& t, int, int) {
        const auto& g = *g_list[ti];
        auto& m = *m_list[ti];
        auto& v = *v_list[ti];
        for (std::size_t i = 0; i < t.size(); ++i) {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            t[i] -= opt.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.eps);
        }
        ++ti;
    });
}

struct RoutingOptions {
    bool enabled = true;
    bool clean_routing = true;
    int window_chunks = 3;
    int top_k = 5;
    MemoryPolicy policy = MemoryPolicy::kCamr;
};

struct TrainOptions {
    int iters = 400;
    AdamConfig adam{};
    NoiseConfig noise{};
    RoutingOptions routing{};
    std::uint64_t seed = 0;
    int log_every = 25;
};

inline PackedBatch scenario_batch(const Scenario& sc, double sigma, Rng& rng, const RoutingOptions& routing) {
    auto batch = make_packed_batch(sc.frames, sc.schedule, sc.chunk_len, sigma, rng);
    batch.routing_enabled = routing.enabled;
    batch.clean_routing = routing.clean_routing;
    batch.window_chunks = routing.window_chunks;
    batch.top_k = routing.top_k;
    batch.policy = routing.policy;
    return batch;
}

// Teacher-forcing training loop over packed 2N-segment batches.
inline void train_tf(CausalTransformer& model, const std::vector<Scenario>& data, const TrainOptions& opt,
                     JsonlLogger* log = nullptr) {
    require(!data.empty(), "train_tf: no scenarios");
    Rng rng(mix_seed(opt.seed, 0x7466ull));  // "tf"
    AdamState adam = AdamState::init(model.config());
    for (int iter = 1; iter <= opt.iters; ++iter) {
        const auto& sc = data[rng.index(data.size())];
        const double sigma = sample_sigma(opt.noise, rng);
        auto batch = scenario_batch(sc, sigma, rng, opt.routing);
        Params grads = make_params(model.config(), false);
        const double loss = model.tf_loss_grad(batch, grads);
        adam_step(model.params(), grads, adam, opt.adam, model.config());
        if (log && (iter % opt.log_every == 0 || iter == 1))
            log->log({{"iter", iter},
                      {"l_tune", loss},
                      {"grad_norm", std::sqrt(grad_sq_norm(grads, model.config()))}});
    }
}

// ---------------------------------------------------------------------------
// Distillation driver: causal ODE initialization, then self-forced DMD with
// adversarial regularization. Data provenance is structural: the fake
// denoiser and discriminator fake branch only ever see student rollouts.

struct DistillOptions {
    int init_iters = 40;
    int dmd_iters = 40;
    AdamConfig adam_g{1e-3};
    AdamConfig adam_fake{1e-3};
    AdamConfig adam_head{1e-3};
    double lambda_adv = 0.1;
    int teacher_steps = 48;
    int student_steps = 4;
    int rollout_chunks = 3;  // self-forcing rollout length
    NoiseConfig noise{};
    RoutingOptions routing{};
    std::uint64_t seed = 0;
    int log_every = 10;
};

namespace detail {

// Clean-context prefill of `upto` chunks into a fresh store owned by `model`.
inline KVMemoryStore primed_store(const CausalTransformer& model, const Scenario& sc, int upto_chunks,
                                  const RoutingOptions& routing) {
    const auto& cfg = model.config();
    KVMemoryStore store(cfg.layers, cfg.spatial_tokens(), cfg.heads, cfg.head_dim);
    for (int i = 1; i <= upto_chunks; ++i) {
        StreamCtx ctx;
        ctx.store = &store;
        ctx.chunk_index = i;
        ctx.chunk_len = sc.chunk_len;
        ctx.sigma = 0.0;
        const int shot = shot_of_frame(static_cast<std::int64_t>(i - 1) * sc.chunk_len, sc.schedule);
        ctx.prompt = sc.schedule.prompts[static_cast<std::size_t>(shot) - 1];
        ctx.routing = routing.enabled && routing.clean_routing;
        ctx.window_chunks = routing.window_chunks;
        ctx.top_k = routing.top_k;
        ctx.policy = routing.policy;
        ctx.append_to = &store;
        std::vector<LatentFrame> frames(sc.frames.begin() + static_cast<std::ptrdiff_t>((i - 1) * sc.chunk_len),
                                        sc.frames.begin() + static_cast<std::ptrdiff_t>(i * sc.chunk_len));
        model.forward_stream(chunk_to_tokens(frames), ctx);
    }
    return store;
}

// Prefill a store from already-tokenized clean chunks (student rollouts).
inline KVMemoryStore primed_store_tokens(const CausalTransformer& model,
                                         const std::vector<std::vector<double>>& chunks, int chunk_len,
                                         std::span<const double> prompt, const RoutingOptions& routing) {
    const auto& cfg = model.config();
    KVMemoryStore store(cfg.layers, cfg.spatial_tokens(), cfg.heads, cfg.head_dim);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        StreamCtx ctx;
        ctx.store = &store;
        ctx.chunk_index = static_cast<std::int64_t>(i) + 1;
        ctx.chunk_len = chunk_len;
        ctx.sigma = 0.0;
        ctx.prompt = prompt;
        ctx.routing = routing.enabled && routing.clean_routing;
        ctx.window_chunks = routing.window_chunks;
        ctx.top_k = routing.top_k;
        ctx.policy = routing.policy;
        ctx.append_to = &store;
        model.forward_stream(chunks[i], ctx);
    }
    return store;
}

inline StreamCtx denoiser_ctx(const KVMemoryStore& store, std::int64_t chunk_index, int chunk_len, double sigma,
                              std::span<const double> prompt, const RoutingOptions& routing) {
    StreamCtx ctx;
    ctx.store = &store;
    ctx.chunk_index = chunk_index;
    ctx.chunk_len = chunk_len;
    ctx.sigma = sigma;
    ctx.prompt = prompt;
    ctx.routing = routing.enabled;
    ctx.window_chunks = routing.window_chunks;
    ctx.top_k = routing.top_k;
    ctx.policy = routing.policy;
    return ctx;
}

}  // namespace detail

// Stage 1: align the few-step student with teacher PF-ODE endpoints under the
// causal visibility pattern (ground-truth histories).
inline void distill_ode_init(DistillState& state, const std::vector<Scenario>& data, const DistillOptions& opt,
                             JsonlLogger* log = nullptr) {
    require(!data.empty(), "distill_ode_init: no scenarios");
    const auto& cfg = state.student->config();
    AdamState adam = AdamState::init(cfg);
    for (int iter = 1; iter <= opt.init_iters; ++iter) {
        Rng rng(mix_seed(opt.seed, 0x6f646500ull + static_cast<std::uint64_t>(iter)));
        const auto& sc = data[rng.index(data.size())];
        const int n_chunks = static_cast<int>(sc.frames.size()) / sc.chunk_len;
        const int i = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n_chunks)));
        const int shot = shot_of_frame(static_cast<std::int64_t>(i - 1) * sc.chunk_len, sc.schedule);
        const auto& prompt = sc.schedule.prompts[static_cast<std::size_t>(shot) - 1];

        auto teacher_store = detail::primed_store(*state.real_denoiser, sc, i - 1, opt.routing);
        auto student_store = detail::primed_store(*state.student, sc, i - 1, opt.routing);

        std::vector<double> eps(static_cast<std::size_t>(sc.chunk_len) * cfg.spatial_tokens() * cfg.channels());
        rng.fill_normal(eps);
        const auto* teacher = state.real_denoiser.get();
        VelocityFn teacher_v = [&](std::span<const double> x, double sigma) {
            StreamCtx ctx = detail::denoiser_ctx(teacher_store, i, sc.chunk_len, sigma, prompt, opt.routing);
            return teacher->forward_stream(x, ctx);
        };
        auto tr = teacher_trajectory(teacher_v, eps, opt.teacher_steps, opt.noise.shift, opt.student_steps);

        const auto tau = rng.index(tr.anchor_indices.size());
        const double sigma_tau = tr.sigmas[static_cast<std::size_t>(tr.anchor_indices[tau])];
        Params grads = make_params(cfg, false);
        const double loss = init_loss_grad(*state.student, &student_store, i, sc.chunk_len, prompt,
                                           opt.routing.enabled, opt.routing.window_chunks, opt.routing.top_k,
                                           opt.routing.policy, tr.states[tau], sigma_tau, tr.final_state, &grads);
        adam_step(state.student->params(), grads, adam, opt.adam_g, cfg);
        if (log && (iter % opt.log_every == 0 || iter == 1))
            log->log({{"iter", iter}, {"l_init", loss}, {"grad_norm", std::sqrt(grad_sq_norm(grads, cfg))}});
    }
}

struct DistillStepReport {
    double l_dmd_surrogate = 0.0;  // mean squared score difference
    double l_d = 0.0;
    double l_g = 0.0;
    Params generator_grads;  // pre-update, for equivalence checks
};

// One self-forced DMD(+GAN) iteration. Phase-separated RNG streams keep the
// generator update bitwise independent of the adversarial branch when
// lambda_adv == 0. The head trains with plain SGD (few parameters).
inline DistillStepReport distill_step(DistillState& state, const std::vector<Scenario>& data,
                                      const DistillOptions& opt, int iter, AdamState& adam_g,
                                      AdamState& adam_fake) {
    const auto& cfg = state.student->config();
    const std::uint64_t base = mix_seed(opt.seed, 0x646d6400ull + static_cast<std::uint64_t>(iter));
    Rng rng_data(mix_seed(base, 1));
    Rng rng_g(mix_seed(base, 2));
    Rng rng_dmd(mix_seed(base, 3));
    Rng rng_fake(mix_seed(base, 4));
    Rng rng_disc(mix_seed(base, 5));

    const auto& sc = data[rng_data.index(data.size())];
    const int n_chunks = static_cast<int>(sc.frames.size()) / sc.chunk_len;
    const int m = std::min(opt.rollout_chunks, n_chunks);
    const int shot = shot_of_frame(static_cast<std::int64_t>(m - 1) * sc.chunk_len, sc.schedule);
    const auto& prompt = sc.schedule.prompts[static_cast<std::size_t>(shot) - 1];
    auto levels = student_levels(opt.teacher_steps, opt.noise.shift, opt.student_steps);

    // student rollout with its own cache and routing; gradients flow through
    // the final chunk's denoising chain only
    KVMemoryStore student_store(cfg.layers, cfg.spatial_tokens(), cfg.heads, cfg.head_dim);
    std::vector<std::vector<double>> rollout_chunks;
    SampleTrace trace;
    for (int i = 1; i <= m; ++i) {
        const int shot_i = shot_of_frame(static_cast<std::int64_t>(i - 1) * sc.chunk_len, sc.schedule);
        const auto& prompt_i = sc.schedule.prompts[static_cast<std::size_t>(shot_i) - 1];
        std::vector<double> eps(static_cast<std::size_t>(sc.chunk_len) * cfg.spatial_tokens() * cfg.channels());
        rng_g.fill_normal(eps);
        trace = student_sample(*state.student, &student_store, i, sc.chunk_len, prompt_i, opt.routing.enabled,
                               opt.routing.window_chunks, opt.routing.top_k, opt.routing.policy, levels,
                               std::move(eps));
        StreamCtx clean = detail::denoiser_ctx(student_store, i, sc.chunk_len, 0.0, prompt_i, opt.routing);
        clean.routing = opt.routing.enabled && opt.routing.clean_routing;
        clean.append_to = &student_store;
        state.student->forward_stream(trace.out, clean);
        if (i < m) rollout_chunks.push_back(trace.out);
    }

    // score contexts: each denoiser conditions on the student rollout history
    // through its own clean passes
    auto real_store = detail::primed_store_tokens(*state.real_denoiser, rollout_chunks, sc.chunk_len, prompt,
                                                  opt.routing);
    auto fake_store = detail::primed_store_tokens(*state.fake_denoiser, rollout_chunks, sc.chunk_len, prompt,
                                                  opt.routing);

    const double t = sample_sigma(opt.noise, rng_dmd);
    std::vector<double> eps_prime(trace.out.size());
    rng_dmd.fill_normal(eps_prime);
    auto x_tilde_t = flow_interpolate(trace.out, eps_prime, t);

    StreamCtx real_ctx = detail::denoiser_ctx(real_store, m, sc.chunk_len, t, prompt, opt.routing);
    auto s_real = state.real_denoiser->forward_stream(x_tilde_t, real_ctx);
    StreamCtx fake_ctx = detail::denoiser_ctx(fake_store, m, sc.chunk_len, t, prompt, opt.routing);
    StreamCache fake_cache;
    auto s_fake = state.fake_denoiser->forward_stream(x_tilde_t, fake_ctx, &fake_cache);

    DistillStepReport report;
    std::vector<double> cotangent(trace.out.size());
    for (std::size_t i = 0; i < cotangent.size(); ++i) {
        cotangent[i] = s_fake[i] - s_real[i];
        report.l_dmd_surrogate += cotangent[i] * cotangent[i];
    }
    report.l_dmd_surrogate /= static_cast<double>(cotangent.size());

    double d_fake_logit = 0.0;
    if (state.lambda_adv > 0.0) {
        auto feat = state.fake_denoiser->mid_features(fake_cache, state.gan_feature_layer);
        d_fake_logit = state.head.forward(feat);
        // generator term lambda * f(-d_fake): d/d_logit = -lambda * sigmoid(-d);
        // the gradient flows through the fake denoiser's features into x_t
        std::vector<double> dfeat;
        state.head.backward(feat, -state.lambda_adv * logistic(-d_fake_logit), nullptr, &dfeat);
        auto dx_t = state.fake_denoiser->mid_features_input_grad(fake_cache, state.gan_feature_layer, dfeat);
        for (std::size_t i = 0; i < cotangent.size(); ++i) cotangent[i] += (1.0 - t) * dx_t[i];
    }

    report.generator_grads = make_params(cfg, false);
    sample_chain_backward(*state.student, trace, cotangent, report.generator_grads);
    adam_step(state.student->params(), report.generator_grads, adam_g, opt.adam_g, cfg);

    // fake denoiser: flow matching on the student rollout only
    {
        const double tau = sample_sigma(opt.noise, rng_fake);
        std::vector<double> eps2(trace.out.size());
        rng_fake.fill_normal(eps2);
        auto x_tau = flow_interpolate(trace.out, eps2, tau);
        StreamCtx ctx = detail::denoiser_ctx(fake_store, m, sc.chunk_len, tau, prompt, opt.routing);
        StreamCache cache;
        auto v = state.fake_denoiser->forward_stream(x_tau, ctx, &cache);
        std::vector<double> dvel(v.size());
        const double scale = 2.0 / static_cast<double>(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double target = eps2[i] - trace.out[i];
            dvel[i] = scale * (v[i] - target);
        }
        Params fgrads = make_params(cfg, false);
        state.fake_denoiser->backward_stream(cache, dvel, &fgrads, nullptr);
        adam_step(state.fake_denoiser->params(), fgrads, adam_fake, opt.adam_fake, cfg);
    }

    // discriminator on the shared (x_t, x~_t) pair; fake denoiser frozen here
    if (state.lambda_adv > 0.0) {
        std::vector<LatentFrame> real_frames(sc.frames.begin() + static_cast<std::ptrdiff_t>((m - 1) * sc.chunk_len),
                                             sc.frames.begin() + static_cast<std::ptrdiff_t>(m * sc.chunk_len));
        auto x0_real = chunk_to_tokens(real_frames);
        std::vector<double> eps3(x0_real.size());
        rng_disc.fill_normal(eps3);
        auto x_t_real = flow_interpolate(x0_real, eps3, t);
        auto real_hist = detail::primed_store(*state.fake_denoiser, sc, m - 1, opt.routing);
        StreamCtx rctx = detail::denoiser_ctx(real_hist, m, sc.chunk_len, t, prompt, opt.routing);
        StreamCache rcache;
        state.fake_denoiser->forward_stream(x_t_real, rctx, &rcache);
        auto feat_real = state.fake_denoiser->mid_features(rcache, state.gan_feature_layer);
        const double d_real = state.head.forward(feat_real);
        auto feat_fake = state.fake_denoiser->mid_features(fake_cache, state.gan_feature_layer);
        const double d_fake = state.head.forward(feat_fake);
        auto pair = gan_losses(d_real, d_fake, state.lambda_adv, report.l_dmd_surrogate);
        report.l_d = pair.loss_d;
        report.l_g = pair.loss_g;
        GanHead hgrads = GanHead::zeros_like(state.head);
        state.head.backward(feat_real, -logistic(-d_real), &hgrads, nullptr);
        state.head.backward(feat_fake, logistic(d_fake), &hgrads, nullptr);
        const double lr = opt.adam_head.lr;
        auto sgd = [&](std::vector<double>& w, const std::vector<double>& g) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        };
        sgd(state.head.w1, hgrads.w1);
        sgd(state.head.b1, hgrads.b1);
        sgd(state.head.w2, hgrads.w2);
        sgd(state.head.b2, hgrads.b2);
    } else {
        report.l_g = report.l_dmd_surrogate;
    }

    ensure(param_hash(state.real_denoiser->params(), cfg) == state.real_hash,
           "distill_step: frozen real denoiser changed");
    return report;
}

inline void distill_run(DistillState& state, const std::vector<Scenario>& data, const DistillOptions& opt,
                        JsonlLogger* log = nullptr) {
    distill_ode_init(state, data, opt, log);
    AdamState adam_g = AdamState::init(state.student->config());
    AdamState adam_fake = AdamState::init(state.fake_denoiser->config());
    AdamState adam_head;  // unused placeholder (head uses plain SGD)
    for (int iter = 1; iter <= opt.dmd_iters; ++iter) {
        auto report = distill_step(state, data, opt, iter, adam_g, adam_fake, adam_head);
        if (log && (iter % opt.log_every == 0 || iter == 1))
            log->log({{"iter", iter},
                      {"l_dmd", report.l_dmd_surrogate},
                      {"l_d", report.l_d},
                      {"l_g", report.l_g},
                      {"grad_norm", std::sqrt(grad_sq_norm(report.generator_grads, state.student->config()))}});
    }
}

// ---------------------------------------------------------------------------
// Memory-ablation bench: train one model per (seed, variant) under that
// variant's memory policy, then score entity recall on fresh scenarios by
// priming ground-truth history and generating the recurrence shot.

struct BenchVariantSpec {
    std::string name;
    RoutingOptions routing;
};

inline std::vector<BenchVariantSpec> bench_variants(const std::vector<std::string>& names, int window_chunks,
                                                    int top_k) {
    std::vector<BenchVariantSpec> out;
    for (const auto& n : names) {
        BenchVariantSpec v;
        v.name = n;
        v.routing.window_chunks = window_chunks;
        v.routing.top_k = top_k;
        if (n == "no-memory") {
            v.routing.top_k = 0;  // window-only
        } else if (n == "sink") {
            v.routing.policy = MemoryPolicy::kFirstFrameSink;
        } else if (n == "camr") {
            v.routing.policy = MemoryPolicy::kCamr;
        } else {
            require(false, "bench: unknown variant '" + n + "' (expected no-memory, sink, camr)");
        }
        out.push_back(std::move(v));
    }
    return out;
}

struct BenchOptions {
    ScenarioSpec scenario{};
    ModelConfig model{};
    TrainOptions train{};
    int train_scenarios = 48;
    int eval_scenarios = 8;
    int eval_steps = 8;
    int seeds = 5;
    std::uint64_t seed0 = 1;
    int window_chunks = 3;
    int top_k = 5;
    std::vector<std::string> variants{"no-memory", "sink", "camr"};
    int parallel_jobs = 2;
};

struct BenchCell {
    std::string variant;
    std::uint64_t seed = 0;
    double recall = 0.0;
};

struct BenchResult {
    std::vector<BenchCell> cells;
    std::vector<std::string> variant_names;
    std::vector<double> variant_means;
};

// Recall for one trained model on fresh scenarios: prime shots 1..S-1 from
// ground truth, generate the final shot, score at recorded placements.
inline double bench_eval_recall(std::shared_ptr<const CausalTransformer> model, const RoutingOptions& routing,
                                const std::vector<Scenario>& eval_data, int eval_steps, double sigma_shift,
                                std::uint64_t seed) {
    double total = 0.0;
    int count = 0;
    for (std::size_t e = 0; e < eval_data.size(); ++e) {
        const auto& sc = eval_data[e];
        const int n_chunks = static_cast<int>(sc.frames.size()) / sc.chunk_len;
        const int last_shot = sc.schedule.shot_count();
        const std::int64_t last_start_frame = sc.schedule.boundaries.back();
        const int first_gen_chunk = static_cast<int>(last_start_frame / sc.chunk_len) + 1;

        SessionConfig scfg;
        scfg.chunk_len = sc.chunk_len;
        scfg.window_chunks = routing.window_chunks;
        scfg.top_k = routing.top_k;
        scfg.routing = routing.enabled;
        scfg.clean_routing = routing.clean_routing;
        scfg.policy = routing.policy;
        scfg.denoise_steps = eval_steps;
        scfg.sigma_shift = sigma_shift;
        scfg.seed = mix_seed(seed, 0xe7a1 + e);
        RolloutSession session(model, scfg, sc.schedule.prompts.front());
        for (int s = 2; s <= last_shot; ++s)
            session.append_shot(sc.schedule.prompts[static_cast<std::size_t>(s) - 1],
                                sc.schedule.boundaries[static_cast<std::size_t>(s) - 2]);
        for (int i = 1; i < first_gen_chunk; ++i) {
            std::vector<LatentFrame> frames(sc.frames.begin() + static_cast<std::ptrdiff_t>((i - 1) * sc.chunk_len),
                                            sc.frames.begin() + static_cast<std::ptrdiff_t>(i * sc.chunk_len));
            session.prime_chunk(frames);
        }
        for (int i = first_gen_chunk; i <= n_chunks; ++i) {
            auto chunk = session.generate_chunk();
            for (const auto& rec : sc.records) {
                const std::int64_t first = chunk.first_frame();
                const std::int64_t last = first + sc.chunk_len - 1;
                bool covered = false;
                for (std::int64_t f : rec.frames) covered |= (f >= first && f <= last);
                if (!covered) continue;
                total += recall_error(chunk, rec);
                ++count;
            }
        }
    }
    require(count > 0, "bench: no recall placements covered by generated chunks");
    return total / count;
}

inline BenchCell bench_run_cell(const BenchOptions& opt, const BenchVariantSpec& variant, std::uint64_t seed,
                                JsonlLogger* log) {
    // identical data and init across variants for a given seed
    Rng data_rng(mix_seed(seed, 0xda7aull));
    std::vector<Scenario> train_data;
    for (int i = 0; i < opt.train_scenarios; ++i) train_data.push_back(gen_scenario(opt.scenario, data_rng));
    Rng eval_rng(mix_seed(seed, 0xe7a1ull));
    std::vector<Scenario> eval_data;
    for (int i = 0; i < opt.eval_scenarios; ++i) eval_data.push_back(gen_scenario(opt.scenario, eval_rng));

    ModelConfig mcfg = opt.model;
    mcfg.seed = mix_seed(seed, 0x111ull);
    auto model = std::make_shared<CausalTransformer>(mcfg);
    TrainOptions topt = opt.train;
    topt.routing = variant.routing;
    topt.seed = mix_seed(seed, 0x22ull);
    train_tf(*model, train_data, topt, log);

    BenchCell cell;
    cell.variant = variant.name;
    cell.seed = seed;
    cell.recall = bench_eval_recall(model, variant.routing, eval_data, opt.eval_steps, topt.noise.shift,
                                    mix_seed(seed, 0x33ull));
    return cell;
}

inline BenchResult run_bench(const BenchOptions& opt, JsonlLogger* log = nullptr) {
    auto variants = bench_variants(opt.variants, opt.window_chunks, opt.top_k);
    struct Job {
        const BenchVariantSpec* variant;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (int s = 0; s < opt.seeds; ++s)
        for (const auto& v : variants) jobs.push_back({&v, opt.seed0 + static_cast<std::uint64_t>(s)});

    BenchResult result;
    result.cells.resize(jobs.size());
    const int width = std::max(1, opt.parallel_jobs);
    for (std::size_t base = 0; base < jobs.size(); base += static_cast<std::size_t>(width)) {
        std::vector<std::future<BenchCell>> wave;
        const std::size_t end = std::min(jobs.size(), base + static_cast<std::size_t>(width));
        for (std::size_t j = base; j < end; ++j)
            wave.push_back(std::async(std::launch::async, [&opt, &jobs, j] {
                return bench_run_cell(opt, *jobs[j].variant, jobs[j].seed, nullptr);
            }));
        for (std::size_t j = base; j < end; ++j) {
            result.cells[j] = wave[j - base].get();
            if (log)
                log->log({{"variant", result.cells[j].variant},
                          {"seed", result.cells[j].seed},
                          {"recall_error", result.cells[j].recall}});
        }
    }
    for (const auto& v : variants) {
        double sum = 0.0;
        int n = 0;
        for (const auto& c : result.cells)
            if (c.variant == v.name) {
                sum += c.recall;
                ++n;
            }
        result.variant_names.push_back(v.name);
        result.variant_means.push_back(sum / std::max(1, n));
    }
    return result;
}

inline nlohmann::json bench_to_json(const BenchOptions& opt, const BenchResult& r) {
    nlohmann::json variants = nlohmann::json::array();
    for (std::size_t i = 0; i < r.variant_names.size(); ++i) {
        nlohmann::json seeds = nlohmann::json::array();
        for (const auto& c : r.cells)
            if (c.variant == r.variant_names[i]) seeds.push_back({{"seed", c.seed}, {"recall_error", c.recall}});
        variants.push_back(
            {{"name", r.variant_names[i]}, {"mean_recall_error", r.variant_means[i]}, {"seeds", seeds}});
    }
    return nlohmann::json{{"variants", variants},
                          {"config", {{"seeds", opt.seeds},
                                      {"train_iters", opt.train.iters},
                                      {"train_scenarios", opt.train_scenarios},
                                      {"eval_scenarios", opt.eval_scenarios},
                                      {"eval_steps", opt.eval_steps},
                                      {"window_chunks", opt.window_chunks},
                                      {"top_k", opt.top_k}}}};
}

}  // namespace chunkflow

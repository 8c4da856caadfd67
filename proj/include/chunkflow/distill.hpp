#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "chunkflow/common.hpp"
#include "chunkflow/model.hpp"
#include "chunkflow/noise.hpp"
#include "chunkflow/rng.hpp"

namespace chunkflow {

// f(u) = log(1 + exp(u)), overflow-safe on both tails.
inline double softplus(double u) {
    if (u > 30.0) return u + std::log1p(std::exp(-u));
    return std::log1p(std::exp(u));
}

inline double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

struct GanLossPair {
    double loss_d = 0.0;
    double loss_g = 0.0;
};

// L_D = f(-d_real) + f(d_fake); L_G = L_DMD + lambda * f(-d_fake).
inline GanLossPair gan_losses(double d_real_logit, double d_fake_logit, double lambda_adv, double dmd_term) {
    return {softplus(-d_real_logit) + softplus(d_fake_logit), dmd_term + lambda_adv * softplus(-d_fake_logit)};
}

// Velocity field as a closure so solvers run against either a bound model or
// an analytic oracle.
using VelocityFn = std::function<std::vector<double>(std::span<const double> x, double sigma)>;

// Plain Euler integration of dx/dsigma = v over a decreasing sigma grid.
inline std::vector<double> euler_sample(const VelocityFn& velocity, std::vector<double> x,
                                        const std::vector<double>& levels) {
    require(levels.size() >= 2, "euler_sample: need at least one interval");
    for (std::size_t j = 0; j + 1 < levels.size(); ++j) {
        auto v = velocity(x, levels[j]);
        require(v.size() == x.size(), "euler_sample: velocity shape mismatch");
        const double dsig = levels[j + 1] - levels[j];
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dsig * v[i];
        ensure(all_finite(x), "euler_sample: non-finite state at sigma " + std::to_string(levels[j + 1]));
    }
    return x;
}

// Teacher PF-ODE trajectory: a `steps`-step Euler solve recording the states
// at `subsample` evenly spaced anchors plus the final denoised output.
struct DenoiseTrajectory {
    std::vector<double> noise;
    std::vector<double> sigmas;           // full solver grid, strictly decreasing
    std::vector<int> anchor_indices;      // |S| anchors into `sigmas`
    std::vector<std::vector<double>> states;  // z at each anchor
    std::vector<double> final_state;      // z_0
};

inline DenoiseTrajectory teacher_trajectory(const VelocityFn& velocity, std::vector<double> eps, int steps = 48,
                                            double shift = 3.0, int subsample = 4) {
    require(steps >= 1 && subsample >= 1 && subsample <= steps, "teacher_trajectory: bad step counts");
    DenoiseTrajectory tr;
    tr.noise = eps;
    tr.sigmas = sigma_levels(steps, shift);
    for (int j = 0; j < subsample; ++j) tr.anchor_indices.push_back(j * steps / subsample);
    std::vector<double> x = std::move(eps);
    std::size_t next_anchor = 0;
    for (int j = 0; j < steps; ++j) {
        if (next_anchor < tr.anchor_indices.size() && tr.anchor_indices[next_anchor] == j) {
            tr.states.push_back(x);
            ++next_anchor;
        }
        auto v = velocity(x, tr.sigmas[static_cast<std::size_t>(j)]);
        require(v.size() == x.size(), "teacher_trajectory: velocity shape mismatch");
        const double dsig = tr.sigmas[static_cast<std::size_t>(j) + 1] - tr.sigmas[static_cast<std::size_t>(j)];
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dsig * v[i];
        ensure(all_finite(x),
               "teacher_trajectory: non-finite state after step " + std::to_string(j) + " (sigma " +
                   std::to_string(tr.sigmas[static_cast<std::size_t>(j) + 1]) + ")");
    }
    tr.final_state = std::move(x);
    return tr;
}

// Student sigma grid: the 4-step subsequence of the teacher's solver grid.
inline std::vector<double> student_levels(int teacher_steps = 48, double shift = 3.0, int student_steps = 4) {
    return subsample_levels(sigma_levels(teacher_steps, shift), student_steps);
}

// ODE-initialization objective: the few-step student maps a trajectory state
// z_tau back to the teacher's endpoint z_0.
inline double init_loss(std::span<const double> x0_hat, std::span<const double> z0) {
    require(x0_hat.size() == z0.size(), "init_loss: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < x0_hat.size(); ++i) s += (x0_hat[i] - z0[i]) * (x0_hat[i] - z0[i]);
    return s / static_cast<double>(x0_hat.size());
}

// Model-bound variant with gradients: one student forward at (z_tau, sigma_tau)
// in the given cache context, backward of ||x0_hat - z0||^2.
inline double init_loss_grad(const CausalTransformer& student, const KVMemoryStore* store, std::int64_t chunk_index,
                             int chunk_len, std::span<const double> prompt, bool routing, int window_chunks,
                             int top_k, MemoryPolicy policy, std::span<const double> z_tau, double sigma_tau,
                             std::span<const double> z0, Params* grads) {
    StreamCtx ctx;
    ctx.store = store;
    ctx.chunk_index = chunk_index;
    ctx.chunk_len = chunk_len;
    ctx.sigma = sigma_tau;
    ctx.prompt = prompt;
    ctx.routing = routing;
    ctx.window_chunks = window_chunks;
    ctx.top_k = top_k;
    ctx.policy = policy;
    StreamCache cache;
    auto v = student.forward_stream(z_tau, ctx, &cache);
    auto x0_hat = x0_from_velocity(z_tau, v, sigma_tau);
    const double loss = init_loss(x0_hat, z0);
    if (grads) {
        std::vector<double> dv(v.size());
        const double scale = 2.0 / static_cast<double>(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) dv[i] = -sigma_tau * scale * (x0_hat[i] - z0[i]);
        student.backward_stream(cache, dv, grads, nullptr);
    }
    return loss;
}

// One student rollout chunk with the caches needed to backpropagate through
// its denoising steps (history KV stays detached).
struct SampleTrace {
    std::vector<double> levels;            // student grid, size steps+1
    std::vector<StreamCache> step_caches;  // one per denoise step
    std::vector<double> out;               // generated clean chunk tokens
};

inline SampleTrace student_sample(const CausalTransformer& student, const KVMemoryStore* store,
                                  std::int64_t chunk_index, int chunk_len, std::span<const double> prompt,
                                  bool routing, int window_chunks, int top_k, MemoryPolicy policy,
                                  std::vector<double> levels, std::vector<double> eps) {
    SampleTrace trace;
    trace.levels = std::move(levels);
    require(trace.levels.size() >= 2, "student_sample: need at least one interval");
    std::vector<double> x = std::move(eps);
    std::vector<ReceptiveField> fields;
    const int steps = static_cast<int>(trace.levels.size()) - 1;
    trace.step_caches.resize(static_cast<std::size_t>(steps));
    for (int j = 0; j < steps; ++j) {
        StreamCtx ctx;
        ctx.store = store;
        ctx.chunk_index = chunk_index;
        ctx.chunk_len = chunk_len;
        ctx.sigma = trace.levels[static_cast<std::size_t>(j)];
        ctx.prompt = prompt;
        ctx.routing = routing;
        ctx.window_chunks = window_chunks;
        ctx.top_k = top_k;
        ctx.policy = policy;
        ctx.fields_in = j == 0 ? nullptr : &fields;   // routed once per chunk
        ctx.fields_out = j == 0 ? &fields : nullptr;
        auto v = student.forward_stream(x, ctx, &trace.step_caches[static_cast<std::size_t>(j)]);
        const double dsig = trace.levels[static_cast<std::size_t>(j) + 1] - trace.levels[static_cast<std::size_t>(j)];
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dsig * v[i];
        ensure(all_finite(x), "student_sample: non-finite state");
    }
    trace.out = std::move(x);
    return trace;
}

// Reverse-mode sweep through the sampling chain: x_{j+1} = x_j + dsigma * v(x_j).
inline void sample_chain_backward(const CausalTransformer& student, const SampleTrace& trace,
                                  std::span<const double> d_out, Params& grads) {
    std::vector<double> dx(d_out.begin(), d_out.end());
    for (int j = static_cast<int>(trace.step_caches.size()) - 1; j >= 0; --j) {
        const double dsig = trace.levels[static_cast<std::size_t>(j) + 1] - trace.levels[static_cast<std::size_t>(j)];
        std::vector<double> dv(dx.size());
        for (std::size_t i = 0; i < dx.size(); ++i) dv[i] = dsig * dx[i];
        std::vector<double> dx_step;
        student.backward_stream(trace.step_caches[static_cast<std::size_t>(j)], dv, &grads, &dx_step);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_step[i];
    }
}

// Score difference (s_fake - s_real) evaluated at the perturbed sample; a
// closure so ablations and oracles can stand in for the denoiser pair.
using ScoreDiffFn = std::function<std::vector<double>(std::span<const double> x_t, double t)>;

// DMD generator gradient: perturb the student's own rollout to x_t, evaluate
// the frozen score difference there, and push it through the sampling chain
// as the cotangent of the rollout output. Both scores are stop-gradient.
inline void dmd_update(const CausalTransformer& student, const SampleTrace& trace, const ScoreDiffFn& score_diff,
                       double t, Rng& rng, Params& grads) {
    require(t >= 0.0 && t <= 1.0, "dmd_update: t outside [0,1]");
    std::vector<double> eps(trace.out.size());
    rng.fill_normal(eps);
    auto x_t = flow_interpolate(trace.out, eps, t);
    auto g = score_diff(x_t, t);
    require(g.size() == trace.out.size(), "dmd_update: score shape mismatch");
    sample_chain_backward(student, trace, g, grads);
}

// Lightweight discriminator head: 2-layer MLP over mean-pooled mid-block
// features of the fake denoiser.
struct GanHead {
    int in_dim = 0;
    int hidden = 32;
    std::vector<double> w1, b1, w2, b2;

    static GanHead init(int in_dim, int hidden, std::uint64_t seed) {
        GanHead h;
        h.in_dim = in_dim;
        h.hidden = hidden;
        Rng rng(mix_seed(seed, 0x67616eull));  // "gan"
        h.w1.resize(static_cast<std::size_t>(hidden) * in_dim);
        h.b1.assign(static_cast<std::size_t>(hidden), 0.0);
        h.w2.resize(static_cast<std::size_t>(hidden));
        h.b2.assign(1, 0.0);
        for (double& w : h.w1) w = rng.normal() / std::sqrt(static_cast<double>(in_dim));
        for (double& w : h.w2) w = rng.normal() / std::sqrt(static_cast<double>(hidden));
        return h;
    }

    double forward(std::span<const double> feat, std::vector<double>* h1_cache = nullptr) const {
        require(feat.size() == static_cast<std::size_t>(in_dim), "gan head: feature width mismatch");
        std::vector<double> h1(static_cast<std::size_t>(hidden));
        detail::linear_fwd(feat.data(), 1, in_dim, hidden, w1.data(), b1.data(), h1.data());
        double logit = b2[0];
        for (int i = 0; i < hidden; ++i) {
            h1[static_cast<std::size_t>(i)] = detail::gelu(h1[static_cast<std::size_t>(i)]);
            logit += w2[static_cast<std::size_t>(i)] * h1[static_cast<std::size_t>(i)];
        }
        if (h1_cache) *h1_cache = std::move(h1);
        return logit;
    }

    // Backward through the head; dfeat optional (generator path), param grads
    // optional (discriminator phase).
    void backward(std::span<const double> feat, double dlogit, GanHead* grads, std::vector<double>* dfeat) const {
        std::vector<double> pre(static_cast<std::size_t>(hidden));
        detail::linear_fwd(feat.data(), 1, in_dim, hidden, w1.data(), b1.data(), pre.data());
        std::vector<double> dh1(static_cast<std::size_t>(hidden));
        for (int i = 0; i < hidden; ++i) {
            const double act = detail::gelu(pre[static_cast<std::size_t>(i)]);
            if (grads) {
                grads->w2[static_cast<std::size_t>(i)] += dlogit * act;
            }
            dh1[static_cast<std::size_t>(i)] =
                dlogit * w2[static_cast<std::size_t>(i)] * detail::gelu_grad(pre[static_cast<std::size_t>(i)]);
        }
        if (grads) grads->b2[0] += dlogit;
        if (dfeat) dfeat->assign(static_cast<std::size_t>(in_dim), 0.0);
        detail::linear_bwd(feat.data(), dh1.data(), 1, in_dim, hidden, w1.data(), dfeat ? dfeat->data() : nullptr,
                           grads ? grads->w1.data() : nullptr, grads ? grads->b1.data() : nullptr);
    }

    static GanHead zeros_like(const GanHead& h) {
        GanHead g;
        g.in_dim = h.in_dim;
        g.hidden = h.hidden;
        g.w1.assign(h.w1.size(), 0.0);
        g.b1.assign(h.b1.size(), 0.0);
        g.w2.assign(h.w2.size(), 0.0);
        g.b2.assign(h.b2.size(), 0.0);
        return g;
    }
};

// Distillation state: student G_phi, frozen real denoiser T_psi, auxiliary
// fake denoiser T_phi-, discriminator head, and the adversarial weight.
struct DistillState {
    std::shared_ptr<CausalTransformer> student;
    std::shared_ptr<const CausalTransformer> real_denoiser;
    std::shared_ptr<CausalTransformer> fake_denoiser;
    GanHead head;
    double lambda_adv = 0.1;
    int gan_feature_layer = 0;
    std::uint64_t real_hash = 0;  // recorded at construction, asserted per step

    static DistillState from_teacher(const CausalTransformer& teacher, double lambda_adv, std::uint64_t seed) {
        DistillState s;
        s.student = std::make_shared<CausalTransformer>(teacher);
        s.real_denoiser = std::make_shared<const CausalTransformer>(teacher);
        s.fake_denoiser = std::make_shared<CausalTransformer>(teacher);
        s.lambda_adv = lambda_adv;
        s.gan_feature_layer = teacher.config().layers / 2;
        s.head = GanHead::init(teacher.config().width(), 32, seed);
        s.real_hash = param_hash(teacher.params(), teacher.config());
        return s;
    }
};

}  // namespace chunkflow

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "chunkflow/camr.hpp"
#include "chunkflow/common.hpp"
#include "chunkflow/latent.hpp"
#include "chunkflow/mask.hpp"
#include "chunkflow/rng.hpp"
#include "chunkflow/rope.hpp"
#include "chunkflow/schedule.hpp"
#include "chunkflow/serialize.hpp"

namespace chunkflow {

// Toy velocity-field transformer: pre-norm blocks of masked self-attention
// (temporal RoPE at block-relative positions), a per-segment prompt read (the
// closed form of single-token cross-attention), and an MLP. Everything runs
// in double precision with hand-written backward passes; the packed
// teacher-forcing path and the streaming KV-cache path share one attention
// kernel so their outputs agree to accumulation order.

constexpr int kTimeFeatures = 16;

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int head_dim = 16;
    int prompt_dim = 16;
    int mlp_mult = 4;
    LatentShape latent{};  // channels x height x width per frame
    double rope_base = 10000.0;
    std::int64_t f_train = 61;
    std::uint64_t seed = 0;

    int width() const { return heads * head_dim; }
    int mlp_dim() const { return mlp_mult * width(); }
    int spatial_tokens() const { return latent.spatial_tokens(); }
    int channels() const { return latent.channels; }

    RopeConfig rope() const { return RopeConfig{head_dim, rope_base, f_train}; }

    bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
    require(c.layers >= 1 && c.heads >= 1 && c.head_dim >= 2 && c.prompt_dim >= 1 && c.mlp_mult >= 1,
            "model config: dims must be positive");
    validate(c.latent);
    validate(c.rope());
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"layers", c.layers},         {"heads", c.heads},
                          {"head_dim", c.head_dim},     {"prompt_dim", c.prompt_dim},
                          {"mlp_mult", c.mlp_mult},     {"channels", c.latent.channels},
                          {"frame_h", c.latent.height}, {"frame_w", c.latent.width},
                          {"rope_base", c.rope_base},   {"f_train", c.f_train},
                          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.prompt_dim = j.at("prompt_dim").get<int>();
    c.mlp_mult = j.value("mlp_mult", 4);
    c.latent = LatentShape{j.at("channels").get<int>(), j.at("frame_h").get<int>(), j.at("frame_w").get<int>()};
    c.rope_base = j.value("rope_base", 10000.0);
    c.f_train = j.value("f_train", std::int64_t{61});
    c.seed = j.value("seed", std::uint64_t{0});
    validate(c);
    return c;
}

struct BlockParams {
    std::vector<double> ln1_g, ln1_b;
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<double> cross_w, cross_b;
    std::vector<double> ln2_g, ln2_b;
    std::vector<double> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct Params {
    std::vector<double> in_w, in_b;
    std::vector<double> time_w, time_b;
    std::vector<BlockParams> blocks;
    std::vector<double> lnf_g, lnf_b;
    std::vector<double> out_w, out_b;
};

// Visit every tensor with (name, vector&, rows, cols); cols is the fan-in for
// matrices and 0 for vectors. Visitation order fixes init and checkpoint order.
template <typename ParamsT, typename Fn>
void for_each_tensor(ParamsT& p, const ModelConfig& c, Fn&& fn) {
    const int x = c.width(), m = c.mlp_dim(), ch = c.channels();
    fn("in_w", p.in_w, x, ch);
    fn("in_b", p.in_b, x, 0);
    fn("time_w", p.time_w, x, kTimeFeatures);
    fn("time_b", p.time_b, x, 0);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        fn(pre + "ln1_g", b.ln1_g, x, 0);
        fn(pre + "ln1_b", b.ln1_b, x, 0);
        fn(pre + "wq", b.wq, x, x);
        fn(pre + "bq", b.bq, x, 0);
        fn(pre + "wk", b.wk, x, x);
        fn(pre + "bk", b.bk, x, 0);
        fn(pre + "wv", b.wv, x, x);
        fn(pre + "bv", b.bv, x, 0);
        fn(pre + "wo", b.wo, x, x);
        fn(pre + "bo", b.bo, x, 0);
        fn(pre + "cross_w", b.cross_w, x, c.prompt_dim);
        fn(pre + "cross_b", b.cross_b, x, 0);
        fn(pre + "ln2_g", b.ln2_g, x, 0);
        fn(pre + "ln2_b", b.ln2_b, x, 0);
        fn(pre + "mlp_w1", b.mlp_w1, m, x);
        fn(pre + "mlp_b1", b.mlp_b1, m, 0);
        fn(pre + "mlp_w2", b.mlp_w2, x, m);
        fn(pre + "mlp_b2", b.mlp_b2, x, 0);
    }
    fn("lnf_g", p.lnf_g, x, 0);
    fn("lnf_b", p.lnf_b, x, 0);
    fn("out_w", p.out_w, ch, x);
    fn("out_b", p.out_b, ch, 0);
}

inline Params make_params(const ModelConfig& c, bool unit_norm_gains) {
    Params p;
    p.blocks.resize(static_cast<std::size_t>(c.layers));
    for_each_tensor(p, c, [&](const std::string& name, std::vector<double>& t, int rows, int cols) {
        t.assign(static_cast<std::size_t>(rows) * std::max(cols, 1), 0.0);
        if (unit_norm_gains && name.ends_with("_g")) std::fill(t.begin(), t.end(), 1.0);
    });
    return p;
}

inline Params init_params(const ModelConfig& c) {
    Params p = make_params(c, true);
    Rng rng(mix_seed(c.seed, 0x696e6974ull));
    for_each_tensor(p, c, [&](const std::string& name, std::vector<double>& t, int, int cols) {
        if (cols == 0) return;  // biases and norm affines keep their fill
        double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        if (name.ends_with("wo") || name.ends_with("mlp_w2")) scale *= 0.5;  // tame residual growth at init
        for (double& w : t) w = scale * rng.normal();
    });
    return p;
}

inline std::size_t param_count(const Params& p, const ModelConfig& c) {
    std::size_t n = 0;
    for_each_tensor(const_cast<Params&>(p), c,
                    [&](const std::string&, std::vector<double>& t, int, int) { n += t.size(); });
    return n;
}

inline std::uint64_t param_hash(const Params& p, const ModelConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor(const_cast<Params&>(p), c,
                    [&](const std::string&, std::vector<double>& t, int, int) { h = fnv1a(t, h); });
    return h;
}

inline void axpy_params(Params& dst, const Params& src, const ModelConfig& c, double a) {
    std::vector<const std::vector<double>*> src_tensors;
    for_each_tensor(const_cast<Params&>(src), c,
                    [&](const std::string&, std::vector<double>& t, int, int) { src_tensors.push_back(&t); });
    std::size_t i = 0;
    for_each_tensor(dst, c, [&](const std::string&, std::vector<double>& t, int, int) {
        const auto& u = *src_tensors[i++];
        for (std::size_t j = 0; j < t.size(); ++j) t[j] += a * u[j];
    });
}

inline double grad_sq_norm(const Params& p, const ModelConfig& c) {
    double s = 0.0;
    for_each_tensor(const_cast<Params&>(p), c, [&](const std::string&, std::vector<double>& t, int, int) {
        for (double x : t) s += x * x;
    });
    return s;
}

namespace detail {

// y[t] = W x[t] + b over n tokens; W is row-major [out][in].
inline void linear_fwd(const double* x, int n, int in, int out, const double* w, const double* b, double* y) {
#pragma omp parallel for if (n * out * in > 65536)
    for (int t = 0; t < n; ++t) {
        const double* xt = x + static_cast<std::size_t>(t) * in;
        double* yt = y + static_cast<std::size_t>(t) * out;
        for (int o = 0; o < out; ++o) {
            const double* wr = w + static_cast<std::size_t>(o) * in;
            double acc = b ? b[o] : 0.0;
            for (int i = 0; i < in; ++i) acc += wr[i] * xt[i];
            yt[o] = acc;
        }
    }
}

// dx += W^T dy; dW += sum_t dy[t] (x) x[t]; db += sum_t dy[t].
inline void linear_bwd(const double* x, const double* dy, int n, int in, int out, const double* w, double* dx,
                       double* dw, double* db) {
    if (dx) {
#pragma omp parallel for if (n * in * out > 65536)
        for (int t = 0; t < n; ++t) {
            const double* dyt = dy + static_cast<std::size_t>(t) * out;
            double* dxt = dx + static_cast<std::size_t>(t) * in;
            for (int o = 0; o < out; ++o) {
                const double g = dyt[o];
                if (g == 0.0) continue;
                const double* wr = w + static_cast<std::size_t>(o) * in;
                for (int i = 0; i < in; ++i) dxt[i] += g * wr[i];
            }
        }
    }
    if (dw) {
#pragma omp parallel for if (n * in * out > 65536)
        for (int o = 0; o < out; ++o) {
            double* dwr = dw + static_cast<std::size_t>(o) * in;
            for (int t = 0; t < n; ++t) {
                const double g = dy[static_cast<std::size_t>(t) * out + o];
                if (g == 0.0) continue;
                const double* xt = x + static_cast<std::size_t>(t) * in;
                for (int i = 0; i < in; ++i) dwr[i] += g * xt[i];
            }
        }
    }
    if (db) {
        for (int t = 0; t < n; ++t) {
            const double* dyt = dy + static_cast<std::size_t>(t) * out;
            for (int o = 0; o < out; ++o) db[o] += dyt[o];
        }
    }
}

constexpr double kLnEps = 1e-5;

inline void ln_fwd(const double* x, int n, int dim, const double* g, const double* b, double* y, double* mean,
                   double* rstd) {
    for (int t = 0; t < n; ++t) {
        const double* xt = x + static_cast<std::size_t>(t) * dim;
        double* yt = y + static_cast<std::size_t>(t) * dim;
        double mu = 0.0;
        for (int i = 0; i < dim; ++i) mu += xt[i];
        mu /= dim;
        double var = 0.0;
        for (int i = 0; i < dim; ++i) var += (xt[i] - mu) * (xt[i] - mu);
        var /= dim;
        double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        for (int i = 0; i < dim; ++i) yt[i] = (xt[i] - mu) * rs * g[i] + b[i];
    }
}

inline void ln_bwd(const double* x, const double* dy, int n, int dim, const double* g, const double* mean,
                   const double* rstd, double* dx, double* dg, double* db) {
    for (int t = 0; t < n; ++t) {
        const double* xt = x + static_cast<std::size_t>(t) * dim;
        const double* dyt = dy + static_cast<std::size_t>(t) * dim;
        double* dxt = dx + static_cast<std::size_t>(t) * dim;
        const double mu = mean[t], rs = rstd[t];
        double sum_dh = 0.0, sum_dh_xhat = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double xhat = (xt[i] - mu) * rs;
            const double dh = dyt[i] * g[i];
            sum_dh += dh;
            sum_dh_xhat += dh * xhat;
            if (dg) dg[i] += dyt[i] * xhat;
            if (db) db[i] += dyt[i];
        }
        for (int i = 0; i < dim; ++i) {
            const double xhat = (xt[i] - mu) * rs;
            const double dh = dyt[i] * g[i];
            dxt[i] += rs * (dh - (sum_dh + xhat * sum_dh_xhat) / dim);
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

// Sinusoidal features of the scalar noise level; frequencies span [1, 100].
inline std::vector<double> time_features(double sigma) {
    std::vector<double> f(kTimeFeatures);
    for (int j = 0; j < kTimeFeatures / 2; ++j) {
        double omega = std::pow(100.0, static_cast<double>(j) / (kTimeFeatures / 2 - 1));
        f[2 * j] = std::sin(sigma * omega);
        f[2 * j + 1] = std::cos(sigma * omega);
    }
    return f;
}

// Fixed sinusoidal embedding of the spatial token index (added at the input;
// temporal identity comes from RoPE on q/k instead).
inline std::vector<double> spatial_table(int spatial_tokens, int width) {
    std::vector<double> tab(static_cast<std::size_t>(spatial_tokens) * width);
    for (int p = 0; p < spatial_tokens; ++p)
        for (int j = 0; j < width / 2; ++j) {
            double omega = std::pow(10000.0, -2.0 * j / width);
            tab[static_cast<std::size_t>(p) * width + 2 * j] = std::sin(p * omega);
            tab[static_cast<std::size_t>(p) * width + 2 * j + 1] = std::cos(p * omega);
        }
    return tab;
}

struct AttnCache {
    std::vector<double> weights;  // [tq][heads][nk]
};

// Attention over a gathered, ordered key list. q/k are rotated here at the
// caller-provided block-relative positions; v stays unrotated.
inline void attend_fwd(const double* q, int tq, const std::int64_t* q_pos, const double* k_gather, int nk,
                       const std::int64_t* k_pos, const double* v_gather, int heads, int head_dim,
                       const RopeTable& rope, double* mix, AttnCache* cache) {
    const int x = heads * head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<double> k_rot(k_gather, k_gather + static_cast<std::size_t>(nk) * x);
    for (int kk = 0; kk < nk; ++kk)
        for (int h = 0; h < heads; ++h)
            rope.rotate(std::span<double>(k_rot.data() + (static_cast<std::size_t>(kk) * heads + h) * head_dim,
                                          static_cast<std::size_t>(head_dim)),
                        k_pos[kk]);
    if (cache) cache->weights.assign(static_cast<std::size_t>(tq) * heads * nk, 0.0);
#pragma omp parallel for if (static_cast<long>(tq) * nk * x > 16384)
    for (int t = 0; t < tq; ++t) {
        std::vector<double> q_rot(q + static_cast<std::size_t>(t) * x, q + static_cast<std::size_t>(t + 1) * x);
        for (int h = 0; h < heads; ++h)
            rope.rotate(std::span<double>(q_rot.data() + static_cast<std::size_t>(h) * head_dim,
                                          static_cast<std::size_t>(head_dim)),
                        q_pos[t]);
        std::vector<double> scores(static_cast<std::size_t>(nk));
        for (int h = 0; h < heads; ++h) {
            const double* qh = q_rot.data() + static_cast<std::size_t>(h) * head_dim;
            double max_s = -1e300;
            for (int kk = 0; kk < nk; ++kk) {
                const double* kh = k_rot.data() + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                double s = 0.0;
                for (int d = 0; d < head_dim; ++d) s += qh[d] * kh[d];
                s *= inv_sqrt_d;
                scores[static_cast<std::size_t>(kk)] = s;
                max_s = std::max(max_s, s);
            }
            double z = 0.0;
            for (int kk = 0; kk < nk; ++kk) {
                double e = std::exp(scores[static_cast<std::size_t>(kk)] - max_s);
                scores[static_cast<std::size_t>(kk)] = e;
                z += e;
            }
            double* mh = mix + static_cast<std::size_t>(t) * x + static_cast<std::size_t>(h) * head_dim;
            std::fill(mh, mh + head_dim, 0.0);
            for (int kk = 0; kk < nk; ++kk) {
                const double w = scores[static_cast<std::size_t>(kk)] / z;
                if (cache) cache->weights[(static_cast<std::size_t>(t) * heads + h) * nk + kk] = w;
                const double* vh = v_gather + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                for (int d = 0; d < head_dim; ++d) mh[d] += w * vh[d];
            }
        }
    }
}

// Backward of attend_fwd. dq accumulates per query token; dk_gather/dv_gather
// accumulate per gathered key and may be null when keys are cached history
// (treated as constants).
inline void attend_bwd(const double* q, int tq, const std::int64_t* q_pos, const double* k_gather, int nk,
                       const std::int64_t* k_pos, const double* v_gather, int heads, int head_dim,
                       const RopeTable& rope, const double* dmix, const AttnCache& cache, double* dq,
                       double* dk_gather, double* dv_gather) {
    const int x = heads * head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<double> k_rot(k_gather, k_gather + static_cast<std::size_t>(nk) * x);
    for (int kk = 0; kk < nk; ++kk)
        for (int h = 0; h < heads; ++h)
            rope.rotate(std::span<double>(k_rot.data() + (static_cast<std::size_t>(kk) * heads + h) * head_dim,
                                          static_cast<std::size_t>(head_dim)),
                        k_pos[kk]);
#pragma omp parallel for if (static_cast<long>(tq) * nk * x > 16384)
    for (int h = 0; h < heads; ++h) {
        std::vector<double> dk_rot(static_cast<std::size_t>(nk) * head_dim, 0.0);
        std::vector<double> ds(static_cast<std::size_t>(nk));
        std::vector<double> q_rot(static_cast<std::size_t>(head_dim));
        std::vector<double> dq_rot(static_cast<std::size_t>(head_dim));
        for (int t = 0; t < tq; ++t) {
            const double* qh = q + static_cast<std::size_t>(t) * x + static_cast<std::size_t>(h) * head_dim;
            std::copy(qh, qh + head_dim, q_rot.begin());
            rope.rotate(q_rot, q_pos[t]);
            const double* dmh = dmix + static_cast<std::size_t>(t) * x + static_cast<std::size_t>(h) * head_dim;
            const double* wt = cache.weights.data() + (static_cast<std::size_t>(t) * heads + h) * nk;
            double sum_wdw = 0.0;
            for (int kk = 0; kk < nk; ++kk) {
                const double* vh = v_gather + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                double dw = 0.0;
                for (int d = 0; d < head_dim; ++d) dw += dmh[d] * vh[d];
                ds[static_cast<std::size_t>(kk)] = dw;
                sum_wdw += wt[kk] * dw;
                if (dv_gather) {
                    double* dvh = dv_gather + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                    for (int d = 0; d < head_dim; ++d) dvh[d] += wt[kk] * dmh[d];
                }
            }
            std::fill(dq_rot.begin(), dq_rot.end(), 0.0);
            for (int kk = 0; kk < nk; ++kk) {
                const double g = wt[kk] * (ds[static_cast<std::size_t>(kk)] - sum_wdw) * inv_sqrt_d;
                if (g == 0.0) continue;
                const double* kh = k_rot.data() + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                for (int d = 0; d < head_dim; ++d) {
                    dq_rot[static_cast<std::size_t>(d)] += g * kh[d];
                    dk_rot[static_cast<std::size_t>(kk) * head_dim + d] += g * q_rot[static_cast<std::size_t>(d)];
                }
            }
            if (dq) {
                rope.rotate(dq_rot, -q_pos[t]);
                double* dqh = dq + static_cast<std::size_t>(t) * x + static_cast<std::size_t>(h) * head_dim;
                for (int d = 0; d < head_dim; ++d) dqh[d] += dq_rot[static_cast<std::size_t>(d)];
            }
        }
        if (dk_gather) {
            for (int kk = 0; kk < nk; ++kk) {
                std::span<double> slice(dk_rot.data() + static_cast<std::size_t>(kk) * head_dim,
                                        static_cast<std::size_t>(head_dim));
                rope.rotate(slice, -k_pos[kk]);
                double* dkh = dk_gather + (static_cast<std::size_t>(kk) * heads + h) * head_dim;
                for (int d = 0; d < head_dim; ++d) dkh[d] += slice[d];
            }
        }
    }
}

}  // namespace detail

// Convert a chunk of frames (C x H x W grids) to token-major layout
// [frame][spatial][channel] and back.
inline std::vector<double> chunk_to_tokens(std::span<const LatentFrame> frames) {
    require(!frames.empty(), "chunk_to_tokens: empty chunk");
    const LatentShape s = frames.front().shape;
    const int p = s.spatial_tokens(), ch = s.channels;
    std::vector<double> tok(frames.size() * static_cast<std::size_t>(p) * ch);
    for (std::size_t f = 0; f < frames.size(); ++f) {
        require(frames[f].shape == s, "chunk_to_tokens: mixed shapes");
        for (int pp = 0; pp < p; ++pp)
            for (int c = 0; c < ch; ++c)
                tok[(f * p + pp) * ch + c] = frames[f].values[static_cast<std::size_t>(c) * p + pp];
    }
    return tok;
}

inline std::vector<LatentFrame> tokens_to_frames(std::span<const double> tokens, int chunk_len, LatentShape shape) {
    const int p = shape.spatial_tokens(), ch = shape.channels;
    require(tokens.size() == static_cast<std::size_t>(chunk_len) * p * ch, "tokens_to_frames: size mismatch");
    std::vector<LatentFrame> frames(static_cast<std::size_t>(chunk_len), LatentFrame(shape));
    for (int f = 0; f < chunk_len; ++f)
        for (int pp = 0; pp < p; ++pp)
            for (int c = 0; c < ch; ++c)
                frames[static_cast<std::size_t>(f)].values[static_cast<std::size_t>(c) * p + pp] =
                    tokens[(static_cast<std::size_t>(f) * p + pp) * ch + c];
    return frames;
}

// One teacher-forcing batch: N clean segments then N noisy segments sharing a
// single sampled sigma, with the quadrant mask and per-shot prompt routing.
struct PackedBatch {
    int n_chunks = 0;
    int chunk_len = 0;
    double sigma = 0.5;
    std::vector<std::vector<double>> clean_tokens;  // N x (L*P*C), token-major
    std::vector<std::vector<double>> noisy_tokens;  // N x (L*P*C)
    std::vector<std::vector<double>> targets;       // eps - x0
    std::vector<std::vector<double>> prompts;       // S x prompt_dim
    std::vector<int> segment_prompt;                // 2N -> prompt index
    VisibilityMask base_mask{1, 1};                 // unrouted quadrant mask
    bool routing_enabled = false;
    bool clean_routing = true;
    int window_chunks = 3;
    int top_k = 5;
    MemoryPolicy policy = MemoryPolicy::kCamr;
};

inline PackedBatch make_packed_batch(const std::vector<LatentFrame>& frames, const ShotSchedule& schedule,
                                     int chunk_len, double sigma, Rng& rng) {
    validate(schedule, chunk_len, static_cast<std::int64_t>(frames.size()));
    auto chunks = chunk_sequence(frames, chunk_len);
    PackedBatch b;
    b.n_chunks = static_cast<int>(chunks.size());
    b.chunk_len = chunk_len;
    b.sigma = sigma;
    b.prompts = schedule.prompts;
    b.segment_prompt = build_cross_routing(b.n_chunks, schedule, chunk_len);
    b.base_mask = build_tf_mask(b.n_chunks, chunk_len);
    for (const auto& c : chunks) {
        auto x0 = chunk_to_tokens(c.frames);
        std::vector<double> eps(x0.size());
        rng.fill_normal(eps);
        std::vector<double> target(x0.size());
        for (std::size_t i = 0; i < x0.size(); ++i) target[i] = eps[i] - x0[i];
        b.noisy_tokens.push_back(flow_interpolate(x0, eps, sigma));
        b.clean_tokens.push_back(std::move(x0));
        b.targets.push_back(std::move(target));
    }
    return b;
}

namespace detail {

// Gather plan for one query segment at one layer: ordered key frames
// (memory | window | current) with block-relative positions.
struct SegPlan {
    ReceptiveField field;
    std::vector<std::int64_t> key_frames;  // global frame indices in gather order
    std::vector<std::int64_t> key_pos;     // per key token
    std::vector<std::int64_t> q_pos;       // per query token
    int history_frames = 0;                // entries of key_frames sourced from history/clean
};

inline SegPlan make_seg_plan(const ReceptiveField& field, int chunk_len, int spatial_tokens) {
    SegPlan plan;
    plan.field = field;
    const int k_sel = field.k_selected();
    const int win = field.window_chunk_count();
    for (std::int64_t f : field.memory_frames) plan.key_frames.push_back(f);
    for (std::int64_t c = field.window_first_chunk; c <= field.window_last_chunk; ++c)
        for (int f = 0; f < chunk_len; ++f) plan.key_frames.push_back((c - 1) * chunk_len + f);
    plan.history_frames = static_cast<int>(plan.key_frames.size());
    for (int f = 0; f < chunk_len; ++f) plan.key_frames.push_back((field.current_chunk - 1) * chunk_len + f);
    auto slots = block_relative_positions(k_sel, win, chunk_len);
    plan.key_pos.reserve(plan.key_frames.size() * spatial_tokens);
    for (std::size_t s = 0; s < plan.key_frames.size(); ++s)
        for (int p = 0; p < spatial_tokens; ++p) plan.key_pos.push_back(slots[s]);
    const std::int64_t cur_base = static_cast<std::int64_t>(k_sel) + static_cast<std::int64_t>(win) * chunk_len;
    plan.q_pos.reserve(static_cast<std::size_t>(chunk_len) * spatial_tokens);
    for (int f = 0; f < chunk_len; ++f)
        for (int p = 0; p < spatial_tokens; ++p) plan.q_pos.push_back(cur_base + f);
    return plan;
}

struct SegCache {
    SegPlan plan;
    std::vector<int> src_rows;               // per key token: global token row, -1 when external
    std::vector<double> k_gather, v_gather;  // unrotated copies in gather order
    AttnCache attn;
};

struct LayerCache {
    std::vector<double> x_in;
    std::vector<double> u1, ln1_mean, ln1_rstd;
    std::vector<double> q, k, v;
    std::vector<double> mix;
    std::vector<double> b_post;  // after attention residual + prompt read
    std::vector<double> u2, ln2_mean, ln2_rstd;
    std::vector<double> h1, g1;
    std::vector<SegCache> segs;
};

struct FinalCache {
    std::vector<double> y;  // output of the last block (all rows)
    int head_row0 = 0, head_rows = 0;
    std::vector<double> uf, lnf_mean, lnf_rstd;  // head rows only
};

}  // namespace detail

struct PackedCache {
    int n_chunks = 0, chunk_len = 0;
    double sigma = 0.0;
    std::vector<double> raw;  // input channels per token (for embedding backward)
    std::vector<double> x0;   // embedded input
    std::vector<detail::LayerCache> layers;
    detail::FinalCache fin;
    std::vector<std::vector<ReceptiveField>> noisy_fields, clean_fields;  // [layer][chunk-1]
};

// Streaming call context. `store` supplies cached history for chunks
// < chunk_index; when `append_to` is set, the chunk's unrotated keys/values
// are appended per layer after the forward completes.
struct StreamCtx {
    const KVMemoryStore* store = nullptr;
    std::int64_t chunk_index = 1;
    int chunk_len = 1;
    double sigma = 0.0;
    std::span<const double> prompt;
    bool routing = false;
    int window_chunks = 3;
    int top_k = 5;
    MemoryPolicy policy = MemoryPolicy::kCamr;
    const std::vector<ReceptiveField>* fields_in = nullptr;   // per layer, reused when given
    std::vector<ReceptiveField>* fields_out = nullptr;        // captured when given
    KVMemoryStore* append_to = nullptr;
    std::int64_t* attended_frames = nullptr;  // unique key frames per query (max over layers)
    std::int64_t* max_position = nullptr;     // largest RoPE position used
};

struct StreamCache {
    std::int64_t chunk_index = 1;
    int chunk_len = 1;
    double sigma = 0.0;
    std::vector<double> prompt;
    std::vector<double> raw;
    std::vector<double> x0;
    std::vector<detail::LayerCache> layers;
    detail::FinalCache fin;
};

class CausalTransformer {
public:
    explicit CausalTransformer(ModelConfig cfg) : cfg_(cfg), rope_(cfg.rope()), params_(init_params(cfg)) {
        validate(cfg);
        spatial_ = detail::spatial_table(cfg.spatial_tokens(), cfg.width());
    }

    const ModelConfig& config() const { return cfg_; }
    const Params& params() const { return params_; }
    Params& params() { return params_; }
    const RopeTable& rope_table() const { return rope_; }

    // -- packed teacher forcing ------------------------------------------

    // One parallel pass over the 2N segments; returns the velocity
    // prediction for each noisy segment.
    std::vector<std::vector<double>> forward_packed(const PackedBatch& batch, PackedCache* cache = nullptr) const {
        check_batch(batch);
        PackedCache local;
        PackedCache& c = cache ? *cache : local;
        const int n = batch.n_chunks, l = batch.chunk_len;
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), ch = cfg_.channels();
        const int seg_tokens = l * p;
        const int total = 2 * n * seg_tokens;
        c.n_chunks = n;
        c.chunk_len = l;
        c.sigma = batch.sigma;
        c.layers.assign(static_cast<std::size_t>(cfg_.layers), {});
        c.noisy_fields.assign(static_cast<std::size_t>(cfg_.layers), {});
        c.clean_fields.assign(static_cast<std::size_t>(cfg_.layers), {});

        c.raw.assign(static_cast<std::size_t>(total) * ch, 0.0);
        for (int s = 0; s < 2 * n; ++s) {
            const auto& tok = s < n ? batch.clean_tokens[static_cast<std::size_t>(s)]
                                    : batch.noisy_tokens[static_cast<std::size_t>(s - n)];
            std::copy(tok.begin(), tok.end(), c.raw.begin() + static_cast<std::size_t>(s) * seg_tokens * ch);
        }
        c.x0.assign(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_fwd(c.raw.data(), total, ch, x, params_.in_w.data(), params_.in_b.data(), c.x0.data());
        // spatial table + per-role timestep embedding
        auto te0 = time_embedding(0.0);
        auto tes = time_embedding(batch.sigma);
        for (int g = 0; g < total; ++g) {
            const bool noisy = g >= n * seg_tokens;
            const int pp = g % p;
            const double* te = noisy ? tes.data() : te0.data();
            double* row = c.x0.data() + static_cast<std::size_t>(g) * x;
            const double* sp = spatial_.data() + static_cast<std::size_t>(pp) * x;
            for (int i = 0; i < x; ++i) row[i] += sp[i] + te[i];
        }

        std::vector<double> act = c.x0;
        for (int layer = 0; layer < cfg_.layers; ++layer) {
            auto& lc = c.layers[static_cast<std::size_t>(layer)];
            lc.x_in = std::move(act);
            act = block_forward_packed(batch, layer, lc, c.noisy_fields[static_cast<std::size_t>(layer)],
                                       c.clean_fields[static_cast<std::size_t>(layer)]);
        }
        c.fin.y = std::move(act);
        c.fin.head_row0 = n * seg_tokens;
        c.fin.head_rows = n * seg_tokens;
        return run_head(c.fin, batch.n_chunks, seg_tokens);
    }

    double tf_loss(const PackedBatch& batch) const {
        auto preds = forward_packed(batch);
        double s = 0.0;
        std::size_t count = 0;
        for (int i = 0; i < batch.n_chunks; ++i) {
            const auto& pr = preds[static_cast<std::size_t>(i)];
            const auto& tg = batch.targets[static_cast<std::size_t>(i)];
            for (std::size_t j = 0; j < pr.size(); ++j) s += (pr[j] - tg[j]) * (pr[j] - tg[j]);
            count += pr.size();
        }
        return s / static_cast<double>(count);
    }

    // Loss plus parameter gradients (accumulated into `grads`).
    double tf_loss_grad(const PackedBatch& batch, Params& grads) const {
        PackedCache cache;
        auto preds = forward_packed(batch, &cache);
        double s = 0.0;
        std::size_t count = 0;
        for (const auto& pr : preds) count += pr.size();
        std::vector<std::vector<double>> dpred(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
            dpred[i].resize(preds[i].size());
            const auto& tg = batch.targets[i];
            for (std::size_t j = 0; j < preds[i].size(); ++j) {
                const double r = preds[i][j] - tg[j];
                s += r * r;
                dpred[i][j] = 2.0 * r / static_cast<double>(count);
            }
        }
        backward_packed(batch, cache, dpred, grads);
        return s / static_cast<double>(count);
    }

    void backward_packed(const PackedBatch& batch, const PackedCache& cache,
                         const std::vector<std::vector<double>>& dpred, Params& grads) const {
        const int n = batch.n_chunks, l = batch.chunk_len;
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), ch = cfg_.channels();
        const int seg_tokens = l * p;
        const int total = 2 * n * seg_tokens;
        std::vector<double> dvel(static_cast<std::size_t>(n) * seg_tokens * ch, 0.0);
        for (int i = 0; i < n; ++i)
            std::copy(dpred[static_cast<std::size_t>(i)].begin(), dpred[static_cast<std::size_t>(i)].end(),
                      dvel.begin() + static_cast<std::size_t>(i) * seg_tokens * ch);
        std::vector<double> d_act(static_cast<std::size_t>(total) * x, 0.0);
        head_backward(cache.fin, dvel, d_act, grads);
        for (int layer = cfg_.layers - 1; layer >= 0; --layer)
            block_backward(batch.prompts, batch.segment_prompt, cache.layers[static_cast<std::size_t>(layer)],
                           2 * n, seg_tokens, layer, d_act, grads);
        embedding_backward(cache.raw, d_act, total, seg_tokens * n, batch.sigma, grads, nullptr);
    }

    // -- streaming (KV-cache) path ---------------------------------------

    std::vector<double> forward_stream(std::span<const double> x_tokens, const StreamCtx& ctx,
                                       StreamCache* cache = nullptr) const {
        const int l = ctx.chunk_len;
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), ch = cfg_.channels();
        const int t = l * p;
        require(x_tokens.size() == static_cast<std::size_t>(t) * ch, "forward_stream: token size mismatch");
        require(ctx.prompt.size() == static_cast<std::size_t>(cfg_.prompt_dim), "forward_stream: prompt width");
        if (ctx.store)
            require(ctx.store->layer_count() == cfg_.layers, "forward_stream: store layer count mismatch");

        StreamCache local;
        StreamCache& c = cache ? *cache : local;
        c.chunk_index = ctx.chunk_index;
        c.chunk_len = l;
        c.sigma = ctx.sigma;
        c.prompt.assign(ctx.prompt.begin(), ctx.prompt.end());
        c.raw.assign(x_tokens.begin(), x_tokens.end());
        c.layers.assign(static_cast<std::size_t>(cfg_.layers), {});

        c.x0.assign(static_cast<std::size_t>(t) * x, 0.0);
        detail::linear_fwd(c.raw.data(), t, ch, x, params_.in_w.data(), params_.in_b.data(), c.x0.data());
        auto te = time_embedding(ctx.sigma);
        for (int g = 0; g < t; ++g) {
            double* row = c.x0.data() + static_cast<std::size_t>(g) * x;
            const double* sp = spatial_.data() + static_cast<std::size_t>(g % p) * x;
            for (int i = 0; i < x; ++i) row[i] += sp[i] + te[i];
        }

        std::vector<std::vector<std::vector<double>>> pending_kv;  // [layer][frame] -> {keys, values}
        if (ctx.append_to) pending_kv.assign(static_cast<std::size_t>(cfg_.layers), {});
        if (ctx.fields_out) ctx.fields_out->assign(static_cast<std::size_t>(cfg_.layers), ReceptiveField{});

        std::vector<double> act = c.x0;
        for (int layer = 0; layer < cfg_.layers; ++layer) {
            auto& lc = c.layers[static_cast<std::size_t>(layer)];
            lc.x_in = std::move(act);
            act = block_forward_stream(ctx, layer, lc, ctx.append_to ? &pending_kv[static_cast<std::size_t>(layer)]
                                                                     : nullptr);
        }
        c.fin.y = std::move(act);
        c.fin.head_row0 = 0;
        c.fin.head_rows = t;
        auto preds = run_head(c.fin, 1, t);

        if (ctx.append_to) {
            const std::int64_t base = (ctx.chunk_index - 1) * l;
            for (int layer = 0; layer < cfg_.layers; ++layer)
                for (int f = 0; f < l; ++f)
                    ctx.append_to->append_frame(layer, base + f, ctx.chunk_index,
                                                std::move(pending_kv[static_cast<std::size_t>(layer)]
                                                                    [static_cast<std::size_t>(2 * f)]),
                                                std::move(pending_kv[static_cast<std::size_t>(layer)]
                                                                    [static_cast<std::size_t>(2 * f + 1)]));
        }
        return std::move(preds.front());
    }

    // Backward through one streaming forward. Cached history is constant
    // (self-forcing detaches it); gradients reach the current chunk's tokens
    // and, when `grads` is non-null, the parameters.
    void backward_stream(const StreamCache& cache, std::span<const double> dvel, Params* grads,
                         std::vector<double>* dx_tokens, int stop_after_layer = -1) const {
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), ch = cfg_.channels();
        const int t = cache.chunk_len * p;
        std::vector<double> d_act(static_cast<std::size_t>(t) * x, 0.0);
        const int depth = stop_after_layer >= 0 ? stop_after_layer + 1 : cfg_.layers;
        Params scratch;
        if (!grads) scratch = make_params(cfg_, false);
        Params& g = grads ? *grads : scratch;
        if (stop_after_layer < 0) {
            require(dvel.size() == static_cast<std::size_t>(t) * ch, "backward_stream: dvel size");
            std::vector<double> dv(dvel.begin(), dvel.end());
            head_backward(cache.fin, dv, d_act, g);
        } else {
            // entry gradient arrives directly on the block-`stop_after_layer` output
            require(dvel.size() == static_cast<std::size_t>(t) * x, "backward_stream: feature grad size");
            std::copy(dvel.begin(), dvel.end(), d_act.begin());
        }
        std::vector<int> seg_prompt{0};
        std::vector<std::vector<double>> prompts{cache.prompt};
        for (int layer = depth - 1; layer >= 0; --layer)
            block_backward(prompts, seg_prompt, cache.layers[static_cast<std::size_t>(layer)], 1, t, layer, d_act,
                           g);
        embedding_backward(cache.raw, d_act, t, 0, cache.sigma, g, dx_tokens);
    }

    // Feature hook for discriminator heads: mean-pooled block output.
    std::vector<double> mid_features(const StreamCache& cache, int layer) const {
        require(layer >= 0 && layer < cfg_.layers, "mid_features: layer out of range");
        const auto& next = layer + 1 < cfg_.layers ? cache.layers[static_cast<std::size_t>(layer) + 1].x_in
                                                   : cache.fin.y;
        const int x = cfg_.width();
        const int t = static_cast<int>(next.size()) / x;
        std::vector<double> f(static_cast<std::size_t>(x), 0.0);
        for (int g = 0; g < t; ++g)
            for (int i = 0; i < x; ++i) f[static_cast<std::size_t>(i)] += next[static_cast<std::size_t>(g) * x + i];
        for (double& v : f) v /= t;
        return f;
    }

    // Gradient of a mean-pooled feature cotangent back to the chunk tokens.
    std::vector<double> mid_features_input_grad(const StreamCache& cache, int layer,
                                                std::span<const double> dfeat) const {
        const int x = cfg_.width();
        const int t = cache.chunk_len * cfg_.spatial_tokens();
        require(dfeat.size() == static_cast<std::size_t>(x), "mid_features_input_grad: feature width");
        std::vector<double> d_out(static_cast<std::size_t>(t) * x);
        for (int g = 0; g < t; ++g)
            for (int i = 0; i < x; ++i)
                d_out[static_cast<std::size_t>(g) * x + i] = dfeat[static_cast<std::size_t>(i)] / t;
        std::vector<double> dx;
        backward_stream(cache, d_out, nullptr, &dx, layer);
        return dx;
    }

    // -- checkpoints -------------------------------------------------------

    void save_checkpoint(const std::filesystem::path& path) const {
        std::string payload;
        nlohmann::json manifest = nlohmann::json::array();
        std::size_t offset = 0;
        for_each_tensor(const_cast<Params&>(params_), cfg_,
                        [&](const std::string& name, std::vector<double>& tns, int rows, int cols) {
                            manifest.push_back({{"name", name},
                                                {"rows", rows},
                                                {"cols", cols},
                                                {"offset", offset},
                                                {"count", tns.size()}});
                            for (double v : tns) detail::put_le<float>(payload, static_cast<float>(v));
                            offset += tns.size();
                        });
        nlohmann::json header{{"config", to_json(cfg_)}, {"manifest", manifest}};
        std::string head_str = header.dump();
        std::string bytes;
        bytes.append("CFCK", 4);
        detail::put_le<std::uint32_t>(bytes, 1);
        detail::put_le<std::uint64_t>(bytes, head_str.size());
        bytes.append(head_str);
        detail::put_le<std::uint64_t>(bytes, payload.size());
        bytes.append(payload);
        detail::put_le<std::uint64_t>(bytes, fnv1a(payload.data(), payload.size()));
        write_file(path, bytes);
    }

    static CausalTransformer load_checkpoint(const std::filesystem::path& path) {
        std::string bytes = read_file(path);
        ensure(bytes.size() > 16 && bytes.compare(0, 4, "CFCK") == 0, "checkpoint: bad magic");
        std::size_t off = 4;
        auto version = detail::get_le<std::uint32_t>(bytes, off);
        ensure(version == 1, "checkpoint: unsupported version");
        auto head_len = detail::get_le<std::uint64_t>(bytes, off);
        ensure(off + head_len <= bytes.size(), "checkpoint: truncated header");
        auto header = nlohmann::json::parse(bytes.substr(off, head_len));
        off += head_len;
        auto payload_len = detail::get_le<std::uint64_t>(bytes, off);
        ensure(off + payload_len + 8 <= bytes.size(), "checkpoint: truncated payload");
        const std::size_t payload_off = off;
        off += payload_len;
        auto stored_hash = detail::get_le<std::uint64_t>(bytes, off);
        ensure(stored_hash == fnv1a(bytes.data() + payload_off, payload_len), "checkpoint: payload hash mismatch");

        CausalTransformer model(model_config_from_json(header.at("config")));
        std::size_t float_off = payload_off;
        for_each_tensor(model.params_, model.cfg_, [&](const std::string&, std::vector<double>& tns, int, int) {
            for (double& v : tns) v = detail::get_le<float>(bytes, float_off);
        });
        ensure(float_off == payload_off + payload_len, "checkpoint: payload size mismatch");
        return model;
    }

private:
    std::vector<double> time_embedding(double sigma) const {
        auto feat = detail::time_features(sigma);
        std::vector<double> e(static_cast<std::size_t>(cfg_.width()));
        detail::linear_fwd(feat.data(), 1, kTimeFeatures, cfg_.width(), params_.time_w.data(), params_.time_b.data(),
                           e.data());
        return e;
    }

    void check_batch(const PackedBatch& b) const {
        require(b.n_chunks >= 1 && b.chunk_len >= 1, "packed batch: empty");
        const std::size_t want = static_cast<std::size_t>(b.chunk_len) * cfg_.spatial_tokens() * cfg_.channels();
        require(b.clean_tokens.size() == static_cast<std::size_t>(b.n_chunks) &&
                    b.noisy_tokens.size() == b.clean_tokens.size(),
                "packed batch: chunk count mismatch");
        for (const auto& tns : b.clean_tokens) require(tns.size() == want, "packed batch: clean token size");
        for (const auto& tns : b.noisy_tokens) require(tns.size() == want, "packed batch: noisy token size");
        require(b.segment_prompt.size() == static_cast<std::size_t>(2 * b.n_chunks),
                "packed batch: segment->prompt map size");
        for (int idx : b.segment_prompt)
            require(idx >= 0 && idx < static_cast<int>(b.prompts.size()), "packed batch: prompt index range");
        for (const auto& pr : b.prompts)
            require(pr.size() == static_cast<std::size_t>(cfg_.prompt_dim), "packed batch: prompt width");
        require(b.sigma >= 0.0 && b.sigma <= 1.0, "packed batch: sigma outside [0,1]");
    }

    ReceptiveField full_history_field(std::int64_t chunk_index) const {
        ReceptiveField rf;
        rf.current_chunk = chunk_index;
        rf.window_first_chunk = 1;
        rf.window_last_chunk = chunk_index - 1;
        return rf;
    }

    // ---- packed internals ----

    std::vector<double> block_forward_packed(const PackedBatch& batch, int layer, detail::LayerCache& lc,
                                             std::vector<ReceptiveField>& noisy_fields,
                                             std::vector<ReceptiveField>& clean_fields) const {
        const int n = batch.n_chunks, l = batch.chunk_len;
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), h = cfg_.heads, d = cfg_.head_dim;
        const int seg_tokens = l * p;
        const int total = 2 * n * seg_tokens;
        const auto& bp = params_.blocks[static_cast<std::size_t>(layer)];

        lc.u1.assign(static_cast<std::size_t>(total) * x, 0.0);
        lc.ln1_mean.assign(static_cast<std::size_t>(total), 0.0);
        lc.ln1_rstd.assign(static_cast<std::size_t>(total), 0.0);
        detail::ln_fwd(lc.x_in.data(), total, x, bp.ln1_g.data(), bp.ln1_b.data(), lc.u1.data(), lc.ln1_mean.data(),
                       lc.ln1_rstd.data());
        lc.q.assign(static_cast<std::size_t>(total) * x, 0.0);
        lc.k.assign(static_cast<std::size_t>(total) * x, 0.0);
        lc.v.assign(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_fwd(lc.u1.data(), total, x, x, bp.wq.data(), bp.bq.data(), lc.q.data());
        detail::linear_fwd(lc.u1.data(), total, x, x, bp.wk.data(), bp.bk.data(), lc.k.data());
        detail::linear_fwd(lc.u1.data(), total, x, x, bp.wv.data(), bp.bv.data(), lc.v.data());

        // layer-local routing from in-flight clean keys/queries
        noisy_fields.assign(static_cast<std::size_t>(n), ReceptiveField{});
        clean_fields.assign(static_cast<std::size_t>(n), ReceptiveField{});
        std::vector<double> descriptors;
        std::vector<FrameMeta> meta;
        if (batch.routing_enabled) {
            descriptors.resize(static_cast<std::size_t>(n) * l * x);
            meta.resize(static_cast<std::size_t>(n) * l);
            for (std::int64_t fr = 0; fr < static_cast<std::int64_t>(n) * l; ++fr) {
                auto desc = frame_descriptor(
                    std::span<const double>(lc.k.data() + static_cast<std::size_t>(fr) * p * x,
                                            static_cast<std::size_t>(p) * x),
                    p, h, d);
                std::copy(desc.begin(), desc.end(), descriptors.begin() + static_cast<std::size_t>(fr) * x);
                meta[static_cast<std::size_t>(fr)] = {fr, fr / l + 1,
                                                      descriptors.data() + static_cast<std::size_t>(fr) * x};
            }
        }
        for (int i = 1; i <= n; ++i) {
            if (batch.routing_enabled) {
                auto qdesc = chunk_query_descriptor(
                    std::span<const double>(lc.q.data() +
                                                (static_cast<std::size_t>(n + i - 1)) * seg_tokens * x,
                                            static_cast<std::size_t>(seg_tokens) * x),
                    l, p, h, d);
                noisy_fields[static_cast<std::size_t>(i) - 1] = assemble_receptive_field(
                    i, std::span<const FrameMeta>(meta), batch.window_chunks, batch.top_k, qdesc, batch.policy);
                if (batch.clean_routing) {
                    auto cdesc = chunk_query_descriptor(
                        std::span<const double>(lc.q.data() + (static_cast<std::size_t>(i - 1)) * seg_tokens * x,
                                                static_cast<std::size_t>(seg_tokens) * x),
                        l, p, h, d);
                    clean_fields[static_cast<std::size_t>(i) - 1] = assemble_receptive_field(
                        i, std::span<const FrameMeta>(meta), batch.window_chunks, batch.top_k, cdesc, batch.policy);
                } else {
                    clean_fields[static_cast<std::size_t>(i) - 1] = full_history_field(i);
                }
            } else {
                noisy_fields[static_cast<std::size_t>(i) - 1] = full_history_field(i);
                clean_fields[static_cast<std::size_t>(i) - 1] = full_history_field(i);
            }
        }

        lc.mix.assign(static_cast<std::size_t>(total) * x, 0.0);
        lc.segs.assign(static_cast<std::size_t>(2 * n), {});
        for (int s = 0; s < 2 * n; ++s) {
            const bool noisy = s >= n;
            const int chunk = noisy ? s - n + 1 : s + 1;
            const auto& field = noisy ? noisy_fields[static_cast<std::size_t>(chunk) - 1]
                                      : clean_fields[static_cast<std::size_t>(chunk) - 1];
            check_position_span(field.k_selected(), field.window_chunk_count(), l, cfg_.rope());
            auto& sc = lc.segs[static_cast<std::size_t>(s)];
            sc.plan = detail::make_seg_plan(field, l, p);
            const int n_key_tokens = static_cast<int>(sc.plan.key_frames.size()) * p;
            sc.src_rows.resize(static_cast<std::size_t>(n_key_tokens));
            sc.k_gather.resize(static_cast<std::size_t>(n_key_tokens) * x);
            sc.v_gather.resize(static_cast<std::size_t>(n_key_tokens) * x);
            for (std::size_t slot = 0; slot < sc.plan.key_frames.size(); ++slot) {
                const std::int64_t kf = sc.plan.key_frames[slot];
                const bool current = static_cast<int>(slot) >= sc.plan.history_frames;
                // history comes from clean segments; the current chunk's keys
                // come from the query's own segment (clean or noisy copy)
                const int src_seg = current ? s : static_cast<int>(kf / l);
                const int row0 = src_seg * seg_tokens + static_cast<int>(kf % l) * p;
                for (int pp = 0; pp < p; ++pp) {
                    const int row = row0 + pp;
                    sc.src_rows[slot * p + pp] = row;
                    std::copy(lc.k.data() + static_cast<std::size_t>(row) * x,
                              lc.k.data() + static_cast<std::size_t>(row + 1) * x,
                              sc.k_gather.begin() + (slot * p + pp) * x);
                    std::copy(lc.v.data() + static_cast<std::size_t>(row) * x,
                              lc.v.data() + static_cast<std::size_t>(row + 1) * x,
                              sc.v_gather.begin() + (slot * p + pp) * x);
                }
            }
            detail::attend_fwd(lc.q.data() + static_cast<std::size_t>(s) * seg_tokens * x, seg_tokens,
                               sc.plan.q_pos.data(), sc.k_gather.data(), n_key_tokens, sc.plan.key_pos.data(),
                               sc.v_gather.data(), h, d, rope_,
                               lc.mix.data() + static_cast<std::size_t>(s) * seg_tokens * x, &sc.attn);
        }

        return finish_block(lc, batch.prompts, batch.segment_prompt, 2 * n, seg_tokens, bp);
    }

    // attention output projection + prompt read + MLP, shared by both paths
    std::vector<double> finish_block(detail::LayerCache& lc, const std::vector<std::vector<double>>& prompts,
                                     const std::vector<int>& seg_prompt, int n_segs, int seg_tokens,
                                     const BlockParams& bp) const {
        const int x = cfg_.width(), m = cfg_.mlp_dim();
        const int total = n_segs * seg_tokens;
        std::vector<double> attn_out(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_fwd(lc.mix.data(), total, x, x, bp.wo.data(), bp.bo.data(), attn_out.data());
        lc.b_post.assign(static_cast<std::size_t>(total) * x, 0.0);
        for (int s = 0; s < n_segs; ++s) {
            std::vector<double> cross(static_cast<std::size_t>(x), 0.0);
            const auto& prompt = prompts[static_cast<std::size_t>(seg_prompt[static_cast<std::size_t>(s)])];
            detail::linear_fwd(prompt.data(), 1, cfg_.prompt_dim, x, bp.cross_w.data(), bp.cross_b.data(),
                               cross.data());
            for (int tt = 0; tt < seg_tokens; ++tt) {
                const std::size_t row = static_cast<std::size_t>(s) * seg_tokens + tt;
                for (int i = 0; i < x; ++i)
                    lc.b_post[row * x + i] = lc.x_in[row * x + i] + attn_out[row * x + i] + cross[static_cast<std::size_t>(i)];
            }
        }
        lc.u2.assign(static_cast<std::size_t>(total) * x, 0.0);
        lc.ln2_mean.assign(static_cast<std::size_t>(total), 0.0);
        lc.ln2_rstd.assign(static_cast<std::size_t>(total), 0.0);
        detail::ln_fwd(lc.b_post.data(), total, x, bp.ln2_g.data(), bp.ln2_b.data(), lc.u2.data(), lc.ln2_mean.data(),
                       lc.ln2_rstd.data());
        lc.h1.assign(static_cast<std::size_t>(total) * m, 0.0);
        detail::linear_fwd(lc.u2.data(), total, x, m, bp.mlp_w1.data(), bp.mlp_b1.data(), lc.h1.data());
        lc.g1.resize(lc.h1.size());
        for (std::size_t i = 0; i < lc.h1.size(); ++i) lc.g1[i] = detail::gelu(lc.h1[i]);
        std::vector<double> out(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_fwd(lc.g1.data(), total, m, x, bp.mlp_w2.data(), bp.mlp_b2.data(), out.data());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += lc.b_post[i];
        return out;
    }

    std::vector<std::vector<double>> run_head(detail::FinalCache& fin, int n_chunks, int seg_tokens) const {
        const int x = cfg_.width(), ch = cfg_.channels();
        const int rows = fin.head_rows;
        fin.uf.assign(static_cast<std::size_t>(rows) * x, 0.0);
        fin.lnf_mean.assign(static_cast<std::size_t>(rows), 0.0);
        fin.lnf_rstd.assign(static_cast<std::size_t>(rows), 0.0);
        detail::ln_fwd(fin.y.data() + static_cast<std::size_t>(fin.head_row0) * x, rows, x, params_.lnf_g.data(),
                       params_.lnf_b.data(), fin.uf.data(), fin.lnf_mean.data(), fin.lnf_rstd.data());
        std::vector<double> out(static_cast<std::size_t>(rows) * ch, 0.0);
        detail::linear_fwd(fin.uf.data(), rows, x, ch, params_.out_w.data(), params_.out_b.data(), out.data());
        std::vector<std::vector<double>> preds(static_cast<std::size_t>(n_chunks));
        for (int i = 0; i < n_chunks; ++i)
            preds[static_cast<std::size_t>(i)].assign(
                out.begin() + static_cast<std::size_t>(i) * seg_tokens * ch,
                out.begin() + static_cast<std::size_t>(i + 1) * seg_tokens * ch);
        return preds;
    }

    void head_backward(const detail::FinalCache& fin, const std::vector<double>& dvel, std::vector<double>& d_act,
                       Params& grads) const {
        const int x = cfg_.width(), ch = cfg_.channels();
        const int rows = fin.head_rows;
        std::vector<double> d_uf(static_cast<std::size_t>(rows) * x, 0.0);
        detail::linear_bwd(fin.uf.data(), dvel.data(), rows, x, ch, params_.out_w.data(), d_uf.data(),
                           grads.out_w.data(), grads.out_b.data());
        detail::ln_bwd(fin.y.data() + static_cast<std::size_t>(fin.head_row0) * x, d_uf.data(), rows, x,
                       params_.lnf_g.data(), fin.lnf_mean.data(), fin.lnf_rstd.data(),
                       d_act.data() + static_cast<std::size_t>(fin.head_row0) * x, grads.lnf_g.data(),
                       grads.lnf_b.data());
    }

    // Shared block backward; d_act carries d(block output) in and leaves
    // d(block input).
    void block_backward(const std::vector<std::vector<double>>& prompts, const std::vector<int>& seg_prompt,
                        const detail::LayerCache& lc, int n_segs, int seg_tokens, int layer,
                        std::vector<double>& d_act, Params& grads) const {
        const int x = cfg_.width(), m = cfg_.mlp_dim(), h = cfg_.heads, d = cfg_.head_dim;
        const int total = n_segs * seg_tokens;
        const auto& bp = params_.blocks[static_cast<std::size_t>(layer)];
        auto& gp = grads.blocks[static_cast<std::size_t>(layer)];

        // y = b + w2 * gelu(w1 * ln2(b)); d_act holds dY
        std::vector<double> d_g1(static_cast<std::size_t>(total) * m, 0.0);
        detail::linear_bwd(lc.g1.data(), d_act.data(), total, m, x, bp.mlp_w2.data(), d_g1.data(), gp.mlp_w2.data(),
                           gp.mlp_b2.data());
        std::vector<double>& d_h1 = d_g1;
        for (std::size_t i = 0; i < d_h1.size(); ++i) d_h1[i] *= detail::gelu_grad(lc.h1[i]);
        std::vector<double> d_u2(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_bwd(lc.u2.data(), d_h1.data(), total, x, m, bp.mlp_w1.data(), d_u2.data(), gp.mlp_w1.data(),
                           gp.mlp_b1.data());
        std::vector<double> d_b(d_act);  // residual branch
        detail::ln_bwd(lc.b_post.data(), d_u2.data(), total, x, bp.ln2_g.data(), lc.ln2_mean.data(),
                       lc.ln2_rstd.data(), d_b.data(), gp.ln2_g.data(), gp.ln2_b.data());

        // b = x_in + wo*mix + cross(prompt)
        for (int s = 0; s < n_segs; ++s) {
            std::vector<double> seg_sum(static_cast<std::size_t>(x), 0.0);
            for (int tt = 0; tt < seg_tokens; ++tt) {
                const double* row = d_b.data() + (static_cast<std::size_t>(s) * seg_tokens + tt) * x;
                for (int i = 0; i < x; ++i) seg_sum[static_cast<std::size_t>(i)] += row[i];
            }
            const auto& prompt = prompts[static_cast<std::size_t>(seg_prompt[static_cast<std::size_t>(s)])];
            detail::linear_bwd(prompt.data(), seg_sum.data(), 1, cfg_.prompt_dim, x, bp.cross_w.data(), nullptr,
                               gp.cross_w.data(), gp.cross_b.data());
        }
        std::vector<double> d_mix(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_bwd(lc.mix.data(), d_b.data(), total, x, x, bp.wo.data(), d_mix.data(), gp.wo.data(),
                           gp.bo.data());

        std::vector<double> d_q(static_cast<std::size_t>(total) * x, 0.0);
        std::vector<double> d_k(static_cast<std::size_t>(total) * x, 0.0);
        std::vector<double> d_v(static_cast<std::size_t>(total) * x, 0.0);
        for (int s = 0; s < n_segs; ++s) {
            const auto& sc = lc.segs[static_cast<std::size_t>(s)];
            const int n_key_tokens = static_cast<int>(sc.src_rows.size());
            std::vector<double> dk_gather(static_cast<std::size_t>(n_key_tokens) * x, 0.0);
            std::vector<double> dv_gather(static_cast<std::size_t>(n_key_tokens) * x, 0.0);
            detail::attend_bwd(lc.q.data() + static_cast<std::size_t>(s) * seg_tokens * x, seg_tokens,
                               sc.plan.q_pos.data(), sc.k_gather.data(), n_key_tokens, sc.plan.key_pos.data(),
                               sc.v_gather.data(), h, d, rope_,
                               d_mix.data() + static_cast<std::size_t>(s) * seg_tokens * x, sc.attn,
                               d_q.data() + static_cast<std::size_t>(s) * seg_tokens * x, dk_gather.data(),
                               dv_gather.data());
            for (int kt = 0; kt < n_key_tokens; ++kt) {
                const int row = sc.src_rows[static_cast<std::size_t>(kt)];
                if (row < 0) continue;  // cached history: constant
                for (int i = 0; i < x; ++i) {
                    d_k[static_cast<std::size_t>(row) * x + i] += dk_gather[static_cast<std::size_t>(kt) * x + i];
                    d_v[static_cast<std::size_t>(row) * x + i] += dv_gather[static_cast<std::size_t>(kt) * x + i];
                }
            }
        }

        std::vector<double> d_u1(static_cast<std::size_t>(total) * x, 0.0);
        detail::linear_bwd(lc.u1.data(), d_q.data(), total, x, x, bp.wq.data(), d_u1.data(), gp.wq.data(),
                           gp.bq.data());
        detail::linear_bwd(lc.u1.data(), d_k.data(), total, x, x, bp.wk.data(), d_u1.data(), gp.wk.data(),
                           gp.bk.data());
        detail::linear_bwd(lc.u1.data(), d_v.data(), total, x, x, bp.wv.data(), d_u1.data(), gp.wv.data(),
                           gp.bv.data());
        // d(x_in) = d_b (residual through attention) + LN1 input grad
        detail::ln_bwd(lc.x_in.data(), d_u1.data(), total, x, bp.ln1_g.data(), lc.ln1_mean.data(),
                       lc.ln1_rstd.data(), d_b.data(), gp.ln1_g.data(), gp.ln1_b.data());
        d_act = std::move(d_b);
    }

    void embedding_backward(const std::vector<double>& raw, const std::vector<double>& d_x0, int total,
                            int first_noisy_row, double sigma, Params& grads, std::vector<double>* dx_tokens) const {
        const int x = cfg_.width(), ch = cfg_.channels();
        detail::linear_bwd(raw.data(), d_x0.data(), total, ch, x, params_.in_w.data(),
                           dx_tokens ? (dx_tokens->assign(raw.size(), 0.0), dx_tokens->data()) : nullptr,
                           grads.in_w.data(), grads.in_b.data());
        // timestep embedding: clean rows use sigma=0, noisy rows the shared sigma
        std::vector<double> sum0(static_cast<std::size_t>(x), 0.0), sums(static_cast<std::size_t>(x), 0.0);
        for (int g = 0; g < total; ++g) {
            auto& sum = (g >= first_noisy_row) ? sums : sum0;
            const double* row = d_x0.data() + static_cast<std::size_t>(g) * x;
            for (int i = 0; i < x; ++i) sum[static_cast<std::size_t>(i)] += row[i];
        }
        auto accumulate_time = [&](const std::vector<double>& sum, double sg) {
            auto feat = detail::time_features(sg);
            detail::linear_bwd(feat.data(), sum.data(), 1, kTimeFeatures, x, params_.time_w.data(), nullptr,
                               grads.time_w.data(), grads.time_b.data());
        };
        if (first_noisy_row > 0) accumulate_time(sum0, 0.0);
        accumulate_time(sums, sigma);
    }

    // ---- streaming internals ----

    std::vector<double> block_forward_stream(const StreamCtx& ctx, int layer, detail::LayerCache& lc,
                                             std::vector<std::vector<double>>* pending_kv) const {
        const int l = ctx.chunk_len;
        const int p = cfg_.spatial_tokens(), x = cfg_.width(), h = cfg_.heads, d = cfg_.head_dim;
        const int t = l * p;
        const auto& bp = params_.blocks[static_cast<std::size_t>(layer)];

        lc.u1.assign(static_cast<std::size_t>(t) * x, 0.0);
        lc.ln1_mean.assign(static_cast<std::size_t>(t), 0.0);
        lc.ln1_rstd.assign(static_cast<std::size_t>(t), 0.0);
        detail::ln_fwd(lc.x_in.data(), t, x, bp.ln1_g.data(), bp.ln1_b.data(), lc.u1.data(), lc.ln1_mean.data(),
                       lc.ln1_rstd.data());
        lc.q.assign(static_cast<std::size_t>(t) * x, 0.0);
        lc.k.assign(static_cast<std::size_t>(t) * x, 0.0);
        lc.v.assign(static_cast<std::size_t>(t) * x, 0.0);
        detail::linear_fwd(lc.u1.data(), t, x, x, bp.wq.data(), bp.bq.data(), lc.q.data());
        detail::linear_fwd(lc.u1.data(), t, x, x, bp.wk.data(), bp.bk.data(), lc.k.data());
        detail::linear_fwd(lc.u1.data(), t, x, x, bp.wv.data(), bp.bv.data(), lc.v.data());

        ReceptiveField field;
        if (ctx.fields_in) {
            field = (*ctx.fields_in)[static_cast<std::size_t>(layer)];
        } else if (ctx.routing) {
            auto qdesc = chunk_query_descriptor(lc.q, l, p, h, d);
            const std::vector<FrameEntry>* entries = ctx.store ? &ctx.store->layer(layer) : nullptr;
            static const std::vector<FrameEntry> kEmpty;
            field = assemble_receptive_field(ctx.chunk_index, entries ? *entries : kEmpty, ctx.window_chunks,
                                             ctx.top_k, qdesc, ctx.policy);
        } else {
            field = full_history_field(ctx.chunk_index);
        }
        if (ctx.fields_out) (*ctx.fields_out)[static_cast<std::size_t>(layer)] = field;
        check_position_span(field.k_selected(), field.window_chunk_count(), l, cfg_.rope());

        auto& sc = lc.segs.emplace_back();
        sc.plan = detail::make_seg_plan(field, l, p);
        const int n_key_tokens = static_cast<int>(sc.plan.key_frames.size()) * p;
        sc.src_rows.assign(static_cast<std::size_t>(n_key_tokens), -1);
        sc.k_gather.resize(static_cast<std::size_t>(n_key_tokens) * x);
        sc.v_gather.resize(static_cast<std::size_t>(n_key_tokens) * x);
        const std::int64_t cur_base = (ctx.chunk_index - 1) * l;
        for (std::size_t slot = 0; slot < sc.plan.key_frames.size(); ++slot) {
            const std::int64_t kf = sc.plan.key_frames[slot];
            if (static_cast<int>(slot) >= sc.plan.history_frames) {
                const int row0 = static_cast<int>(kf - cur_base) * p;
                for (int pp = 0; pp < p; ++pp) {
                    sc.src_rows[slot * p + pp] = row0 + pp;
                    std::copy(lc.k.data() + static_cast<std::size_t>(row0 + pp) * x,
                              lc.k.data() + static_cast<std::size_t>(row0 + pp + 1) * x,
                              sc.k_gather.begin() + (slot * p + pp) * x);
                    std::copy(lc.v.data() + static_cast<std::size_t>(row0 + pp) * x,
                              lc.v.data() + static_cast<std::size_t>(row0 + pp + 1) * x,
                              sc.v_gather.begin() + (slot * p + pp) * x);
                }
            } else {
                const FrameEntry& e = store_entry(*ctx.store, layer, kf);
                std::copy(e.keys.begin(), e.keys.end(), sc.k_gather.begin() + slot * p * x);
                std::copy(e.values.begin(), e.values.end(), sc.v_gather.begin() + slot * p * x);
            }
        }
        lc.mix.assign(static_cast<std::size_t>(t) * x, 0.0);
        detail::attend_fwd(lc.q.data(), t, sc.plan.q_pos.data(), sc.k_gather.data(), n_key_tokens,
                           sc.plan.key_pos.data(), sc.v_gather.data(), h, d, rope_, lc.mix.data(), &sc.attn);

        if (ctx.attended_frames)
            *ctx.attended_frames = std::max(*ctx.attended_frames,
                                            static_cast<std::int64_t>(sc.plan.key_frames.size()));
        if (ctx.max_position && !sc.plan.key_pos.empty())
            *ctx.max_position = std::max(*ctx.max_position, sc.plan.key_pos.back());

        if (pending_kv) {
            pending_kv->clear();
            for (int f = 0; f < l; ++f) {
                pending_kv->emplace_back(lc.k.begin() + static_cast<std::size_t>(f) * p * x,
                                         lc.k.begin() + static_cast<std::size_t>(f + 1) * p * x);
                pending_kv->emplace_back(lc.v.begin() + static_cast<std::size_t>(f) * p * x,
                                         lc.v.begin() + static_cast<std::size_t>(f + 1) * p * x);
            }
        }

        std::vector<int> seg_prompt{0};
        std::vector<std::vector<double>> prompts{std::vector<double>(ctx.prompt.begin(), ctx.prompt.end())};
        return finish_block(lc, prompts, seg_prompt, 1, t, bp);
    }

    static const FrameEntry& store_entry(const KVMemoryStore& store, int layer, std::int64_t frame) {
        const auto& entries = store.layer(layer);
        auto it = std::lower_bound(entries.begin(), entries.end(), frame,
                                   [](const FrameEntry& e, std::int64_t f) { return e.frame_index < f; });
        ensure(it != entries.end() && it->frame_index == frame, "kv store: frame missing (dropped by cap?)");
        return *it;
    }

    ModelConfig cfg_;
    RopeTable rope_;
    Params params_;
    std::vector<double> spatial_;
};

// Rectified flow-matching loss: mean squared error of the velocity against
// eps - x0.
inline double fm_loss(std::span<const double> pred, std::span<const double> target) {
    require(pred.size() == target.size(), "fm_loss: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
    return s / static_cast<double>(pred.size());
}

inline double fm_loss(std::span<const double> pred, std::span<const double> x0, std::span<const double> eps) {
    require(x0.size() == eps.size() && pred.size() == x0.size(), "fm_loss: shape mismatch");
    std::vector<double> target(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) target[i] = eps[i] - x0[i];
    return fm_loss(pred, target);
}

// Invert the linear path given a velocity prediction: x0 = x_t - sigma * v.
// sigma = 0 returns x_t unchanged.
inline std::vector<double> x0_from_velocity(std::span<const double> x_t, std::span<const double> v, double sigma) {
    require(x_t.size() == v.size(), "x0_from_velocity: shape mismatch");
    require(sigma >= 0.0 && sigma <= 1.0, "x0_from_velocity: sigma outside [0,1]");
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = x_t[i] - sigma * v[i];
    return out;
}

}  // namespace chunkflow

#pragma once

// The try-on denoiser: input projection, garment-token prefix on the extended
// grid, a stack of DiT blocks, and a latent output head.
//
// The head carries a fixed skip from the noisy input: the epsilon head adds
// sigma_t * z_t, the clean head adds sqrt(alpha_bar_t) * z_t. Both are the
// right answer for their target in the limit where the network knows nothing
// about the data, so the learned part only has to model the residual.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tryon/attention.hpp"
#include "tryon/conditioning.hpp"
#include "tryon/diffusion.hpp"
#include "tryon/rope.hpp"

namespace tryon {

enum class PredictionHead { epsilon, clean };

struct DenoiserConfig {
    std::size_t latent_channels = 8;
    std::size_t pose_channels = 8;
    std::size_t channels = 32;
    std::size_t heads = 2;
    std::size_t head_dim = 16;
    std::size_t blocks = 4;
    std::size_t adapter_rank = 4;
    double residual_gain = 0.5;
    double rope_base = 10000.0;
    PredictionHead head = PredictionHead::epsilon;

    // noise | agnostic | pose | mask
    std::size_t input_channels() const { return 2 * latent_channels + pose_channels + 1; }

    void validate() const {
        if (channels != heads * head_dim) {
            throw InvalidArgument("model channels (" + std::to_string(channels) + ") must equal heads*head_dim (" +
                                  std::to_string(heads * head_dim) + ")");
        }
        if (latent_channels < 1 || pose_channels < 1 || blocks < 1 || adapter_rank < 1) {
            throw InvalidArgument("model counts must be >= 1");
        }
        if (head_dim % 2 != 0 || head_dim < 6) {
            throw InvalidArgument("model head_dim must be even and >= 6 for the rotary embedding");
        }
    }
};

// Sinusoidal embedding of an integer timestep: [sin(t f_i) | cos(t f_i)].
template <class T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t channels) {
    if (channels % 2 != 0) {
        throw InvalidArgument("timestep embedding needs an even channel count");
    }
    const std::size_t half = channels / 2;
    Tensor<T> e({channels});
    for (std::size_t i = 0; i < half; ++i) {
        const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
        e[i] = static_cast<T>(std::sin(static_cast<double>(t) * f));
        e[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * f));
    }
    return e;
}

// Per-sample inputs: the assembled channel stack plus the frozen garment
// features the Patchfiers consume.
template <class T>
struct DenoiserInputs {
    Tensor<T> x;               // [F, h, w, C_in]
    Tensor<T> garment_latent;  // [h, w, C_lat]
    Tensor<T> line_latent;     // [h, w, C_lat]
    Tensor<T> txt_tokens;      // [N_txt, C]
    Tensor<T> clip_tokens;     // [N_clip, C]
};

template <class T>
struct Denoiser {
    DenoiserConfig cfg;
    Tensor<T> w_in, b_in;      // [C_in, C], [C]
    Tensor<T> w_time, b_time;  // [C, C], [C]
    PatchfierParams<T> patch_garment, patch_line;
    std::vector<DiTBlockParams<T>> blocks;
    LayerNormParams<T> norm_out;
    Tensor<T> w_out, b_out;  // [C, C_lat], [C_lat]

    static Denoiser init(const DenoiserConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        Denoiser m;
        m.cfg = cfg;
        const std::size_t c = cfg.channels;
        m.w_in = init_matrix<T>(rng, cfg.input_channels(), c);
        m.b_in = Tensor<T>({c});
        m.w_time = init_matrix<T>(rng, c, c);
        m.b_time = Tensor<T>({c});
        m.patch_garment = PatchfierParams<T>::init(rng, cfg.latent_channels, c);
        m.patch_line = PatchfierParams<T>::init(rng, cfg.latent_channels, c);
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            m.blocks.push_back(
                DiTBlockParams<T>::init(rng, c, cfg.heads, cfg.head_dim, cfg.adapter_rank, cfg.residual_gain));
        }
        m.norm_out = LayerNormParams<T>::init(c);
        m.w_out = init_matrix<T>(rng, c, cfg.latent_channels, 0.1);
        m.b_out = Tensor<T>({cfg.latent_channels});
        return m;
    }

    Denoiser zeros_like() const {
        Denoiser z;
        z.cfg = cfg;
        z.w_in = Tensor<T>(w_in.shape());
        z.b_in = Tensor<T>(b_in.shape());
        z.w_time = Tensor<T>(w_time.shape());
        z.b_time = Tensor<T>(b_time.shape());
        z.patch_garment = patch_garment.zeros_like();
        z.patch_line = patch_line.zeros_like();
        for (const auto& b : blocks) {
            z.blocks.push_back(b.zeros_like());
        }
        z.norm_out = norm_out.zeros_like();
        z.w_out = Tensor<T>(w_out.shape());
        z.b_out = Tensor<T>(b_out.shape());
        return z;
    }

    NamedParams<T> named_params() {
        NamedParams<T> out;
        out.emplace_back("w_in", &w_in);
        out.emplace_back("b_in", &b_in);
        out.emplace_back("w_time", &w_time);
        out.emplace_back("b_time", &b_time);
        patch_garment.collect(out, "patch_garment.");
        patch_line.collect(out, "patch_line.");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].collect(out, "block" + std::to_string(i) + ".");
        }
        norm_out.collect(out, "norm_out.");
        out.emplace_back("w_out", &w_out);
        out.emplace_back("b_out", &b_out);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [name, t] : const_cast<Denoiser*>(this)->named_params()) {
            n += t->size();
        }
        return n;
    }

    template <class U>
    Denoiser<U> cast() const {
        Denoiser<U> m = Denoiser<U>::init(cfg, 0);
        auto dst = m.named_params();
        auto src = const_cast<Denoiser*>(this)->named_params();
        for (std::size_t i = 0; i < src.size(); ++i) {
            *dst[i].second = src[i].second->template cast<U>();
        }
        return m;
    }
};

// FNV-1a over the raw parameter bytes, in named_params order.
template <class T>
std::uint64_t parameter_checksum(const Denoiser<T>& m) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : const_cast<Denoiser<T>&>(m).named_params()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t->data().data());
        for (std::size_t i = 0; i < t->size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

template <class T>
struct DenoiserCache {
    Tensor<T> in_rows;
    PatchfierCache<T> patch_g, patch_l;
    Tensor<T> garment_tokens, line_tokens;
    Tensor<T> t_sin;
    std::vector<Tensor<T>> block_inputs;
    std::vector<DiTBlockCache<T>> blocks;
    LayerNormCache<T> ln_out;
    Tensor<T> normed;
};

inline double head_skip(PredictionHead head, std::size_t t, const NoiseSchedule& s) {
    return head == PredictionHead::epsilon ? s.noise(t) : s.signal(t);
}

// Returns the prediction [F, h, w, C_lat] (noise or clean latent per head).
template <class T>
Tensor<T> denoiser_forward(const Denoiser<T>& m, const DenoiserInputs<T>& in, std::size_t t, const NoiseSchedule& s,
                           DenoiserCache<T>* cache = nullptr) {
    const auto& cfg = m.cfg;
    if (in.x.rank() != 4 || in.x.dim(3) != cfg.input_channels()) {
        throw InvalidArgument("denoiser input must be [F, h, w, " + std::to_string(cfg.input_channels()) + "], got " +
                              shape_str(in.x.shape()));
    }
    if (t >= s.steps) {
        throw InvalidArgument("denoiser: timestep out of range");
    }
    const std::size_t f = in.x.dim(0), h = in.x.dim(1), w = in.x.dim(2), plane = h * w;
    if (in.garment_latent.rank() != 3 || in.garment_latent.dim(0) != h || in.garment_latent.dim(1) != w) {
        throw InvalidArgument("garment latent must match the video latent grid");
    }
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(f, h, w));
    const RopeFrequencies freqs = build_rope_frequencies(cfg.head_dim, cfg.rope_base);

    Tensor<T> rows = in.x.reshaped({f * plane, cfg.input_channels()});
    Tensor<T> tokens = matmul(rows, m.w_in);
    add_row_bias(tokens, m.b_in);

    PatchfierCache<T> pg, pl;
    Tensor<T> g_tok = patchify(in.garment_latent, m.patch_garment, cache ? &pg : nullptr);
    Tensor<T> l_tok = patchify(in.line_latent, m.patch_line, cache ? &pl : nullptr);
    Tensor<T> seq = prepend_garment_token(tokens, g_tok, plane);

    const Tensor<T> t_sin = timestep_embedding<T>(t, cfg.channels);
    Tensor<T> t_emb = matmul(t_sin.reshaped({1, cfg.channels}), m.w_time).reshaped({cfg.channels});
    t_emb += m.b_time;

    const BlockCondition<T> cond{in.txt_tokens, in.clip_tokens, l_tok, g_tok};
    if (cache) {
        cache->blocks.assign(m.blocks.size(), {});
        cache->block_inputs.clear();
    }
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        if (cache) {
            cache->block_inputs.push_back(seq);
        }
        seq = dit_block(seq, cond, grid, freqs, m.blocks[b], t_emb, cache ? &cache->blocks[b] : nullptr);
    }

    const Tensor<T> frames = slice_rows(seq, plane, seq.rows());
    Tensor<T> normed = layer_norm(frames, m.norm_out.gain, m.norm_out.bias, 1e-5, cache ? &cache->ln_out : nullptr);
    Tensor<T> out = matmul(normed, m.w_out);
    add_row_bias(out, m.b_out);

    const double skip = head_skip(cfg.head, t, s);
    const std::size_t cl = cfg.latent_channels, cin = cfg.input_channels();
    for (std::size_t i = 0; i < f * plane; ++i) {
        for (std::size_t c = 0; c < cl; ++c) {
            out.at(i, c) = static_cast<T>(out.at(i, c) + skip * rows[i * cin + c]);
        }
    }
    if (cache) {
        cache->in_rows = std::move(rows);
        cache->patch_g = std::move(pg);
        cache->patch_l = std::move(pl);
        cache->garment_tokens = std::move(g_tok);
        cache->line_tokens = std::move(l_tok);
        cache->t_sin = t_sin;
        cache->normed = std::move(normed);
    }
    if (!out.all_finite()) {
        throw NumericFailure("denoiser produced a non-finite output");
    }
    return out.reshaped({f, h, w, cl});
}

// Accumulates parameter gradients of <dout, prediction> into `grads`.
template <class T>
void denoiser_backward(const Denoiser<T>& m, const DenoiserInputs<T>& in, const Tensor<T>& dout,
                       const DenoiserCache<T>& c, Denoiser<T>& grads) {
    const auto& cfg = m.cfg;
    const std::size_t f = in.x.dim(0), h = in.x.dim(1), w = in.x.dim(2), plane = h * w;
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(f, h, w));
    const RopeFrequencies freqs = build_rope_frequencies(cfg.head_dim, cfg.rope_base);
    const Tensor<T> d = dout.reshaped({f * plane, cfg.latent_channels});

    grads.b_out += sum_rows(d);
    grads.w_out += matmul_tn(c.normed, d);
    const Tensor<T> dframes =
        layer_norm_backward(matmul_nt(d, m.w_out), m.norm_out.gain, c.ln_out, grads.norm_out.gain, grads.norm_out.bias);
    Tensor<T> dseq = concat_rows(Tensor<T>({plane, cfg.channels}), dframes);

    const BlockCondition<T> cond{in.txt_tokens, in.clip_tokens, c.line_tokens, c.garment_tokens};
    Tensor<T> dt_emb({cfg.channels});
    Tensor<T> dgarment({plane, cfg.channels});
    Tensor<T> dline({plane, cfg.channels});
    for (std::size_t b = m.blocks.size(); b-- > 0;) {
        auto g = dit_block_backward(dseq, cond, grid, freqs, m.blocks[b], c.blocks[b], grads.blocks[b]);
        dseq = std::move(g.dseq);
        dt_emb += g.dt_embed;
        if (!g.dgarment.empty()) {
            dgarment += g.dgarment;
        }
        if (!g.dline.empty()) {
            dline += g.dline;
        }
    }
    // The garment prefix of the sequence is the same token stream FGCA reads.
    dgarment += slice_rows(dseq, 0, plane);
    patchify_backward(dgarment, m.patch_garment, c.patch_g, grads.patch_garment);
    patchify_backward(dline, m.patch_line, c.patch_l, grads.patch_line);

    const Tensor<T> dtokens = slice_rows(dseq, plane, dseq.rows());
    grads.b_in += sum_rows(dtokens);
    grads.w_in += matmul_tn(c.in_rows, dtokens);

    grads.b_time += dt_emb;
    grads.w_time += matmul_tn(c.t_sin.reshaped({1, cfg.channels}), dt_emb.reshaped({1, cfg.channels}));
}

// Adds every gradient tensor of `src` into `dst`.
template <class T>
void accumulate(Denoiser<T>& dst, const Denoiser<T>& src) {
    auto a = dst.named_params();
    auto b = const_cast<Denoiser<T>&>(src).named_params();
    for (std::size_t i = 0; i < a.size(); ++i) {
        *a[i].second += *b[i].second;
    }
}

template <class T>
void scale_grads(Denoiser<T>& g, double factor) {
    for (auto& [name, t] : g.named_params()) {
        *t *= static_cast<T>(factor);
    }
}

}  // namespace tryon

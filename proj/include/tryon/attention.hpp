#pragma once

// Attention kernels and the DiT block.
//
//   full self-attention : rotary Q/K over the (garment-extended) grid
//   SGCA                : Attn(Q, K_clip, V_clip) + Attn(Q, K_txt, V_txt)
//   FGCA                : Attn(Q, [K_g; K_l], [V_g; V_l]) with a low-rank
//                         residual adapter on the concatenated keys/values
//
// Every forward takes an optional cache; the matching backward consumes it,
// accumulates parameter gradients and returns input gradients.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tryon/rng.hpp"
#include "tryon/rope.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.
//
// q: [Lq, H*d], k: [Lk, H*d], v: [Lk, H*dv]. Heads are contiguous column
// blocks. probs (optional out) receives softmax weights as [H, Lq, Lk].

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               Tensor<T>* probs = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw InvalidArgument("attention operands must be rank 2");
    }
    if (q.cols() != k.cols() || q.cols() % heads != 0 || v.cols() % heads != 0) {
        throw InvalidArgument("attention inner dims: Q " + shape_str(q.shape()) + " K " + shape_str(k.shape()));
    }
    if (k.rows() != v.rows()) {
        throw InvalidArgument("attention: K and V have different lengths");
    }
    const std::size_t lq = q.rows(), lk = k.rows();
    const std::size_t d = q.cols() / heads, dv = v.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor<T> out({lq, heads * dv});
    if (probs) {
        *probs = Tensor<T>({heads, lq, lk});
    }
    std::vector<double> kh(lk * d), vh(lk * dv), logits(lk), acc(dv);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < lk; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                kh[j * d + c] = k.at(j, h * d + c);
            }
            for (std::size_t c = 0; c < dv; ++c) {
                vh[j * dv + c] = v.at(j, h * dv + c);
            }
        }
        for (std::size_t i = 0; i < lq; ++i) {
            const T* qi = q.data().data() + i * q.cols() + h * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < lk; ++j) {
                const double* kj = kh.data() + j * d;
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    s += static_cast<double>(qi[c]) * kj[c];
                }
                logits[j] = s * scale;
                mx = std::max(mx, logits[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
                logits[j] = std::exp(logits[j] - mx);
                z += logits[j];
            }
            const double inv = 1.0 / z;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < lk; ++j) {
                const double p = logits[j] * inv;
                logits[j] = p;
                const double* vj = vh.data() + j * dv;
                for (std::size_t c = 0; c < dv; ++c) {
                    acc[c] += p * vj[c];
                }
            }
            T* orow = out.data().data() + i * out.cols() + h * dv;
            for (std::size_t c = 0; c < dv; ++c) {
                orow[c] = static_cast<T>(acc[c]);
            }
            if (probs) {
                T* pr = probs->data().data() + (h * lq + i) * lk;
                for (std::size_t j = 0; j < lk; ++j) {
                    pr[j] = static_cast<T>(logits[j]);
                }
            }
        }
    }
    return out;
}

template <class T>
struct AttentionGrads {
    Tensor<T> dq, dk, dv;
};

template <class T>
AttentionGrads<T> multi_head_attention_backward(const Tensor<T>& dout, const Tensor<T>& q, const Tensor<T>& k,
                                                const Tensor<T>& v, const Tensor<T>& probs, std::size_t heads) {
    const std::size_t lq = q.rows(), lk = k.rows();
    const std::size_t d = q.cols() / heads, dv = v.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionGrads<T> g{Tensor<T>(q.shape()), Tensor<T>(k.shape()), Tensor<T>(v.shape())};
    std::vector<double> kh(lk * d), vh(lk * dv), dkh(lk * d), dvh(lk * dv), dp(lk), dqi(d);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < lk; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                kh[j * d + c] = k.at(j, h * d + c);
            }
            for (std::size_t c = 0; c < dv; ++c) {
                vh[j * dv + c] = v.at(j, h * dv + c);
            }
        }
        std::fill(dkh.begin(), dkh.end(), 0.0);
        std::fill(dvh.begin(), dvh.end(), 0.0);
        for (std::size_t i = 0; i < lq; ++i) {
            const T* doi = dout.data().data() + i * dout.cols() + h * dv;
            const T* qi = q.data().data() + i * q.cols() + h * d;
            const T* pr = probs.data().data() + (h * lq + i) * lk;
            double pdp = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
                const double* vj = vh.data() + j * dv;
                double s = 0.0;
                for (std::size_t c = 0; c < dv; ++c) {
                    s += static_cast<double>(doi[c]) * vj[c];
                }
                dp[j] = s;
                pdp += static_cast<double>(pr[j]) * s;
                double* dvj = dvh.data() + j * dv;
                const double p = pr[j];
                for (std::size_t c = 0; c < dv; ++c) {
                    dvj[c] += p * static_cast<double>(doi[c]);
                }
            }
            std::fill(dqi.begin(), dqi.end(), 0.0);
            for (std::size_t j = 0; j < lk; ++j) {
                const double ds = static_cast<double>(pr[j]) * (dp[j] - pdp) * scale;
                if (ds == 0.0) {
                    continue;
                }
                const double* kj = kh.data() + j * d;
                double* dkj = dkh.data() + j * d;
                for (std::size_t c = 0; c < d; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * static_cast<double>(qi[c]);
                }
            }
            T* dq = g.dq.data().data() + i * q.cols() + h * d;
            for (std::size_t c = 0; c < d; ++c) {
                dq[c] = static_cast<T>(dqi[c]);
            }
        }
        for (std::size_t j = 0; j < lk; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                g.dk.at(j, h * d + c) = static_cast<T>(dkh[j * d + c]);
            }
            for (std::size_t c = 0; c < dv; ++c) {
                g.dv.at(j, h * dv + c) = static_cast<T>(dvh[j * dv + c]);
            }
        }
    }
    return g;
}

// Single-head form of Eq. softmax(Q K^T / sqrt(d)) V.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    return multi_head_attention(q, k, v, 1);
}

// ---------------------------------------------------------------------------
// Parameters.

template <class T>
inline Tensor<T> init_matrix(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0) {
    return rng.normal_tensor<T>({in, out}, gain / std::sqrt(static_cast<double>(in)));
}

template <class T>
struct AttentionWeights {
    Tensor<T> w_q, w_k, w_v, w_o;  // [C, H*d] each; w_o is [H*d, C]
    std::size_t heads = 1;
    std::size_t head_dim = 1;

    static AttentionWeights init(Rng& rng, std::size_t channels, std::size_t heads, std::size_t head_dim,
                                 double out_gain = 1.0) {
        const std::size_t inner = heads * head_dim;
        return {init_matrix<T>(rng, channels, inner), init_matrix<T>(rng, channels, inner),
                init_matrix<T>(rng, channels, inner), init_matrix<T>(rng, inner, channels, out_gain), heads,
                head_dim};
    }

    AttentionWeights zeros_like() const {
        return {Tensor<T>(w_q.shape()), Tensor<T>(w_k.shape()), Tensor<T>(w_v.shape()), Tensor<T>(w_o.shape()),
                heads, head_dim};
    }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "w_q", &w_q);
        out.emplace_back(prefix + "w_k", &w_k);
        out.emplace_back(prefix + "w_v", &w_v);
        out.emplace_back(prefix + "w_o", &w_o);
    }
};

// Shared query projection plus key/value projections for the four garment
// streams. No output projection: the attention outputs are the block update.
template <class T>
struct CrossAttentionWeights {
    Tensor<T> w_q;
    Tensor<T> k_clip, v_clip, k_txt, v_txt;          // SGCA streams
    Tensor<T> k_garment, v_garment, k_line, v_line;  // FGCA streams
    std::size_t heads = 1;
    std::size_t head_dim = 1;

    static CrossAttentionWeights init(Rng& rng, std::size_t channels, std::size_t heads, std::size_t head_dim,
                                      double value_gain = 1.0) {
        const std::size_t inner = heads * head_dim;
        CrossAttentionWeights w;
        w.heads = heads;
        w.head_dim = head_dim;
        w.w_q = init_matrix<T>(rng, channels, inner);
        w.k_clip = init_matrix<T>(rng, channels, inner);
        w.v_clip = init_matrix<T>(rng, channels, inner, value_gain);
        w.k_txt = init_matrix<T>(rng, channels, inner);
        w.v_txt = init_matrix<T>(rng, channels, inner, value_gain);
        w.k_garment = init_matrix<T>(rng, channels, inner);
        w.v_garment = init_matrix<T>(rng, channels, inner, value_gain);
        w.k_line = init_matrix<T>(rng, channels, inner);
        w.v_line = init_matrix<T>(rng, channels, inner, value_gain);
        return w;
    }

    CrossAttentionWeights zeros_like() const {
        CrossAttentionWeights z = *this;
        for (auto& [name, t] : z.named()) {
            t->fill(T(0));
        }
        return z;
    }

    NamedParams<T> named() {
        NamedParams<T> out;
        collect(out, "");
        return out;
    }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "w_q", &w_q);
        out.emplace_back(prefix + "k_clip", &k_clip);
        out.emplace_back(prefix + "v_clip", &v_clip);
        out.emplace_back(prefix + "k_txt", &k_txt);
        out.emplace_back(prefix + "v_txt", &v_txt);
        out.emplace_back(prefix + "k_garment", &k_garment);
        out.emplace_back(prefix + "v_garment", &v_garment);
        out.emplace_back(prefix + "k_line", &k_line);
        out.emplace_back(prefix + "v_line", &v_line);
    }
};

// Low-rank residual transform x + (x D) U; U starts at zero.
template <class T>
struct Adapter {
    Tensor<T> down;  // [C, r]
    Tensor<T> up;    // [r, C]

    static Adapter init(Rng& rng, std::size_t channels, std::size_t rank) {
        if (rank < 1) {
            throw InvalidArgument("adapter rank must be >= 1");
        }
        return {init_matrix<T>(rng, channels, rank), Tensor<T>({rank, channels})};
    }

    Adapter zeros_like() const { return {Tensor<T>(down.shape()), Tensor<T>(up.shape())}; }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "down", &down);
        out.emplace_back(prefix + "up", &up);
    }
};

template <class T>
struct LayerNormParams {
    Tensor<T> gain, bias;

    static LayerNormParams init(std::size_t channels) { return {Tensor<T>({channels}, T(1)), Tensor<T>({channels})}; }
    LayerNormParams zeros_like() const { return {Tensor<T>(gain.shape()), Tensor<T>(bias.shape())}; }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "gain", &gain);
        out.emplace_back(prefix + "bias", &bias);
    }
};

template <class T>
struct FeedForwardParams {
    Tensor<T> w1, b1, w2, b2;  // [C,4C], [4C], [4C,C], [C]

    static FeedForwardParams init(Rng& rng, std::size_t channels, double out_gain = 1.0) {
        const std::size_t hidden = 4 * channels;
        return {init_matrix<T>(rng, channels, hidden), Tensor<T>({hidden}), init_matrix<T>(rng, hidden, channels, out_gain),
                Tensor<T>({channels})};
    }

    FeedForwardParams zeros_like() const {
        return {Tensor<T>(w1.shape()), Tensor<T>(b1.shape()), Tensor<T>(w2.shape()), Tensor<T>(b2.shape())};
    }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "w1", &w1);
        out.emplace_back(prefix + "b1", &b1);
        out.emplace_back(prefix + "w2", &w2);
        out.emplace_back(prefix + "b2", &b2);
    }
};

template <class T>
struct DiTBlockParams {
    LayerNormParams<T> norm1, norm2, norm3;
    AttentionWeights<T> self_attn;
    CrossAttentionWeights<T> cross;
    Adapter<T> adapter;
    FeedForwardParams<T> ffn;

    static DiTBlockParams init(Rng& rng, std::size_t channels, std::size_t heads, std::size_t head_dim,
                               std::size_t adapter_rank, double residual_gain) {
        if (channels != heads * head_dim) {
            throw InvalidArgument("block channels must equal heads * head_dim");
        }
        DiTBlockParams p;
        p.norm1 = LayerNormParams<T>::init(channels);
        p.norm2 = LayerNormParams<T>::init(channels);
        p.norm3 = LayerNormParams<T>::init(channels);
        p.self_attn = AttentionWeights<T>::init(rng, channels, heads, head_dim, residual_gain);
        p.cross = CrossAttentionWeights<T>::init(rng, channels, heads, head_dim, residual_gain);
        p.adapter = Adapter<T>::init(rng, channels, adapter_rank);
        p.ffn = FeedForwardParams<T>::init(rng, channels, residual_gain);
        return p;
    }

    DiTBlockParams zeros_like() const {
        return {norm1.zeros_like(), norm2.zeros_like(), norm3.zeros_like(), self_attn.zeros_like(),
                cross.zeros_like(),  adapter.zeros_like(), ffn.zeros_like()};
    }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        norm1.collect(out, prefix + "norm1.");
        norm2.collect(out, prefix + "norm2.");
        norm3.collect(out, prefix + "norm3.");
        self_attn.collect(out, prefix + "self_attn.");
        cross.collect(out, prefix + "cross.");
        adapter.collect(out, prefix + "adapter.");
        ffn.collect(out, prefix + "ffn.");
    }
};

// ---------------------------------------------------------------------------
// Full self-attention with rotary Q/K.

template <class T>
struct SelfAttentionCache {
    Tensor<T> input, q, k, v, probs, mixed;
};

template <class T>
Tensor<T> full_self_attention(const Tensor<T>& seq, const PositionGrid& grid, const RopeFrequencies& freqs,
                              const AttentionWeights<T>& w, SelfAttentionCache<T>* cache = nullptr) {
    if (seq.rank() != 2 || seq.rows() != grid.seq_len()) {
        throw InvalidArgument("self-attention: sequence length " + std::to_string(seq.rows()) +
                              " does not match grid length " + std::to_string(grid.seq_len()));
    }
    if (w.head_dim != freqs.head_dim()) {
        throw InvalidArgument("self-attention: head_dim does not match rope frequencies");
    }
    const RopeTable table(grid, freqs);
    Tensor<T> q = matmul(seq, w.w_q);
    Tensor<T> k = matmul(seq, w.w_k);
    Tensor<T> v = matmul(seq, w.w_v);
    rotate_rows(q, w.heads, table);
    rotate_rows(k, w.heads, table);
    Tensor<T> probs;
    Tensor<T> mixed = multi_head_attention(q, k, v, w.heads, cache ? &probs : nullptr);
    Tensor<T> out = matmul(mixed, w.w_o);
    if (cache) {
        *cache = {seq, std::move(q), std::move(k), std::move(v), std::move(probs), std::move(mixed)};
    }
    return out;
}

template <class T>
Tensor<T> full_self_attention_backward(const Tensor<T>& dout, const PositionGrid& grid, const RopeFrequencies& freqs,
                                       const AttentionWeights<T>& w, const SelfAttentionCache<T>& c,
                                       AttentionWeights<T>& grads) {
    grads.w_o += matmul_tn(c.mixed, dout);
    const Tensor<T> dmixed = matmul_nt(dout, w.w_o);
    auto g = multi_head_attention_backward(dmixed, c.q, c.k, c.v, c.probs, w.heads);
    const RopeTable table(grid, freqs);
    rotate_rows(g.dq, w.heads, table, -1.0);
    rotate_rows(g.dk, w.heads, table, -1.0);
    grads.w_q += matmul_tn(c.input, g.dq);
    grads.w_k += matmul_tn(c.input, g.dk);
    grads.w_v += matmul_tn(c.input, g.dv);
    Tensor<T> dseq = matmul_nt(g.dq, w.w_q);
    dseq += matmul_nt(g.dk, w.w_k);
    dseq += matmul_nt(g.dv, w.w_v);
    return dseq;
}

// ---------------------------------------------------------------------------
// Cross-attention branches.

template <class T>
struct SgcaCache {
    Tensor<T> k_clip, v_clip, probs_clip;
    Tensor<T> k_txt, v_txt, probs_txt;
};

// O_s given already-projected queries. Empty streams contribute zero.
template <class T>
Tensor<T> sgca_from_queries(const Tensor<T>& q, const Tensor<T>& clip_tokens, const Tensor<T>& txt_tokens,
                            const CrossAttentionWeights<T>& w, SgcaCache<T>* cache = nullptr) {
    if (clip_tokens.empty() && txt_tokens.empty()) {
        throw InvalidArgument("sgca: clip and text streams are both empty");
    }
    Tensor<T> out(q.shape());
    if (!clip_tokens.empty()) {
        Tensor<T> kc = matmul(clip_tokens, w.k_clip), vc = matmul(clip_tokens, w.v_clip), pc;
        out += multi_head_attention(q, kc, vc, w.heads, cache ? &pc : nullptr);
        if (cache) {
            cache->k_clip = std::move(kc);
            cache->v_clip = std::move(vc);
            cache->probs_clip = std::move(pc);
        }
    }
    if (!txt_tokens.empty()) {
        Tensor<T> kt = matmul(txt_tokens, w.k_txt), vt = matmul(txt_tokens, w.v_txt), pt;
        out += multi_head_attention(q, kt, vt, w.heads, cache ? &pt : nullptr);
        if (cache) {
            cache->k_txt = std::move(kt);
            cache->v_txt = std::move(vt);
            cache->probs_txt = std::move(pt);
        }
    }
    return out;
}

template <class T>
Tensor<T> sgca(const Tensor<T>& seq, const Tensor<T>& clip_tokens, const Tensor<T>& txt_tokens,
               const CrossAttentionWeights<T>& w) {
    return sgca_from_queries(matmul(seq, w.w_q), clip_tokens, txt_tokens, w);
}

// Returns dq; accumulates key/value projection gradients.
template <class T>
Tensor<T> sgca_backward(const Tensor<T>& dout, const Tensor<T>& q, const Tensor<T>& clip_tokens,
                        const Tensor<T>& txt_tokens, const CrossAttentionWeights<T>& w, const SgcaCache<T>& c,
                        CrossAttentionWeights<T>& grads) {
    Tensor<T> dq(q.shape());
    if (!clip_tokens.empty()) {
        auto g = multi_head_attention_backward(dout, q, c.k_clip, c.v_clip, c.probs_clip, w.heads);
        dq += g.dq;
        grads.k_clip += matmul_tn(clip_tokens, g.dk);
        grads.v_clip += matmul_tn(clip_tokens, g.dv);
    }
    if (!txt_tokens.empty()) {
        auto g = multi_head_attention_backward(dout, q, c.k_txt, c.v_txt, c.probs_txt, w.heads);
        dq += g.dq;
        grads.k_txt += matmul_tn(txt_tokens, g.dk);
        grads.v_txt += matmul_tn(txt_tokens, g.dv);
    }
    return dq;
}

template <class T>
struct FgcaCache {
    Tensor<T> k_cat, v_cat;      // stacked [garment; line] projections
    Tensor<T> k_low, v_low;      // (k_cat D), (v_cat D)
    Tensor<T> k_adapted, v_adapted;
    Tensor<T> probs;
};

template <class T>
Tensor<T> stack_streams(const Tensor<T>& garment_tokens, const Tensor<T>& line_tokens, const Tensor<T>& wg,
                        const Tensor<T>& wl) {
    if (garment_tokens.empty()) {
        return matmul(line_tokens, wl);
    }
    if (line_tokens.empty()) {
        return matmul(garment_tokens, wg);
    }
    return concat_rows(matmul(garment_tokens, wg), matmul(line_tokens, wl));
}

// O_t given already-projected queries: one softmax over the concatenated
// garment and line keys.
template <class T>
Tensor<T> fgca_from_queries(const Tensor<T>& q, const Tensor<T>& garment_tokens, const Tensor<T>& line_tokens,
                            const CrossAttentionWeights<T>& w, const Adapter<T>& adapter,
                            FgcaCache<T>* cache = nullptr) {
    if (garment_tokens.empty() && line_tokens.empty()) {
        throw InvalidArgument("fgca: garment and line streams are both empty");
    }
    if (!garment_tokens.empty() && !line_tokens.empty() && garment_tokens.cols() != line_tokens.cols()) {
        throw InvalidArgument("fgca: garment and line tokens must share a channel dim");
    }
    Tensor<T> kc = stack_streams(garment_tokens, line_tokens, w.k_garment, w.k_line);
    Tensor<T> vc = stack_streams(garment_tokens, line_tokens, w.v_garment, w.v_line);
    Tensor<T> kl = matmul(kc, adapter.down), vl = matmul(vc, adapter.down);
    Tensor<T> ka = kc + matmul(kl, adapter.up);
    Tensor<T> va = vc + matmul(vl, adapter.up);
    Tensor<T> probs;
    Tensor<T> out = multi_head_attention(q, ka, va, w.heads, cache ? &probs : nullptr);
    if (cache) {
        *cache = {std::move(kc), std::move(vc), std::move(kl), std::move(vl), std::move(ka), std::move(va),
                  std::move(probs)};
    }
    return out;
}

template <class T>
Tensor<T> fgca(const Tensor<T>& seq, const Tensor<T>& garment_tokens, const Tensor<T>& line_tokens,
               const CrossAttentionWeights<T>& w, const Adapter<T>& adapter) {
    return fgca_from_queries(matmul(seq, w.w_q), garment_tokens, line_tokens, w, adapter);
}

template <class T>
struct FgcaInputGrads {
    Tensor<T> dq, dgarment, dline;
};

template <class T>
FgcaInputGrads<T> fgca_backward(const Tensor<T>& dout, const Tensor<T>& q, const Tensor<T>& garment_tokens,
                                const Tensor<T>& line_tokens, const CrossAttentionWeights<T>& w,
                                const Adapter<T>& adapter, const FgcaCache<T>& c, CrossAttentionWeights<T>& grads,
                                Adapter<T>& adapter_grads) {
    auto g = multi_head_attention_backward(dout, q, c.k_adapted, c.v_adapted, c.probs, w.heads);
    // x_a = x + (x D) U
    adapter_grads.up += matmul_tn(c.k_low, g.dk);
    adapter_grads.up += matmul_tn(c.v_low, g.dv);
    const Tensor<T> dkl = matmul_nt(g.dk, adapter.up);
    const Tensor<T> dvl = matmul_nt(g.dv, adapter.up);
    adapter_grads.down += matmul_tn(c.k_cat, dkl);
    adapter_grads.down += matmul_tn(c.v_cat, dvl);
    Tensor<T> dkc = g.dk + matmul_nt(dkl, adapter.down);
    Tensor<T> dvc = g.dv + matmul_nt(dvl, adapter.down);

    FgcaInputGrads<T> out{std::move(g.dq), {}, {}};
    const std::size_t ng = garment_tokens.empty() ? 0 : garment_tokens.rows();
    const std::size_t total = dkc.rows();
    if (ng > 0) {
        const auto dk = slice_rows(dkc, 0, ng), dv = slice_rows(dvc, 0, ng);
        grads.k_garment += matmul_tn(garment_tokens, dk);
        grads.v_garment += matmul_tn(garment_tokens, dv);
        out.dgarment = matmul_nt(dk, w.k_garment);
        out.dgarment += matmul_nt(dv, w.v_garment);
    }
    if (ng < total) {
        const auto dk = slice_rows(dkc, ng, total), dv = slice_rows(dvc, ng, total);
        grads.k_line += matmul_tn(line_tokens, dk);
        grads.v_line += matmul_tn(line_tokens, dv);
        out.dline = matmul_nt(dk, w.k_line);
        out.dline += matmul_nt(dv, w.v_line);
    }
    return out;
}

// ---------------------------------------------------------------------------
// DiT block.

// Token streams as the block consumes them.
template <class T>
struct BlockCondition {
    const Tensor<T>& txt;
    const Tensor<T>& clip;
    const Tensor<T>& line;
    const Tensor<T>& garment;
};

template <class T>
struct DiTBlockCache {
    LayerNormCache<T> ln1, ln2, ln3;
    SelfAttentionCache<T> self_attn;
    Tensor<T> n2, q_cross;
    SgcaCache<T> sgca;
    FgcaCache<T> fgca;
    Tensor<T> ffn_in, ffn_pre, ffn_hidden;
};

template <class T>
Tensor<T> dit_block(const Tensor<T>& seq, const BlockCondition<T>& cond, const PositionGrid& grid,
                    const RopeFrequencies& freqs, const DiTBlockParams<T>& p, const Tensor<T>& t_embed,
                    DiTBlockCache<T>* cache = nullptr) {
    constexpr double kEps = 1e-5;
    Tensor<T> a = seq;
    add_row_bias(a, t_embed);
    Tensor<T> n1 = layer_norm(a, p.norm1.gain, p.norm1.bias, kEps, cache ? &cache->ln1 : nullptr);
    Tensor<T> x1 = seq + full_self_attention(n1, grid, freqs, p.self_attn, cache ? &cache->self_attn : nullptr);

    Tensor<T> n2 = layer_norm(x1, p.norm2.gain, p.norm2.bias, kEps, cache ? &cache->ln2 : nullptr);
    Tensor<T> q = matmul(n2, p.cross.w_q);
    Tensor<T> x2 = x1;
    x2 += sgca_from_queries(q, cond.clip, cond.txt, p.cross, cache ? &cache->sgca : nullptr);
    x2 += fgca_from_queries(q, cond.garment, cond.line, p.cross, p.adapter, cache ? &cache->fgca : nullptr);

    Tensor<T> n3 = layer_norm(x2, p.norm3.gain, p.norm3.bias, kEps, cache ? &cache->ln3 : nullptr);
    Tensor<T> pre = matmul(n3, p.ffn.w1);
    add_row_bias(pre, p.ffn.b1);
    Tensor<T> hidden = gelu(pre);
    Tensor<T> ff = matmul(hidden, p.ffn.w2);
    add_row_bias(ff, p.ffn.b2);
    Tensor<T> out = x2 + ff;
    if (cache) {
        cache->n2 = std::move(n2);
        cache->q_cross = std::move(q);
        cache->ffn_in = std::move(n3);
        cache->ffn_pre = std::move(pre);
        cache->ffn_hidden = std::move(hidden);
    }
    return out;
}

template <class T>
struct DiTBlockInputGrads {
    Tensor<T> dseq, dt_embed, dgarment, dline;
};

template <class T>
DiTBlockInputGrads<T> dit_block_backward(const Tensor<T>& dout, const BlockCondition<T>& cond,
                                         const PositionGrid& grid, const RopeFrequencies& freqs,
                                         const DiTBlockParams<T>& p, const DiTBlockCache<T>& c,
                                         DiTBlockParams<T>& grads) {
    // out = x2 + ffn(norm3(x2))
    grads.ffn.b2 += sum_rows(dout);
    grads.ffn.w2 += matmul_tn(c.ffn_hidden, dout);
    Tensor<T> dpre = gelu_backward(matmul_nt(dout, p.ffn.w2), c.ffn_pre);
    grads.ffn.b1 += sum_rows(dpre);
    grads.ffn.w1 += matmul_tn(c.ffn_in, dpre);
    Tensor<T> dx2 = dout;
    dx2 += layer_norm_backward(matmul_nt(dpre, p.ffn.w1), p.norm3.gain, c.ln3, grads.norm3.gain, grads.norm3.bias);

    // x2 = x1 + sgca(n2) + fgca(n2)
    Tensor<T> dq = sgca_backward(dx2, c.q_cross, cond.clip, cond.txt, p.cross, c.sgca, grads.cross);
    auto fg = fgca_backward(dx2, c.q_cross, cond.garment, cond.line, p.cross, p.adapter, c.fgca, grads.cross,
                            grads.adapter);
    dq += fg.dq;
    grads.cross.w_q += matmul_tn(c.n2, dq);
    Tensor<T> dx1 = dx2;
    dx1 += layer_norm_backward(matmul_nt(dq, p.cross.w_q), p.norm2.gain, c.ln2, grads.norm2.gain, grads.norm2.bias);

    // x1 = seq + attn(norm1(seq + t))
    Tensor<T> dn1 = full_self_attention_backward(dx1, grid, freqs, p.self_attn, c.self_attn, grads.self_attn);
    Tensor<T> da = layer_norm_backward(dn1, p.norm1.gain, c.ln1, grads.norm1.gain, grads.norm1.bias);
    Tensor<T> dt = sum_rows(da);
    Tensor<T> dseq = dx1;
    dseq += da;
    return {std::move(dseq), std::move(dt), std::move(fg.dgarment), std::move(fg.dline)};
}

}  // namespace tryon

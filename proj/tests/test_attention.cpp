#include <gtest/gtest.h>

#include <cmath>

#include "tryon/attention.hpp"

using namespace tryon;

namespace {

// Direct single-head evaluation with two loops.
Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v) {
    const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols(), dv = v.cols();
    Tensor<double> out({lq, dv});
    for (std::size_t i = 0; i < lq; ++i) {
        std::vector<double> w(lk);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                s += q.at(i, c) * k.at(j, c);
            }
            w[j] = s / std::sqrt(double(d));
            mx = std::max(mx, w[j]);
        }
        for (auto& x : w) {
            x = std::exp(x - mx);
            z += x;
        }
        for (std::size_t j = 0; j < lk; ++j) {
            for (std::size_t c = 0; c < dv; ++c) {
                out.at(i, c) += w[j] / z * v.at(j, c);
            }
        }
    }
    return out;
}

struct Streams {
    Tensor<double> txt, clip, line, garment;
};

Streams random_streams(Rng& rng, std::size_t c, std::size_t plane) {
    return {rng.normal_tensor<double>({3, c}), rng.normal_tensor<double>({4, c}),
            rng.normal_tensor<double>({plane, c}), rng.normal_tensor<double>({plane, c})};
}

}  // namespace

TEST(ScaledDotAttention, SingleKeyReturnsItsValue) {
    Rng rng(1);
    const auto q = rng.normal_tensor<double>({5, 4});
    const auto k = rng.normal_tensor<double>({1, 4});
    const auto v = rng.normal_tensor<double>({1, 3});
    const auto o = scaled_dot_attention(q, k, v);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_DOUBLE_EQ(o.at(i, c), v.at(0, c));
        }
    }
}

TEST(ScaledDotAttention, ZeroQueryAveragesValues) {
    Rng rng(2);
    const Tensor<double> q({2, 4});
    const auto k = rng.normal_tensor<double>({6, 4});
    const auto v = rng.normal_tensor<double>({6, 3});
    const auto o = scaled_dot_attention(q, k, v);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            m += v.at(j, c) / 6.0;
        }
        EXPECT_NEAR(o.at(0, c), m, 1e-12);
        EXPECT_NEAR(o.at(1, c), m, 1e-12);
    }
}

TEST(ScaledDotAttention, MatchesNaiveLoopAndIsConvex) {
    Rng rng(3);
    const auto q = rng.normal_tensor<double>({3, 4});
    const auto k = rng.normal_tensor<double>({5, 4});
    const auto v = rng.normal_tensor<double>({5, 4});
    const auto o = scaled_dot_attention(q, k, v);
    EXPECT_LE(max_abs_diff(o, naive_attention(q, k, v)), 1e-6);
    for (std::size_t c = 0; c < 4; ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t j = 0; j < 5; ++j) {
            lo = std::min(lo, v.at(j, c));
            hi = std::max(hi, v.at(j, c));
        }
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_GE(o.at(i, c), lo - 1e-6);
            EXPECT_LE(o.at(i, c), hi + 1e-6);
        }
    }
    EXPECT_THROW(scaled_dot_attention(q, rng.normal_tensor<double>({5, 3}), v), InvalidArgument);
}

TEST(MultiHeadAttention, BackwardMatchesFiniteDifferences) {
    Rng rng(4);
    const auto q = rng.normal_tensor<double>({3, 6});
    const auto k = rng.normal_tensor<double>({4, 6});
    const auto v = rng.normal_tensor<double>({4, 4});
    const auto w = rng.normal_tensor<double>({3, 4});
    auto loss = [&](const Tensor<double>& qq, const Tensor<double>& kk, const Tensor<double>& vv) {
        const auto o = multi_head_attention(qq, kk, vv, 2);
        double s = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) {
            s += o[i] * w[i];
        }
        return s;
    };
    Tensor<double> probs;
    multi_head_attention(q, k, v, 2, &probs);
    const auto g = multi_head_attention_backward(w, q, k, v, probs, 2);
    EXPECT_LE(compare_gradients(g.dq, finite_diff_gradient([&](const auto& x) { return loss(x, k, v); }, q, 1e-5))
                  .max_rel_error,
              1e-3);
    EXPECT_LE(compare_gradients(g.dk, finite_diff_gradient([&](const auto& x) { return loss(q, x, v); }, k, 1e-5))
                  .max_rel_error,
              1e-3);
    EXPECT_LE(compare_gradients(g.dv, finite_diff_gradient([&](const auto& x) { return loss(q, k, x); }, v, 1e-5))
                  .max_rel_error,
              1e-3);
}

TEST(FullSelfAttention, TrivialGridReducesToPlainAttention) {
    Rng rng(5);
    const std::size_t c = 6;
    AttentionWeights<double> w;
    w.heads = 1;
    w.head_dim = c;
    Tensor<double> eye({c, c});
    for (std::size_t i = 0; i < c; ++i) {
        eye.at(i, i) = 1.0;
    }
    w.w_q = w.w_k = w.w_v = w.w_o = eye;
    const auto seq = rng.normal_tensor<double>({1, c});
    const auto out = full_self_attention(seq, PositionGrid(1, 1, 1), build_rope_frequencies(c), w);
    EXPECT_LE(max_abs_diff(out, scaled_dot_attention(seq, seq, seq)), 1e-12);
}

TEST(FullSelfAttention, ShapeAndMismatch) {
    Rng rng(6);
    const auto w = AttentionWeights<float>::init(rng, 32, 2, 16);
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(2, 2, 2));
    EXPECT_EQ(grid.seq_len(), 12u);
    const auto seq = rng.normal_tensor({grid.seq_len(), 32});
    const auto out = full_self_attention(seq, grid, build_rope_frequencies(16), w);
    EXPECT_EQ(out.shape(), (Shape{12, 32}));
    EXPECT_THROW(full_self_attention(seq, PositionGrid(2, 2, 2), build_rope_frequencies(16), w), InvalidArgument);
    const PositionGrid wide = extend_grid_for_garment(PositionGrid(2, 2, 4));
    EXPECT_EQ(full_self_attention(rng.normal_tensor({24, 32}), wide, build_rope_frequencies(16), w).shape(),
              (Shape{24, 32}));
}

TEST(FullSelfAttention, MirrorEquivariance) {
    // Swapping two frames mirrors time, which is the same as negating the
    // temporal frequencies with the original order.
    Rng rng(7);
    const auto w = AttentionWeights<double>::init(rng, 12, 2, 6);
    const auto freqs = build_rope_frequencies(6);
    const PositionGrid grid(2, 1, 1);
    const auto seq = rng.normal_tensor<double>({2, 12});
    Tensor<double> swapped({2, 12});
    for (std::size_t c = 0; c < 12; ++c) {
        swapped.at(0, c) = seq.at(1, c);
        swapped.at(1, c) = seq.at(0, c);
    }
    RopeFrequencies mirrored = freqs;
    for (auto& o : mirrored.omega_t) {
        o = -o;
    }
    const auto a = full_self_attention(seq, grid, freqs, w);
    const auto b = full_self_attention(swapped, grid, freqs, w);
    const auto a_ref = full_self_attention(seq, grid, mirrored, w);
    for (std::size_t c = 0; c < 12; ++c) {
        EXPECT_NEAR(b.at(0, c), a_ref.at(1, c), 1e-9);
        EXPECT_NEAR(b.at(1, c), a_ref.at(0, c), 1e-9);
    }
    EXPECT_GT(max_abs_diff(a, a_ref), 1e-6);
}

TEST(Sgca, EqualsSumOfIndependentAttentions) {
    Rng rng(8);
    const auto w = CrossAttentionWeights<double>::init(rng, 8, 2, 4);
    const auto seq = rng.normal_tensor<double>({5, 8});
    const auto clip = rng.normal_tensor<double>({4, 8});
    const auto txt = rng.normal_tensor<double>({3, 8});
    const auto q = matmul(seq, w.w_q);
    const auto expect = multi_head_attention(q, matmul(clip, w.k_clip), matmul(clip, w.v_clip), 2) +
                        multi_head_attention(q, matmul(txt, w.k_txt), matmul(txt, w.v_txt), 2);
    EXPECT_LE(max_abs_diff(sgca(seq, clip, txt, w), expect), 1e-12);
}

TEST(Sgca, ZeroTextValuesLeaveClipTerm) {
    Rng rng(9);
    auto w = CrossAttentionWeights<double>::init(rng, 8, 2, 4);
    w.v_txt.fill(0.0);
    const auto seq = rng.normal_tensor<double>({5, 8});
    const auto clip = rng.normal_tensor<double>({4, 8});
    const auto txt = rng.normal_tensor<double>({3, 8});
    const auto q = matmul(seq, w.w_q);
    EXPECT_LE(max_abs_diff(sgca(seq, clip, txt, w),
                           multi_head_attention(q, matmul(clip, w.k_clip), matmul(clip, w.v_clip), 2)),
              1e-12);
}

TEST(Sgca, ZeroQueryGivesValueMeans) {
    Rng rng(10);
    auto w = CrossAttentionWeights<double>::init(rng, 8, 1, 8);
    w.w_q.fill(0.0);
    const auto seq = rng.normal_tensor<double>({2, 8});
    const auto clip = rng.normal_tensor<double>({4, 8});
    const auto txt = rng.normal_tensor<double>({3, 8});
    const auto vc = matmul(clip, w.v_clip), vt = matmul(txt, w.v_txt);
    const auto o = sgca(seq, clip, txt, w);
    for (std::size_t c = 0; c < 8; ++c) {
        double m = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            m += vc.at(j, c) / 4.0;
        }
        for (std::size_t j = 0; j < 3; ++j) {
            m += vt.at(j, c) / 3.0;
        }
        EXPECT_NEAR(o.at(0, c), m, 1e-12);
    }
}

TEST(Sgca, EmptyStreams) {
    Rng rng(11);
    const auto w = CrossAttentionWeights<double>::init(rng, 8, 2, 4);
    const auto seq = rng.normal_tensor<double>({5, 8});
    const auto clip = rng.normal_tensor<double>({4, 8});
    EXPECT_THROW(sgca(seq, Tensor<double>(), Tensor<double>(), w), InvalidArgument);
    const auto q = matmul(seq, w.w_q);
    EXPECT_LE(max_abs_diff(sgca(seq, clip, Tensor<double>(), w),
                           multi_head_attention(q, matmul(clip, w.k_clip), matmul(clip, w.v_clip), 2)),
              1e-12);
}

TEST(Fgca, IdenticalKeysAndValuesReturnSharedValue) {
    Rng rng(12);
    auto w = CrossAttentionWeights<double>::init(rng, 4, 1, 4);
    w.k_line = w.k_garment;
    w.v_line = w.v_garment;
    const auto a = Adapter<double>::init(rng, 4, 2);
    const auto seq = rng.normal_tensor<double>({3, 4});
    const auto g = rng.normal_tensor<double>({1, 4});
    const auto o = fgca(seq, g, g, w, a);
    const auto v = matmul(g, w.v_garment);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_NEAR(o.at(i, c), v.at(0, c), 1e-12);
        }
    }
}

TEST(Fgca, ZeroInitAdapterIsBitIdenticalToAdapterFree) {
    Rng rng(13);
    const auto w = CrossAttentionWeights<float>::init(rng, 8, 2, 4);
    const auto a = Adapter<float>::init(rng, 8, 4);
    const auto seq = rng.normal_tensor({5, 8});
    const auto g = rng.normal_tensor({4, 8});
    const auto l = rng.normal_tensor({4, 8});
    const auto q = matmul(seq, w.w_q);
    const auto free = multi_head_attention(q, concat_rows(matmul(g, w.k_garment), matmul(l, w.k_line)),
                                           concat_rows(matmul(g, w.v_garment), matmul(l, w.v_line)), 2);
    EXPECT_EQ(fgca(seq, g, l, w, a), free);
}

TEST(Fgca, JointSoftmaxWeightsSumToOne) {
    Rng rng(14);
    const auto w = CrossAttentionWeights<double>::init(rng, 8, 2, 4);
    const auto a = Adapter<double>::init(rng, 8, 4);
    FgcaCache<double> cache;
    fgca_from_queries(rng.normal_tensor<double>({5, 8}), rng.normal_tensor<double>({3, 8}),
                      rng.normal_tensor<double>({2, 8}), w, a, &cache);
    ASSERT_EQ(cache.probs.shape(), (Shape{2, 5, 5}));
    for (std::size_t r = 0; r < 10; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            s += cache.probs[r * 5 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Fgca, JointSoftmaxDiffersFromPerStreamSum) {
    Rng rng(15);
    double best = 0.0;
    for (int trial = 0; trial < 20 && best <= 0.1; ++trial) {
        const auto w = CrossAttentionWeights<double>::init(rng, 4, 1, 4);
        const auto a = Adapter<double>::init(rng, 4, 1);
        const auto seq = rng.normal_tensor<double>({2, 4});
        const auto g = rng.normal_tensor<double>({2, 4}), l = rng.normal_tensor<double>({2, 4});
        const auto q = matmul(seq, w.w_q);
        const auto split = multi_head_attention(q, matmul(g, w.k_garment), matmul(g, w.v_garment), 1) +
                           multi_head_attention(q, matmul(l, w.k_line), matmul(l, w.v_line), 1);
        best = std::max(best, max_abs_diff(fgca(seq, g, l, w, a), split));
    }
    EXPECT_GT(best, 0.1);
}

TEST(Fgca, BothStreamsEmptyThrows) {
    Rng rng(16);
    const auto w = CrossAttentionWeights<double>::init(rng, 4, 1, 4);
    const auto a = Adapter<double>::init(rng, 4, 1);
    EXPECT_THROW(fgca(rng.normal_tensor<double>({2, 4}), Tensor<double>(), Tensor<double>(), w, a), InvalidArgument);
}

TEST(Adapter, RejectsZeroRankAndStartsNeutral) {
    Rng rng(17);
    EXPECT_THROW(Adapter<float>::init(rng, 8, 0), InvalidArgument);
    const auto a = Adapter<float>::init(rng, 8, 4);
    for (float v : a.up.data()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(DiTBlock, ZeroWeightsKeepResidual) {
    Rng rng(18);
    auto p = DiTBlockParams<double>::init(rng, 12, 2, 6, 2, 1.0);
    auto z = p.zeros_like();
    z.norm1 = p.norm1;
    z.norm2 = p.norm2;
    z.norm3 = p.norm3;
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(1, 2, 2));
    const auto seq = rng.normal_tensor<double>({grid.seq_len(), 12});
    const auto s = random_streams(rng, 12, 4);
    const BlockCondition<double> cond{s.txt, s.clip, s.line, s.garment};
    const auto out = dit_block(seq, cond, grid, build_rope_frequencies(6), z, rng.normal_tensor<double>({12}));
    EXPECT_EQ(out, seq);
}

TEST(DiTBlock, ZeroGarmentStreamsContributeNothing) {
    Rng rng(19);
    const auto p = DiTBlockParams<float>::init(rng, 32, 2, 16, 4, 1.0);
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(2, 2, 4));
    const auto seq = rng.normal_tensor({grid.seq_len(), 32});
    const Tensor<float> zeros({8, 32});
    const auto q = matmul(seq, p.cross.w_q);
    const auto o = fgca_from_queries(q, zeros, zeros, p.cross, p.adapter);
    for (float v : o.data()) {
        EXPECT_EQ(v, 0.0f);
    }
    const auto txt = rng.normal_tensor({3, 32}), clip = rng.normal_tensor({4, 32});
    const BlockCondition<float> cond{txt, clip, zeros, zeros};
    const auto out = dit_block(seq, cond, grid, build_rope_frequencies(16), p, Tensor<float>({32}));
    EXPECT_EQ(out.shape(), (Shape{24, 32}));
}

TEST(DiTBlock, BackwardMatchesFiniteDifferences) {
    Rng rng(20);
    const std::size_t c = 12;
    auto p = DiTBlockParams<double>::init(rng, c, 2, 6, 2, 1.0);
    // Nonzero adapter so its gradient path is exercised.
    p.adapter.up = rng.normal_tensor<double>({2, c}, 0.3);
    const PositionGrid grid = extend_grid_for_garment(PositionGrid(2, 1, 2));
    const auto freqs = build_rope_frequencies(6);
    const auto seq = rng.normal_tensor<double>({grid.seq_len(), c});
    const auto temb = rng.normal_tensor<double>({c});
    const auto s = random_streams(rng, c, 2);
    const auto wout = rng.normal_tensor<double>({grid.seq_len(), c});
    auto loss_of = [&](const DiTBlockParams<double>& pp, const Tensor<double>& sq, const Tensor<double>& te,
                       const Tensor<double>& gar, const Tensor<double>& lin) {
        const BlockCondition<double> cond{s.txt, s.clip, lin, gar};
        const auto o = dit_block(sq, cond, grid, freqs, pp, te);
        double acc = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) {
            acc += o[i] * wout[i];
        }
        return acc;
    };
    DiTBlockCache<double> cache;
    const BlockCondition<double> cond{s.txt, s.clip, s.line, s.garment};
    dit_block(seq, cond, grid, freqs, p, temb, &cache);
    auto grads = p.zeros_like();
    const auto in = dit_block_backward(wout, cond, grid, freqs, p, cache, grads);

    auto check = [](const Tensor<double>& a, const Tensor<double>& n, const std::string& what) {
        const auto rep = compare_gradients(a, n, 1e-6);
        EXPECT_LE(rep.max_rel_error, 1e-3) << what << " worst " << rep.worst_index << " a=" << rep.analytic
                                           << " n=" << rep.numeric;
    };
    check(in.dseq, finite_diff_gradient([&](const auto& x) { return loss_of(p, x, temb, s.garment, s.line); }, seq, 1e-5),
          "dseq");
    check(in.dt_embed,
          finite_diff_gradient([&](const auto& x) { return loss_of(p, seq, x, s.garment, s.line); }, temb, 1e-5), "dt");
    check(in.dgarment,
          finite_diff_gradient([&](const auto& x) { return loss_of(p, seq, temb, x, s.line); }, s.garment, 1e-5),
          "dgarment");
    check(in.dline,
          finite_diff_gradient([&](const auto& x) { return loss_of(p, seq, temb, s.garment, x); }, s.line, 1e-5),
          "dline");

    NamedParams<double> named, gnamed;
    p.collect(named, "");
    grads.collect(gnamed, "");
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor<double>* target = named[i].second;
        const Tensor<double> orig = *target;
        const auto num = finite_diff_gradient(
            [&](const Tensor<double>& x) {
                *target = x;
                const double v = loss_of(p, seq, temb, s.garment, s.line);
                *target = orig;
                return v;
            },
            orig, 1e-5);
        check(*gnamed[i].second, num, named[i].first);
    }
}

#include <gtest/gtest.h>

#include "tryon/model.hpp"
#include "tryon/optim.hpp"

using namespace tryon;

namespace {

DenoiserConfig tiny_config(PredictionHead head = PredictionHead::epsilon) {
    DenoiserConfig c;
    c.latent_channels = 3;
    c.pose_channels = 3;
    c.channels = 12;
    c.heads = 2;
    c.head_dim = 6;
    c.blocks = 1;
    c.adapter_rank = 2;
    c.head = head;
    return c;
}

DenoiserInputs<double> tiny_inputs(Rng& rng, const DenoiserConfig& c, std::size_t f = 2, std::size_t h = 2,
                                   std::size_t w = 2) {
    DenoiserInputs<double> in;
    in.x = rng.normal_tensor<double>({f, h, w, c.input_channels()});
    in.garment_latent = rng.normal_tensor<double>({h, w, c.latent_channels});
    in.line_latent = rng.normal_tensor<double>({h, w, c.latent_channels});
    in.txt_tokens = rng.normal_tensor<double>({3, c.channels});
    in.clip_tokens = rng.normal_tensor<double>({4, c.channels});
    return in;
}

// Make every parameter nonzero so each gradient path is exercised.
void perturb(Denoiser<double>& m, Rng& rng) {
    for (auto& [name, t] : m.named_params()) {
        for (auto& v : t->data()) {
            v += 0.2 * rng.normal();
        }
    }
}

}  // namespace

TEST(Denoiser, ShapesAndConfigValidation) {
    DenoiserConfig c;
    c.blocks = 1;
    auto m = Denoiser<float>::init(c, 1);
    Rng rng(2);
    DenoiserInputs<float> in;
    in.x = rng.normal_tensor({2, 4, 4, c.input_channels()});
    in.garment_latent = rng.normal_tensor({4, 4, 8});
    in.line_latent = rng.normal_tensor({4, 4, 8});
    in.txt_tokens = rng.normal_tensor({5, 32});
    in.clip_tokens = rng.normal_tensor({4, 32});
    const auto s = make_schedule(1000);
    EXPECT_EQ(denoiser_forward(m, in, 10, s).shape(), (Shape{2, 4, 4, 8}));
    EXPECT_EQ(c.input_channels(), 25u);
    c.channels = 30;
    EXPECT_THROW(Denoiser<float>::init(c, 1), InvalidArgument);
}

TEST(Denoiser, FreshModelIgnoresGarmentTokensExactly) {
    // Zero-projected Patchfiers give all-zero garment and line streams, so
    // changing the garment image cannot change the output.
    DenoiserConfig c = tiny_config();
    auto m = Denoiser<float>::init(c, 3);
    Rng rng(4);
    auto in = tiny_inputs(rng, c);
    DenoiserInputs<float> a{in.x.cast<float>(), in.garment_latent.cast<float>(), in.line_latent.cast<float>(),
                            in.txt_tokens.cast<float>(), in.clip_tokens.cast<float>()};
    DenoiserInputs<float> b = a;
    b.garment_latent = rng.normal_tensor({2, 2, 3});
    b.line_latent = rng.normal_tensor({2, 2, 3});
    const auto s = make_schedule(1000);
    EXPECT_EQ(denoiser_forward(m, a, 100, s), denoiser_forward(m, b, 100, s));
}

TEST(Denoiser, HeadSkipCoefficients) {
    const auto s = make_schedule(1000);
    EXPECT_DOUBLE_EQ(head_skip(PredictionHead::epsilon, 999, s), s.noise(999));
    EXPECT_DOUBLE_EQ(head_skip(PredictionHead::clean, 0, s), s.signal(0));
}

TEST(Denoiser, GradientMatchesFiniteDifferencesThroughMaskedLoss) {
    for (auto head : {PredictionHead::epsilon, PredictionHead::clean}) {
        const auto c = tiny_config(head);
        auto m = Denoiser<double>::init(c, 5);
        Rng rng(6);
        perturb(m, rng);
        const auto in = tiny_inputs(rng, c);
        const auto s = make_schedule(1000);
        const std::size_t t = 400;
        const auto eps = rng.normal_tensor<double>({2, 2, 2, c.latent_channels});
        Tensor<double> mask({2, 2, 2, 1});
        for (std::size_t i = 0; i < mask.size(); i += 2) {
            mask[i] = 1.0;
        }
        DenoiserCache<double> cache;
        const auto pred = denoiser_forward(m, in, t, s, &cache);
        auto grads = m.zeros_like();
        denoiser_backward(m, in, masked_diffusion_loss_grad(pred, eps, mask), cache, grads);

        auto params = m.named_params();
        auto gparams = grads.named_params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<double>* target = params[i].second;
            const Tensor<double> orig = *target;
            const auto num = finite_diff_gradient(
                [&](const Tensor<double>& x) {
                    *target = x;
                    const double v = masked_diffusion_loss(denoiser_forward(m, in, t, s), eps, mask).total;
                    *target = orig;
                    return v;
                },
                orig, 1e-5);
            const auto rep = compare_gradients(*gparams[i].second, num, 1e-7);
            EXPECT_LE(rep.max_rel_error, 1e-3) << params[i].first << " idx " << rep.worst_index
                                               << " analytic " << rep.analytic << " numeric " << rep.numeric;
        }
    }
}

TEST(Denoiser, CastRoundTripAndChecksum) {
    const auto m = Denoiser<float>::init(tiny_config(), 7);
    const auto d = m.cast<double>();
    const auto back = d.cast<float>();
    EXPECT_EQ(parameter_checksum(m), parameter_checksum(back));
    auto other = Denoiser<float>::init(tiny_config(), 8);
    EXPECT_NE(parameter_checksum(m), parameter_checksum(other));
}

TEST(AdamW, MinimizesQuadratic) {
    Tensor<double> x({3}, {2.0, -1.0, 0.5});
    Tensor<double> g({3});
    AdamW<double> opt({.lr = 0.05, .grad_clip = 0.0});
    for (int i = 0; i < 500; ++i) {
        for (std::size_t k = 0; k < 3; ++k) {
            g[k] = 2.0 * x[k];
        }
        opt.step({{"x", &x}}, {{"x", &g}});
    }
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(x[k], 0.0, 1e-2);
    }
    EXPECT_EQ(opt.steps(), 500u);
}

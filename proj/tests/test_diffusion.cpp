#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "tryon/diffusion.hpp"
#include "tryon/gaussian_toy.hpp"

using namespace tryon;

TEST(Schedule, CosineValuesAndInvariants) {
    const auto s = make_schedule(1000);
    const double c0 = std::cos(0.008 / 1.008 * std::numbers::pi / 2.0);
    EXPECT_NEAR(s.alpha_bar[0], c0 * c0, 1e-15);
    EXPECT_NEAR(s.alpha_bar[0], 0.99985, 1e-5);
    for (std::size_t t = 0; t < 1000; ++t) {
        EXPECT_NEAR(s.alpha_bar[t] + s.sigma[t] * s.sigma[t], 1.0, 1e-6);
        EXPECT_GT(s.alpha_bar[t], 0.0);
        EXPECT_LE(s.alpha_bar[t], 1.0);
        if (t + 1 < 1000) {
            EXPECT_GT(s.alpha_bar[t], s.alpha_bar[t + 1]) << "t=" << t;
        }
    }
    EXPECT_THROW(make_schedule(1), InvalidArgument);
}

TEST(AddNoise, Basics) {
    const auto s = make_schedule(1000);
    Rng rng(1);
    const auto z0 = rng.normal_tensor({64});
    const Tensor<float> zero({64});
    const auto zt = add_noise(z0, 500, zero, s);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_NEAR(zt[i], std::sqrt(s.alpha_bar[500]) * z0[i], 1e-6);
    }
    const auto early = add_noise(z0, 0, rng.normal_tensor({64}), s);
    EXPECT_LE(max_abs_diff(early, z0), 0.06);
    EXPECT_THROW(add_noise(z0, 1000, zero, s), InvalidArgument);
    EXPECT_THROW(add_noise(z0, 1, Tensor<float>({63}), s), InvalidArgument);
}

TEST(AddNoise, PreservesUnitVarianceInExpectation) {
    const auto s = make_schedule(1000);
    Rng rng(2);
    const auto z0 = rng.normal_tensor<double>({10000});
    const auto eps = rng.normal_tensor<double>({10000});
    for (std::size_t t : {0u, 250u, 700u, 999u}) {
        const auto zt = add_noise(z0, t, eps, s);
        double m2 = 0.0;
        for (double v : zt.data()) {
            m2 += v * v;
        }
        EXPECT_NEAR(m2 / 10000.0, 1.0, 0.05);
    }
}

TEST(MaskToLatent, MaxPool) {
    const auto vae = ToyVaeParams::make();
    const auto ones = mask_to_latent(Tensor<float>({1, 8, 8, 1}, 1.0f), vae);
    EXPECT_EQ(ones.m.shape(), (Shape{1, 2, 2, 1}));
    for (float v : ones.m.data()) {
        EXPECT_EQ(v, 1.0f);
    }
    Tensor<float> single({1, 8, 8, 1});
    single[5 * 8 + 2] = 1.0f;
    const auto one = mask_to_latent(single, vae);
    EXPECT_EQ(sum(one.m), 1.0);
    EXPECT_EQ(one.m[1 * 2 + 0], 1.0f);
    Tensor<float> checker({2, 16, 16, 1});
    for (std::size_t i = 0; i < checker.size(); ++i) {
        const std::size_t y = (i / 16) % 16, x = i % 16;
        checker[i] = static_cast<float>((x + y) % 2);
    }
    const auto c = mask_to_latent(checker, vae);
    for (float v : c.m.data()) {
        EXPECT_EQ(v, 1.0f);
    }
    Tensor<float> bad({1, 4, 4, 1}, 0.5f);
    EXPECT_THROW(mask_to_latent(bad, vae), InvalidArgument);
}

TEST(AssembleInput, LayoutAndSlicing) {
    Rng rng(3);
    const auto noisy = rng.normal_tensor({2, 4, 4, 8});
    const auto agn = rng.normal_tensor({2, 4, 4, 8});
    const auto pose = rng.normal_tensor({2, 4, 4, 8});
    MaskLatent m{Tensor<float>({2, 4, 4, 1}, 1.0f)};
    const auto in = assemble_input(noisy, agn, pose, m);
    EXPECT_EQ(in.x.shape(), (Shape{2, 4, 4, 25}));
    EXPECT_EQ(channel_slice(in.x, 0, 8), noisy);
    EXPECT_EQ(channel_slice(in.x, 8, 16), agn);
    EXPECT_EQ(channel_slice(in.x, 16, 24), pose);
    EXPECT_EQ(channel_slice(in.x, 24, 25), m.m);
    EXPECT_THROW(assemble_input(noisy, rng.normal_tensor({2, 4, 2, 8}), pose, m), InvalidArgument);
}

TEST(MaskedLoss, Algebra) {
    Rng rng(4);
    const auto pred = rng.normal_tensor<double>({2, 2, 2, 4});
    const auto eps = rng.normal_tensor<double>({2, 2, 2, 4});
    EXPECT_EQ(masked_diffusion_loss(pred, pred, Tensor<double>({2, 2, 2, 1}, 1.0)).total, 0.0);
    const auto full = masked_diffusion_loss(pred, eps, Tensor<double>({2, 2, 2, 1}, 1.0));
    EXPECT_EQ(full.total, 2.0 * full.unmasked_term);
    Tensor<double> half({2, 2, 2, 1});
    for (std::size_t i = 0; i < 4; ++i) {
        half[i] = 1.0;
    }
    Tensor<double> shifted = eps;
    for (auto& v : shifted.data()) {
        v += 1.0;
    }
    EXPECT_DOUBLE_EQ(masked_diffusion_loss(shifted, eps, half).total, 1.5);
    EXPECT_THROW(masked_diffusion_loss(pred, Tensor<double>({2, 2, 2, 3}), half), InvalidArgument);
    EXPECT_THROW(masked_diffusion_loss(pred, eps, Tensor<double>({2, 2, 1, 1})), InvalidArgument);
}

TEST(MaskedLoss, DecompositionIsExact) {
    Rng rng(5);
    const auto pred = rng.normal_tensor<double>({2, 3, 3, 4});
    const auto eps = rng.normal_tensor<double>({2, 3, 3, 4});
    Tensor<double> m({2, 3, 3, 1});
    for (auto& v : m.data()) {
        v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    Tensor<double> mp = pred, me = eps;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp[i] *= m[i / 4];
        me[i] *= m[i / 4];
    }
    auto mse = [](const Tensor<double>& a, const Tensor<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        return s / double(a.size());
    };
    const auto l = masked_diffusion_loss(pred, eps, m);
    EXPECT_DOUBLE_EQ(l.total, mse(pred, eps) + mse(mp, me));
}

TEST(MaskedLoss, GradientClosedFormAndFiniteDifferences) {
    Rng rng(6);
    const auto pred = rng.normal_tensor<double>({2, 2, 2, 2});
    const auto eps = rng.normal_tensor<double>({2, 2, 2, 2});
    Tensor<double> m({2, 2, 2, 1});
    for (std::size_t i = 0; i < m.size(); i += 2) {
        m[i] = 1.0;
    }
    const auto g = masked_diffusion_loss_grad(pred, eps, m);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_NEAR(g[i], 2.0 / 16.0 * (pred[i] - eps[i]) * (1.0 + m[i / 2]), 1e-15);
    }
    const auto num =
        finite_diff_gradient([&](const Tensor<double>& p) { return masked_diffusion_loss(p, eps, m).total; }, pred, 1e-5);
    EXPECT_LE(compare_gradients(g, num).max_rel_error, 1e-3);
}

TEST(SubSchedule, EvenlySpacedWithEndpoints) {
    const auto ts = sub_schedule(1000, 20);
    EXPECT_EQ(ts.size(), kTeacherSteps);
    EXPECT_EQ(ts.front(), 0u);
    EXPECT_EQ(ts.back(), 999u);
    for (std::size_t i = 1; i < ts.size(); ++i) {
        EXPECT_GT(ts[i], ts[i - 1]);
    }
    EXPECT_EQ(sub_schedule(1000, 1000).back(), 999u);
    EXPECT_EQ(sub_schedule(10, 10)[3], 3u);
    EXPECT_THROW(sub_schedule(10, 0), InvalidArgument);
    EXPECT_THROW(sub_schedule(10, 11), InvalidArgument);
}

TEST(Ddim, SameSeedBitIdenticalAndCountsCalls) {
    const auto s = make_schedule(1000);
    std::size_t calls = 0;
    auto model = [&](const Tensor<float>& x, std::size_t t) {
        ++calls;
        Tensor<float> e = x;
        e *= static_cast<float>(0.9 * s.noise(t));
        return e;
    };
    const auto a = ddim_sample<float>(model, {3, 4}, 20, 11, s);
    EXPECT_EQ(calls, 20u);
    const auto b = ddim_sample<float>(model, {3, 4}, 20, 11, s);
    EXPECT_EQ(a, b);
    const auto c = ddim_sample<float>(model, {3, 4}, 20, 12, s);
    EXPECT_FALSE(a == c);
}

TEST(Ddim, NonFiniteReportsStep) {
    const auto s = make_schedule(100);
    auto model = [&](const Tensor<float>& x, std::size_t t) {
        Tensor<float> e(x.shape());
        if (t < 50) {
            e.fill(std::numeric_limits<float>::quiet_NaN());
        }
        return e;
    };
    try {
        ddim_sample<float>(model, {2}, 10, 1, s);
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        EXPECT_GE(e.step, 1);
    }
}

TEST(Ddim, LinearGaussianOracleAndMonotoneConvergence) {
    // Data N(mu, s^2) in 1-D; the exact epsilon is affine in x_t.
    const toy::Gaussian g{0.7, 0.4};
    const auto sch = make_schedule(toy::kOracleSteps);
    Rng rng(7);
    const auto xT = rng.normal_tensor<double>({64});
    auto eps_model = [&](const Tensor<double>& x, std::size_t t) { return g.exact_eps(x, t, sch); };
    const auto exact = toy::sampler_target(g, xT, sch.steps - 1, sch);
    std::vector<double> errs;
    for (std::size_t n : {5u, 10u, 20u, 50u, static_cast<unsigned>(toy::kOracleSteps)}) {
        const auto out = ddim_sample_from<double>(eps_model, xT, n, sch);
        errs.push_back(max_abs_diff(out, exact));
    }
    for (std::size_t i = 1; i < errs.size(); ++i) {
        EXPECT_LT(errs[i], errs[i - 1]);
    }
    EXPECT_LE(errs.back(), 1e-3);
}

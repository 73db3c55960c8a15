#include <gtest/gtest.h>

#include <json.hpp>

#include "tryon/metrics.hpp"

using namespace tryon;

namespace {

GeneratorConfig small_config() {
    GeneratorConfig c;
    c.frames = 4;
    c.height = 32;
    c.width = 32;
    return c;
}

}  // namespace

TEST(Ssim, IdentityConstantsAndSymmetry) {
    Rng rng(1);
    Tensor<float> a({16, 16, 3});
    for (auto& v : a.data()) {
        v = static_cast<float>(rng.uniform());
    }
    EXPECT_EQ(ssim(a, a), 1.0);
    const Tensor<float> zero({16, 16, 3}, 0.0f), one({16, 16, 3}, 1.0f);
    EXPECT_LT(ssim(zero, one), 0.01);
    EXPECT_NEAR(ssim(zero, one), kSsimC1 / (1.0 + kSsimC1), 1e-12);
    Tensor<float> b = a;
    for (auto& v : b.data()) {
        v = std::clamp(v + static_cast<float>(0.1 * rng.normal()), 0.0f, 1.0f);
    }
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
    const double s = ssim(a, b);
    EXPECT_GE(s, -1.0);
    EXPECT_LT(s, 1.0);
    EXPECT_THROW(ssim(a, Tensor<float>({16, 15, 3})), InvalidArgument);
    EXPECT_THROW(ssim(Tensor<float>({6, 6, 3}), Tensor<float>({6, 6, 3})), InvalidArgument);
}

TEST(Ssim, MatchesFrozenScikitImageValue) {
    // skimage.metrics.structural_similarity(a, b, win_size=7, channel_axis=2,
    // data_range=1.0) on the same float32-rounded images.
    Tensor<float> a({12, 10, 3}), b({12, 10, 3});
    for (std::size_t y = 0; y < 12; ++y) {
        for (std::size_t x = 0; x < 10; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                a[(y * 10 + x) * 3 + c] = static_cast<float>(((y * 7 + x * 3 + c * 5) % 11) / 10.0);
                b[(y * 10 + x) * 3 + c] = static_cast<float>(((y * 5 + x * 2 + c) % 13) / 12.0);
            }
        }
    }
    EXPECT_NEAR(ssim(a, b), 0.05502196350199074, 1e-9);
}

TEST(Psnr, ExamplesAndMonotonicity) {
    Tensor<float> a({100}, 0.5f), b({100}, 0.6f);
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    double prev = kPsnrCap;
    for (float d : {0.01f, 0.05f, 0.1f, 0.3f}) {
        Tensor<float> c({100}, 0.5f + d);
        const double p = psnr(a, c);
        EXPECT_LT(p, prev);
        EXPECT_GE(p, 0.0);
        prev = p;
    }
    EXPECT_THROW(psnr(a, Tensor<float>({99})), InvalidArgument);
}

TEST(TemporalJitter, StaticNoiseAndGroundTruth) {
    Tensor<float> still({3, 8, 8, 3}, 0.3f);
    const Tensor<float> ones({3, 8, 8, 1}, 1.0f);
    EXPECT_EQ(temporal_jitter(still, ones), 0.0);

    Rng rng(2);
    const double sd = 0.1;
    const auto noise = rng.normal_tensor({6, 40, 40, 3}, sd);
    EXPECT_NEAR(temporal_jitter(noise, Tensor<float>({6, 40, 40, 1}, 1.0f)), 2.0 * sd * sd, 0.1 * 2.0 * sd * sd);

    const auto s = synth_sample(4, small_config());
    const auto comp = temporal_jitter(s.person_video, s.agnostic_mask, body_offsets(*s.scene));
    EXPECT_LT(comp, 1e-4);
    EXPECT_THROW(temporal_jitter(Tensor<float>({1, 8, 8, 3}), Tensor<float>({1, 8, 8, 1})), InvalidArgument);
    EXPECT_THROW(temporal_jitter(still, Tensor<float>({3, 8, 4, 1})), InvalidArgument);
}

TEST(TemporalJitter, CompensationMatters) {
    // Find a moving patterned sample: uncompensated jitter is large.
    const auto cfg = small_config();
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto s = synth_sample(seed, cfg);
        if (s.scene->garment.pattern == GarmentPattern::solid || s.scene->body_x[0] == s.scene->body_x[1]) {
            continue;
        }
        EXPECT_GT(temporal_jitter(s.person_video, s.agnostic_mask), 1e-3);
        EXPECT_EQ(temporal_jitter(s.person_video, s.agnostic_mask, body_offsets(*s.scene)), 0.0);
        return;
    }
    FAIL() << "no moving patterned sample found";
}

TEST(GarmentFidelity, GroundTruthZeroedAndBackgroundInvariance) {
    const auto cfg = small_config();
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const auto s = synth_sample(seed, cfg);
        EXPECT_GE(garment_fidelity(s.person_video, s), 0.99);

        Tensor<float> zeroed = s.person_video;
        for (std::size_t p = 0; p < s.agnostic_mask.size(); ++p) {
            if (s.agnostic_mask[p] != 0.0f) {
                zeroed[3 * p] = zeroed[3 * p + 1] = zeroed[3 * p + 2] = 0.0f;
            }
        }
        EXPECT_LT(garment_fidelity(zeroed, s), 0.2) << "seed " << seed;

        Tensor<float> bg = s.person_video;
        for (std::size_t p = 0; p < s.agnostic_mask.size(); ++p) {
            if (s.agnostic_mask[p] == 0.0f) {
                bg[3 * p] = 1.0f - bg[3 * p];
            }
        }
        EXPECT_EQ(garment_fidelity(bg, s), garment_fidelity(s.person_video, s));
    }
    TryOnSample bare = synth_sample(1, cfg);
    bare.scene.reset();
    EXPECT_THROW(garment_fidelity(bare.person_video, bare), InvalidArgument);
}

TEST(GarmentFidelity, InvariantOutsideMaskWithOccluder) {
    auto cfg = small_config();
    cfg.occluder = true;
    const auto s = synth_sample(3, cfg);
    Tensor<float> mod = s.person_video;
    for (std::size_t p = 0; p < s.agnostic_mask.size(); ++p) {
        if (s.agnostic_mask[p] == 0.0f) {
            mod[3 * p + 1] = 0.0f;
        }
    }
    EXPECT_EQ(garment_fidelity(mod, s), garment_fidelity(s.person_video, s));
    EXPECT_GE(garment_fidelity(s.person_video, s), 0.99);
}

TEST(MetricReport, EvaluateAndJson) {
    const auto s = synth_sample(2, small_config());
    const auto r = evaluate_sample(s.person_video, s);
    EXPECT_EQ(r.ssim, 1.0);
    EXPECT_EQ(r.psnr, kPsnrCap);
    EXPECT_EQ(r.temporal_jitter, 0.0);
    EXPECT_TRUE(r.jitter_compensated);
    EXPECT_GE(r.garment_fidelity, 0.99);
    const nlohmann::json j = mean_report({r, r});
    EXPECT_EQ(j["ssim"], 1.0);
    EXPECT_EQ(j["samples"], 2);
}

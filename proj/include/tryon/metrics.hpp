#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tryon/data.hpp"
#include "tryon/errors.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr double kPsnrCap = 99.0;

// SSIM of two [H, W, C] images with a uniform 7x7 window and unit dynamic
// range, averaged over every fully-contained window and channel. Window
// variances use the unbiased (N-1) normalisation.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape() || a.rank() != 3) {
        throw InvalidArgument("ssim: operands must be equal-shaped [H, W, C], got " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    }
    const std::size_t H = a.shape()[0], W = a.shape()[1], C = a.shape()[2], k = kSsimWindow;
    if (H < k || W < k) {
        throw InvalidArgument("ssim: image smaller than the 7x7 window");
    }
    const double n = static_cast<double>(k * k), cov_norm = n / (n - 1.0);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y + k <= H; ++y) {
            for (std::size_t x = 0; x + k <= W; ++x) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t dy = 0; dy < k; ++dy) {
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t i = ((y + dy) * W + x + dx) * C + c;
                        const double va = a[i], vb = b[i];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                const double ma = sa / n, mb = sb / n;
                const double va = cov_norm * (saa / n - ma * ma);
                const double vb = cov_norm * (sbb / n - mb * mb);
                const double cab = cov_norm * (sab / n - ma * mb);
                total += ((2 * ma * mb + kSsimC1) * (2 * cab + kSsimC2)) /
                         ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

inline Tensor<float> video_frame(const Tensor<float>& v, std::size_t f) {
    const auto& s = v.shape();
    const std::size_t n = s[1] * s[2] * s[3];
    return Tensor<float>({s[1], s[2], s[3]}, std::vector<float>(v.data().begin() + f * n, v.data().begin() + (f + 1) * n));
}

// Mean frame SSIM of two [F, H, W, C] videos.
inline double ssim_video(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape() || a.rank() != 4) {
        throw InvalidArgument("ssim_video: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double s = 0.0;
    for (std::size_t f = 0; f < a.shape()[0]; ++f) {
        s += ssim(video_frame(a, f), video_frame(b, f));
    }
    return s / static_cast<double>(a.shape()[0]);
}

inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Per-frame (dy, dx) content translation, e.g. the generator's body path.
using FrameOffsets = std::vector<std::pair<long, long>>;

// Mean over consecutive frame pairs of the masked mean squared difference.
// With offsets, pixel p in frame f is compared with p + (o[f+1] - o[f]) in
// frame f+1. Pairs whose masks do not intersect are skipped.
inline double temporal_jitter(const Tensor<float>& video, const Tensor<float>& mask,
                              const std::optional<FrameOffsets>& offsets = std::nullopt) {
    const auto& vs = video.shape();
    if (vs.size() != 4 || vs[0] < 2) {
        throw InvalidArgument("temporal_jitter: need a [F>=2, H, W, C] video");
    }
    const std::size_t F = vs[0], H = vs[1], W = vs[2], C = vs[3];
    if (mask.shape() != Shape{F, H, W, 1}) {
        throw InvalidArgument("temporal_jitter: mask shape " + shape_str(mask.shape()) + " does not match video");
    }
    if (offsets && offsets->size() != F) {
        throw InvalidArgument("temporal_jitter: need one offset per frame");
    }
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t f = 0; f + 1 < F; ++f) {
        long dy = 0, dx = 0;
        if (offsets) {
            dy = (*offsets)[f + 1].first - (*offsets)[f].first;
            dx = (*offsets)[f + 1].second - (*offsets)[f].second;
        }
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t y = 0; y < H; ++y) {
            const long y2 = static_cast<long>(y) + dy;
            if (y2 < 0 || y2 >= static_cast<long>(H)) continue;
            for (std::size_t x = 0; x < W; ++x) {
                const long x2 = static_cast<long>(x) + dx;
                if (x2 < 0 || x2 >= static_cast<long>(W)) continue;
                const std::size_t p = (f * H + y) * W + x;
                const std::size_t q = ((f + 1) * H + static_cast<std::size_t>(y2)) * W + static_cast<std::size_t>(x2);
                if (mask[p] == 0.0f || mask[q] == 0.0f) continue;
                for (std::size_t c = 0; c < C; ++c) {
                    const double d = static_cast<double>(video[q * C + c]) - video[p * C + c];
                    acc += d * d;
                }
                n += C;
            }
        }
        if (n > 0) {
            total += acc / static_cast<double>(n);
            ++pairs;
        }
    }
    return pairs ? total / static_cast<double>(pairs) : 0.0;
}

inline FrameOffsets body_offsets(const SceneParams& s) {
    FrameOffsets o;
    for (std::size_t f = 0; f < s.body_y.size(); ++f) {
        o.emplace_back(static_cast<long>(s.body_y[f]), static_cast<long>(s.body_x[f]));
    }
    return o;
}

// Mean over frames of SSIM between the result's garment footprint, mapped
// back to garment space, and the reference garment region. Footprint pixels
// outside the mask (occluded) take the reference value so only masked
// content is scored.
inline double garment_fidelity(const Tensor<float>& result, const TryOnSample& sample) {
    if (!sample.scene) {
        throw InvalidArgument("garment_fidelity: sample has no scene parameters");
    }
    if (result.shape() != sample.person_video.shape()) {
        throw InvalidArgument("garment_fidelity: result shape " + shape_str(result.shape()) + " != sample " +
                              shape_str(sample.person_video.shape()));
    }
    const SceneParams& s = *sample.scene;
    const Tensor<float> ref = garment_reference(sample.garment_image, s);
    const std::size_t F = result.shape()[0], H = result.shape()[1], W = result.shape()[2];
    double total = 0.0;
    for (std::size_t f = 0; f < F; ++f) {
        Tensor<float> crop = garment_crop_from_frame(result, s, f);
        for (std::size_t u = 0; u < s.garment_h; ++u) {
            for (std::size_t v = 0; v < s.garment_w; ++v) {
                const std::size_t m = (f * H + s.garment_y(f) + u) * W + s.garment_x(f) + v;
                if (sample.agnostic_mask[m] == 0.0f) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        crop[(u * s.garment_w + v) * 3 + c] = ref[(u * s.garment_w + v) * 3 + c];
                    }
                }
            }
        }
        total += ssim(crop, ref);
    }
    return total / static_cast<double>(F);
}

struct MetricReport {
    double ssim = 0.0;
    double psnr = 0.0;
    double temporal_jitter = 0.0;
    bool jitter_compensated = false;
    double garment_fidelity = 0.0;
    std::size_t samples = 0;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"ssim", r.ssim},
         {"psnr", r.psnr},
         {"temporal_jitter", r.temporal_jitter},
         {"temporal_jitter_compensated", r.jitter_compensated},
         {"garment_fidelity", r.garment_fidelity},
         {"samples", r.samples}};
}

// Metrics of one result against its sample. SSIM/PSNR compare with the
// sample's person video, which for an unpaired sample is the generator's
// rendering of the new garment.
inline MetricReport evaluate_sample(const Tensor<float>& result, const TryOnSample& sample) {
    MetricReport r;
    r.ssim = ssim_video(result, sample.person_video);
    r.psnr = psnr(result, sample.person_video);
    std::optional<FrameOffsets> off;
    if (sample.scene) {
        off = body_offsets(*sample.scene);
    }
    r.temporal_jitter = temporal_jitter(result, sample.agnostic_mask, off);
    r.jitter_compensated = off.has_value();
    r.garment_fidelity = garment_fidelity(result, sample);
    r.samples = 1;
    return r;
}

inline MetricReport mean_report(const std::vector<MetricReport>& rs) {
    MetricReport m;
    if (rs.empty()) {
        return m;
    }
    m.jitter_compensated = true;
    for (const auto& r : rs) {
        m.ssim += r.ssim;
        m.psnr += r.psnr;
        m.temporal_jitter += r.temporal_jitter;
        m.garment_fidelity += r.garment_fidelity;
        m.jitter_compensated = m.jitter_compensated && r.jitter_compensated;
        m.samples += r.samples;
    }
    const double n = static_cast<double>(rs.size());
    m.ssim /= n;
    m.psnr /= n;
    m.temporal_jitter /= n;
    m.garment_fidelity /= n;
    return m;
}

}  // namespace tryon

#pragma once

// Garment decomposition into text, semantic, line and appearance token
// streams, plus the frozen toy latent autoencoder.
//
// The encoders here are fixed, seeded stand-ins: a Sobel line extractor,
// a hashing caption embedder, a statistics-based semantic embedder and an
// average-pool + linear-lift autoencoder. Only the two Patchfiers train.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tryon/attention.hpp"
#include "tryon/rng.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

inline constexpr std::size_t kCaptionBuckets = 4096;
inline constexpr std::size_t kMaxCaptionTokens = 32;
inline constexpr std::size_t kSemanticTokens = 4;

namespace detail {

inline void check_unit_range(const Tensor<float>& img, const char* who) {
    for (float v : img.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw InvalidArgument(std::string(who) + ": pixel values must lie in [0,1]");
        }
    }
}

inline double luminance(const float* px) { return 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]; }

// Gram-Schmidt on the columns of a [rows, cols] matrix.
inline Tensor<double> orthonormal_columns(Tensor<double> m) {
    const std::size_t rows = m.rows(), cols = m.cols();
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
            double d = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                d += m.at(r, c) * m.at(r, p);
            }
            for (std::size_t r = 0; r < rows; ++r) {
                m.at(r, c) -= d * m.at(r, p);
            }
        }
        double n = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            n += m.at(r, c) * m.at(r, c);
        }
        n = std::sqrt(n);
        for (std::size_t r = 0; r < rows; ++r) {
            m.at(r, c) /= n;
        }
    }
    return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Line maps.

// Sobel gradient magnitude of luminance, normalized by its maximum. Borders
// replicate edge pixels. image: [H, W, 3] -> [H, W, 1].
inline Tensor<float> sobel_magnitude(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw InvalidArgument("line map expects an [H, W, 3] image");
    }
    const std::size_t h = image.dim(0), w = image.dim(1);
    std::vector<double> lum(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        lum[i] = detail::luminance(image.data().data() + 3 * i);
    }
    auto at = [&](long y, long x) {
        y = std::clamp(y, 0L, static_cast<long>(h) - 1);
        x = std::clamp(x, 0L, static_cast<long>(w) - 1);
        return lum[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    Tensor<float> mag({h, w, 1});
    for (long y = 0; y < static_cast<long>(h); ++y) {
        for (long x = 0; x < static_cast<long>(w); ++x) {
            const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
            mag[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] =
                static_cast<float>(std::sqrt(gx * gx + gy * gy));
        }
    }
    return mag;
}

inline Tensor<float> extract_line_map(const Tensor<float>& image) {
    detail::check_unit_range(image, "extract_line_map");
    Tensor<float> mag = sobel_magnitude(image);
    float mx = 0.0f;
    for (float v : mag.data()) {
        mx = std::max(mx, v);
    }
    // Gradients below float noise are treated as a flat image.
    if (mx <= 1e-6f) {
        return mag.fill(0.0f);
    }
    for (auto& v : mag.data()) {
        v /= mx;
    }
    return mag;
}

// [H, W, 1] -> [H, W, 3]
inline Tensor<float> broadcast_gray(const Tensor<float>& gray) {
    const std::size_t n = gray.size();
    Tensor<float> rgb({gray.dim(0), gray.dim(1), 3});
    for (std::size_t i = 0; i < n; ++i) {
        rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = gray[i];
    }
    return rgb;
}

// ---------------------------------------------------------------------------
// Toy autoencoder: s x s average pool, then latent = (rgb - 0.5) * lift.
// lift has orthogonal rows scaled by `scale`, so unlift = lift^T / scale^2
// is an exact left inverse on the lifted subspace.

struct ToyVaeParams {
    std::size_t factor = 4;
    std::size_t latent_channels = 8;
    Tensor<double> lift;    // [3, C_lat]
    Tensor<double> unlift;  // [C_lat, 3]

    static ToyVaeParams make(std::size_t factor = 4, std::size_t latent_channels = 8, std::uint64_t seed = 17,
                             double scale = 2.0) {
        if (factor < 1 || latent_channels < 3) {
            throw InvalidArgument("toy vae needs factor >= 1 and at least 3 latent channels");
        }
        Rng rng(seed);
        Tensor<double> q = detail::orthonormal_columns(rng.normal_tensor<double>({latent_channels, 3}));
        ToyVaeParams p;
        p.factor = factor;
        p.latent_channels = latent_channels;
        p.lift = Tensor<double>({3, latent_channels});
        p.unlift = Tensor<double>({latent_channels, 3});
        for (std::size_t r = 0; r < latent_channels; ++r) {
            for (std::size_t c = 0; c < 3; ++c) {
                p.lift.at(c, r) = scale * q.at(r, c);
                p.unlift.at(r, c) = q.at(r, c) / scale;
            }
        }
        return p;
    }
};

// frames: [F, H, W, 3] -> [F, H/s, W/s, C_lat]
inline Tensor<float> toy_vae_encode(const Tensor<float>& frames, const ToyVaeParams& vae) {
    if (frames.rank() != 4 || frames.dim(3) != 3) {
        throw InvalidArgument("toy_vae_encode expects [F, H, W, 3]");
    }
    const std::size_t f = frames.dim(0), h = frames.dim(1), w = frames.dim(2), s = vae.factor;
    if (h % s != 0 || w % s != 0) {
        throw InvalidArgument("toy_vae_encode: image dims " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by factor " + std::to_string(s));
    }
    const std::size_t lh = h / s, lw = w / s, cl = vae.latent_channels;
    Tensor<float> out({f, lh, lw, cl});
    const double inv_area = 1.0 / static_cast<double>(s * s);
    for (std::size_t fi = 0; fi < f; ++fi) {
        for (std::size_t by = 0; by < lh; ++by) {
            for (std::size_t bx = 0; bx < lw; ++bx) {
                std::array<double, 3> mean{};
                for (std::size_t y = by * s; y < (by + 1) * s; ++y) {
                    for (std::size_t x = bx * s; x < (bx + 1) * s; ++x) {
                        const float* px = frames.data().data() + ((fi * h + y) * w + x) * 3;
                        for (std::size_t c = 0; c < 3; ++c) {
                            mean[c] += px[c];
                        }
                    }
                }
                float* o = out.data().data() + ((fi * lh + by) * lw + bx) * cl;
                for (std::size_t j = 0; j < cl; ++j) {
                    double v = 0.0;
                    for (std::size_t c = 0; c < 3; ++c) {
                        v += (mean[c] * inv_area - 0.5) * vae.lift.at(c, j);
                    }
                    o[j] = static_cast<float>(v);
                }
            }
        }
    }
    return out;
}

// latents: [F, h, w, C_lat] -> [F, h*s, w*s, 3], clamped to [0,1].
inline Tensor<float> toy_vae_decode(const Tensor<float>& latents, const ToyVaeParams& vae) {
    if (latents.rank() != 4 || latents.dim(3) != vae.latent_channels) {
        throw InvalidArgument("toy_vae_decode expects [F, h, w, C_lat]");
    }
    if (!latents.all_finite()) {
        throw NumericFailure("toy_vae_decode: non-finite latent");
    }
    const std::size_t f = latents.dim(0), lh = latents.dim(1), lw = latents.dim(2), s = vae.factor;
    const std::size_t cl = vae.latent_channels;
    Tensor<float> out({f, lh * s, lw * s, 3});
    for (std::size_t fi = 0; fi < f; ++fi) {
        for (std::size_t by = 0; by < lh; ++by) {
            for (std::size_t bx = 0; bx < lw; ++bx) {
                const float* z = latents.data().data() + ((fi * lh + by) * lw + bx) * cl;
                std::array<float, 3> rgb{};
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = 0.5;
                    for (std::size_t j = 0; j < cl; ++j) {
                        v += static_cast<double>(z[j]) * vae.unlift.at(j, c);
                    }
                    rgb[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
                for (std::size_t y = by * s; y < (by + 1) * s; ++y) {
                    for (std::size_t x = bx * s; x < (bx + 1) * s; ++x) {
                        float* px = out.data().data() + ((fi * lh * s + y) * lw * s + x) * 3;
                        px[0] = rgb[0];
                        px[1] = rgb[1];
                        px[2] = rgb[2];
                    }
                }
            }
        }
    }
    return out;
}

// Largest |latent| any image in [0,1] can encode to.
inline double latent_bound(const ToyVaeParams& vae) {
    double bound = 0.0;
    for (std::size_t j = 0; j < vae.latent_channels; ++j) {
        double b = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            b += 0.5 * std::abs(vae.lift.at(c, j));
        }
        bound = std::max(bound, b);
    }
    return bound;
}

// [H, W, 3] -> [H/s, W/s, C_lat]
inline Tensor<float> toy_vae_encode_image(const Tensor<float>& image, const ToyVaeParams& vae) {
    if (image.rank() != 3) {
        throw InvalidArgument("toy_vae_encode_image expects [H, W, 3]");
    }
    Tensor<float> z = toy_vae_encode(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}), vae);
    return z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
}

// ---------------------------------------------------------------------------
// Patchfier: tokens = (latent rows * base) * zero_projection. The final
// projection starts at zero, so a fresh Patchfier emits all-zero tokens.

template <class T>
struct PatchfierParams {
    Tensor<T> base;             // [C_lat, C]
    Tensor<T> zero_projection;  // [C, C]

    static PatchfierParams init(Rng& rng, std::size_t latent_channels, std::size_t channels) {
        return {init_matrix<T>(rng, latent_channels, channels), Tensor<T>({channels, channels})};
    }

    PatchfierParams zeros_like() const { return {Tensor<T>(base.shape()), Tensor<T>(zero_projection.shape())}; }

    void collect(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + "base", &base);
        out.emplace_back(prefix + "zero_projection", &zero_projection);
    }
};

template <class T>
struct PatchfierCache {
    Tensor<T> rows, projected;
};

// latent: [h, w, C_lat] -> [h*w, C]
template <class T>
Tensor<T> patchify(const Tensor<T>& latent, const PatchfierParams<T>& p, PatchfierCache<T>* cache = nullptr) {
    if (latent.rank() != 3 || latent.dim(2) != p.base.rows()) {
        throw InvalidArgument("patchify expects [h, w, C_lat] matching the base projection");
    }
    if (!latent.all_finite()) {
        throw NumericFailure("patchify: non-finite latent");
    }
    Tensor<T> rows = latent.reshaped({latent.dim(0) * latent.dim(1), latent.dim(2)});
    Tensor<T> projected = matmul(rows, p.base);
    Tensor<T> tokens = matmul(projected, p.zero_projection);
    if (cache) {
        *cache = {std::move(rows), std::move(projected)};
    }
    return tokens;
}

template <class T>
void patchify_backward(const Tensor<T>& dtokens, const PatchfierParams<T>& p, const PatchfierCache<T>& c,
                       PatchfierParams<T>& grads) {
    grads.zero_projection += matmul_tn(c.projected, dtokens);
    grads.base += matmul_tn(c.rows, matmul_nt(dtokens, p.zero_projection));
}

// ---------------------------------------------------------------------------
// Caption embedding: whitespace tokens hashed into a fixed seeded table.

inline std::vector<std::string> caption_words(std::string_view caption) {
    std::vector<std::string> words;
    std::istringstream is{std::string(caption)};
    std::string w;
    while (is >> w && words.size() < kMaxCaptionTokens) {
        words.push_back(w);
    }
    return words;
}

inline std::size_t caption_bucket(std::string_view word) { return fnv1a(word) % kCaptionBuckets; }

inline Tensor<float> encode_caption(std::string_view caption, std::size_t channels, std::uint64_t seed = 101) {
    const auto words = caption_words(caption);
    if (words.empty()) {
        throw InvalidArgument("encode_caption: caption is empty");
    }
    Tensor<float> out({words.size(), channels});
    for (std::size_t i = 0; i < words.size(); ++i) {
        Rng rng(mix_seed(seed, caption_bucket(words[i])));
        for (std::size_t c = 0; c < channels; ++c) {
            out.at(i, c) = static_cast<float>(rng.normal());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Semantic embedding: four summary-statistic tokens.

struct SemanticFeatures {
    std::vector<double> color_stats;  // mean RGB, std RGB
    std::vector<double> histogram;    // 2x2x2 joint RGB bins, normalized
    std::vector<double> edge_stats;   // raw Sobel mean/std/max, fraction of strong edges
    std::vector<double> thumbnail;    // 8x8x3 area-averaged, centered at 0.5
};

inline SemanticFeatures semantic_features(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw InvalidArgument("encode_semantic expects an [H, W, 3] image");
    }
    detail::check_unit_range(image, "encode_semantic");
    const std::size_t h = image.dim(0), w = image.dim(1), n = h * w;
    SemanticFeatures f;
    f.color_stats.assign(6, 0.0);
    f.histogram.assign(8, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const float* px = image.data().data() + 3 * i;
        for (std::size_t c = 0; c < 3; ++c) {
            f.color_stats[c] += px[c];
        }
        const std::size_t bin = (px[0] >= 0.5f ? 4 : 0) + (px[1] >= 0.5f ? 2 : 0) + (px[2] >= 0.5f ? 1 : 0);
        f.histogram[bin] += 1.0;
    }
    for (std::size_t c = 0; c < 3; ++c) {
        f.color_stats[c] /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const float* px = image.data().data() + 3 * i;
        for (std::size_t c = 0; c < 3; ++c) {
            const double d = px[c] - f.color_stats[c];
            f.color_stats[3 + c] += d * d;
        }
    }
    for (std::size_t c = 0; c < 3; ++c) {
        f.color_stats[3 + c] = std::sqrt(f.color_stats[3 + c] / static_cast<double>(n));
    }
    for (auto& v : f.histogram) {
        v /= static_cast<double>(n);
    }

    const Tensor<float> mag = sobel_magnitude(image);
    double mean = 0.0, mx = 0.0;
    for (float v : mag.data()) {
        mean += v;
        mx = std::max(mx, static_cast<double>(v));
    }
    mean /= static_cast<double>(n);
    double var = 0.0, strong = 0.0;
    for (float v : mag.data()) {
        var += (v - mean) * (v - mean);
        strong += (mx > 1e-6 && v > 0.25 * mx) ? 1.0 : 0.0;
    }
    f.edge_stats = {mean, std::sqrt(var / static_cast<double>(n)), mx, strong / static_cast<double>(n)};

    constexpr std::size_t kThumb = 8;
    f.thumbnail.assign(kThumb * kThumb * 3, 0.0);
    for (std::size_t ty = 0; ty < kThumb; ++ty) {
        const std::size_t y0 = ty * h / kThumb, y1 = std::max(y0 + 1, (ty + 1) * h / kThumb);
        for (std::size_t tx = 0; tx < kThumb; ++tx) {
            const std::size_t x0 = tx * w / kThumb, x1 = std::max(x0 + 1, (tx + 1) * w / kThumb);
            for (std::size_t y = y0; y < y1; ++y) {
                for (std::size_t x = x0; x < x1; ++x) {
                    const float* px = image.data().data() + (y * w + x) * 3;
                    for (std::size_t c = 0; c < 3; ++c) {
                        f.thumbnail[(ty * kThumb + tx) * 3 + c] += px[c];
                    }
                }
            }
            const double area = static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::size_t c = 0; c < 3; ++c) {
                auto& v = f.thumbnail[(ty * kThumb + tx) * 3 + c];
                v = v / area - 0.5;
            }
        }
    }
    return f;
}

inline Tensor<float> encode_semantic(const Tensor<float>& image, std::size_t channels, std::uint64_t seed = 202) {
    const SemanticFeatures f = semantic_features(image);
    const std::array<const std::vector<double>*, kSemanticTokens> feats{&f.color_stats, &f.histogram, &f.edge_stats,
                                                                        &f.thumbnail};
    Tensor<float> out({kSemanticTokens, channels});
    for (std::size_t t = 0; t < kSemanticTokens; ++t) {
        const auto& v = *feats[t];
        Rng rng(mix_seed(seed, t));
        const Tensor<double> proj = rng.normal_tensor<double>({v.size(), channels}, 1.0 / std::sqrt(v.size()));
        for (std::size_t c = 0; c < channels; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) {
                s += v[i] * proj.at(i, c);
            }
            out.at(t, c) = static_cast<float>(s);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decomposition.

// Outputs of the frozen encoders; the Patchfiers run inside the model.
struct FrozenGarmentFeatures {
    Tensor<float> garment_latent;  // [h, w, C_lat]
    Tensor<float> line_latent;     // [h, w, C_lat]
    Tensor<float> txt_tokens;      // [N_txt, C]
    Tensor<float> clip_tokens;     // [4, C]
};

inline FrozenGarmentFeatures encode_garment_frozen(const Tensor<float>& image, std::string_view caption,
                                                   const ToyVaeParams& vae, std::size_t channels) {
    detail::check_unit_range(image, "decompose_garment");
    FrozenGarmentFeatures f;
    f.garment_latent = toy_vae_encode_image(image, vae);
    f.line_latent = toy_vae_encode_image(broadcast_gray(extract_line_map(image)), vae);
    f.txt_tokens = encode_caption(caption, channels);
    f.clip_tokens = encode_semantic(image, channels);
    return f;
}

template <class T>
struct GarmentCondition {
    Tensor<T> txt_tokens;
    Tensor<T> clip_tokens;
    Tensor<T> line_tokens;
    Tensor<T> garment_tokens;
};

template <class T>
GarmentCondition<T> decompose_garment(const Tensor<float>& image, std::string_view caption,
                                      const PatchfierParams<T>& patchfier_g, const PatchfierParams<T>& patchfier_l,
                                      const ToyVaeParams& vae) {
    const std::size_t channels = patchfier_g.zero_projection.cols();
    const FrozenGarmentFeatures f = encode_garment_frozen(image, caption, vae, channels);
    return {f.txt_tokens.template cast<T>(), f.clip_tokens.template cast<T>(),
            patchify(f.line_latent.template cast<T>(), patchfier_l),
            patchify(f.garment_latent.template cast<T>(), patchfier_g)};
}

}  // namespace tryon

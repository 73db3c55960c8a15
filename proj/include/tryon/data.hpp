#pragma once

// Procedural try-on videos. A coloured rectangle ("body") moves along a
// seeded path over a gradient background; a patterned garment patch is
// affixed to it at a fixed offset. All placement is integer so the garment
// in each frame is an exact translate of the garment image.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryon/container.hpp"
#include "tryon/errors.hpp"
#include "tryon/rng.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

using Rgb = std::array<float, 3>;

struct GeneratorConfig {
    std::size_t frames = 8;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t vae_factor = 4;
    std::size_t n_train = 256;
    std::size_t n_test = 32;
    bool occluder = false;

    void validate() const {
        require(frames >= 2, "generator: frames must be >= 2");
        require(vae_factor >= 1, "generator: vae_factor must be >= 1");
        require(height >= 24 && width >= 24, "generator: images must be at least 24x24");
        require(height % vae_factor == 0 && width % vae_factor == 0,
                "generator: image dims must be divisible by the VAE factor");
        require(n_train + n_test >= 1, "generator: empty dataset");
    }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"frames", c.frames},   {"height", c.height}, {"width", c.width}, {"vae_factor", c.vae_factor},
         {"n_train", c.n_train}, {"n_test", c.n_test}, {"occluder", c.occluder}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.frames = j.value("frames", c.frames);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.vae_factor = j.value("vae_factor", c.vae_factor);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.occluder = j.value("occluder", c.occluder);
}

enum class GarmentPattern { solid, stripes, checker, dot_logo };

inline constexpr std::array<const char*, 4> kPatternWords{"solid", "striped", "checkered", "dotted"};
inline constexpr std::array<const char*, 4> kGarmentTypes{"shirt", "tee", "sweater", "top"};

struct NamedColor {
    const char* name;
    Rgb rgb;
};

inline constexpr std::array<NamedColor, 10> kPalette{{
    {"red", {0.85f, 0.15f, 0.15f}},
    {"green", {0.20f, 0.70f, 0.25f}},
    {"blue", {0.15f, 0.30f, 0.85f}},
    {"yellow", {0.95f, 0.85f, 0.20f}},
    {"purple", {0.55f, 0.25f, 0.70f}},
    {"orange", {0.95f, 0.55f, 0.10f}},
    {"cyan", {0.20f, 0.80f, 0.85f}},
    {"pink", {0.95f, 0.55f, 0.70f}},
    {"black", {0.08f, 0.08f, 0.08f}},
    {"white", {0.96f, 0.96f, 0.96f}},
}};

struct GarmentParams {
    std::uint64_t seed = 0;
    std::size_t color = 0;  // palette index
    std::size_t accent = 1;
    GarmentPattern pattern = GarmentPattern::solid;
    std::size_t type = 0;
};

// Everything the renderer used. Positions are top-left corners.
struct SceneParams {
    std::uint64_t seed = 0;
    GarmentParams garment;
    Rgb bg_top{}, bg_bottom{}, body_color{};
    std::size_t body_h = 0, body_w = 0;
    std::size_t garment_h = 0, garment_w = 0;
    std::size_t offset_y = 0, offset_x = 0;  // garment inside body
    std::size_t canon_y = 0, canon_x = 0;    // garment inside garment_image
    std::size_t pattern_cell = 2;
    std::vector<std::size_t> body_y, body_x;
    bool occluder = false;

    std::size_t garment_y(std::size_t f) const { return body_y.at(f) + offset_y; }
    std::size_t garment_x(std::size_t f) const { return body_x.at(f) + offset_x; }
};

struct TryOnSample {
    Tensor<float> person_video;   // [F, H, W, 3]
    Tensor<float> garment_image;  // [H, W, 3]
    Tensor<float> agnostic_mask;  // [F, H, W, 1]
    Tensor<float> pose_map;       // [F, H, W, 3]
    std::string caption;
    std::optional<SceneParams> scene;

    std::size_t frames() const { return person_video.shape()[0]; }
};

inline std::string make_caption(const GarmentParams& g) {
    return std::string("Model is wearing ") + kPalette[g.color].name + " " +
           kPatternWords[static_cast<std::size_t>(g.pattern)] + " " + kGarmentTypes[g.type];
}

namespace detail {

// round(1024 sin(2 pi k / 32)), k = 0..31; keeps the path integer-only.
inline int sin_q10(std::size_t k) {
    static constexpr std::array<int, 9> quarter{0, 200, 392, 569, 724, 851, 946, 1004, 1024};
    k %= 32;
    if (k <= 8) return quarter[k];
    if (k <= 16) return quarter[16 - k];
    if (k <= 24) return -quarter[k - 16];
    return -quarter[32 - k];
}

inline std::vector<std::size_t> integer_path(Rng& rng, std::size_t frames, std::size_t range) {
    // range = number of admissible positions
    std::vector<std::size_t> out(frames);
    const long span = static_cast<long>(range) - 1;
    const long start = static_cast<long>(rng.below(range));
    const long amp = 1 + static_cast<long>(rng.below(std::max<std::size_t>(1, range / 6)));
    const long drift_num = static_cast<long>(rng.below(5)) - 2;  // -2..2 px per frame
    const std::size_t phase = rng.below(32), freq = 1 + rng.below(3);
    for (std::size_t f = 0; f < frames; ++f) {
        long p = start + drift_num * static_cast<long>(f) + (amp * sin_q10(phase + freq * f * 4)) / 1024;
        out[f] = static_cast<std::size_t>(std::clamp(p, 0L, span));
    }
    return out;
}

inline Rgb random_muted(Rng& rng, float lo, float hi) {
    Rgb c;
    for (auto& v : c) {
        v = lo + (hi - lo) * static_cast<float>(rng.below(1001)) / 1000.0f;
    }
    return c;
}

inline void put(Tensor<float>& img, std::size_t base, const Rgb& c) {
    img[base] = c[0];
    img[base + 1] = c[1];
    img[base + 2] = c[2];
}

}  // namespace detail

inline GarmentParams sample_garment(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 2));
    GarmentParams g;
    g.seed = seed;
    g.color = rng.below(kPalette.size());
    g.accent = (g.color + 1 + rng.below(kPalette.size() - 1)) % kPalette.size();
    g.pattern = static_cast<GarmentPattern>(rng.below(4));
    g.type = rng.below(kGarmentTypes.size());
    return g;
}

// Color of garment-local pixel (u, v) in a gh x gw patch; `cell` is the
// stripe/checker period in pixels.
inline Rgb garment_pixel(const GarmentParams& g, std::size_t u, std::size_t v, std::size_t gh, std::size_t gw,
                         std::size_t cell) {
    const Rgb& a = kPalette[g.color].rgb;
    const Rgb& b = kPalette[g.accent].rgb;
    switch (g.pattern) {
        case GarmentPattern::solid:
            return a;
        case GarmentPattern::stripes:
            return (u / cell) % 2 ? b : a;
        case GarmentPattern::checker:
            return (u / cell + v / cell) % 2 ? b : a;
        case GarmentPattern::dot_logo: {
            // doubled coordinates keep the center on the pixel lattice
            const long du = 2 * static_cast<long>(u) + 1 - static_cast<long>(gh);
            const long dv = 2 * static_cast<long>(v) + 1 - static_cast<long>(gw);
            const long r = static_cast<long>(std::min(gh, gw)) / 2;
            return du * du + dv * dv <= r * r ? b : a;
        }
    }
    return a;
}

inline SceneParams sample_scene(std::uint64_t scene_seed, std::uint64_t garment_seed, const GeneratorConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(scene_seed, 1));
    SceneParams s;
    s.seed = scene_seed;
    s.garment = sample_garment(garment_seed);
    s.bg_top = detail::random_muted(rng, 0.1f, 0.9f);
    s.bg_bottom = detail::random_muted(rng, 0.1f, 0.9f);
    s.body_color = detail::random_muted(rng, 0.3f, 0.7f);
    const std::size_t H = cfg.height, W = cfg.width;
    s.body_h = H / 2;
    s.body_w = W * 3 / 8;
    s.garment_h = H * 5 / 16;
    s.garment_w = W * 5 / 16;
    s.offset_y = s.body_h / 8;
    s.offset_x = (s.body_w - s.garment_w) / 2;
    s.canon_y = (H - s.garment_h) / 2;
    s.canon_x = (W - s.garment_w) / 2;
    // at least one latent cell, so patterns survive the autoencoder
    s.pattern_cell = std::max(cfg.vae_factor, s.garment_h / 5);
    s.body_y = detail::integer_path(rng, cfg.frames, H - s.body_h + 1);
    s.body_x = detail::integer_path(rng, cfg.frames, W - s.body_w + 1);
    s.occluder = cfg.occluder;
    return s;
}

inline Tensor<float> render_garment_image(const SceneParams& s, std::size_t H, std::size_t W) {
    Tensor<float> img({H, W, 3}, 1.0f);
    for (std::size_t u = 0; u < s.garment_h; ++u) {
        for (std::size_t v = 0; v < s.garment_w; ++v) {
            detail::put(img, ((s.canon_y + u) * W + s.canon_x + v) * 3,
                        garment_pixel(s.garment, u, v, s.garment_h, s.garment_w, s.pattern_cell));
        }
    }
    return img;
}

inline bool occluded(const SceneParams& s, std::size_t f, std::size_t frames, std::size_t x, std::size_t W) {
    if (!s.occluder) {
        return false;
    }
    const std::size_t bar = std::max<std::size_t>(2, W / 8);
    const std::size_t left = f * (W - bar) / (frames - 1);
    return x >= left && x < left + bar;
}

inline TryOnSample render_sample(const SceneParams& s, const GeneratorConfig& cfg) {
    const std::size_t F = cfg.frames, H = cfg.height, W = cfg.width;
    TryOnSample out;
    out.person_video = Tensor<float>({F, H, W, 3});
    out.agnostic_mask = Tensor<float>({F, H, W, 1});
    out.pose_map = Tensor<float>({F, H, W, 3});
    out.garment_image = render_garment_image(s, H, W);
    out.caption = make_caption(s.garment);
    const float sigma = std::max(1.5f, static_cast<float>(H) / 32.0f);
    const Rgb occ{0.2f, 0.2f, 0.2f};
    for (std::size_t f = 0; f < F; ++f) {
        const std::size_t by = s.body_y[f], bx = s.body_x[f];
        const std::size_t gy = s.garment_y(f), gx = s.garment_x(f);
        for (std::size_t y = 0; y < H; ++y) {
            const float a = static_cast<float>(y) / static_cast<float>(H - 1);
            Rgb bg;
            for (int c = 0; c < 3; ++c) {
                bg[c] = s.bg_top[c] + (s.bg_bottom[c] - s.bg_top[c]) * a;
            }
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t px = (f * H + y) * W + x;
                Rgb c = bg;
                if (y >= by && y < by + s.body_h && x >= bx && x < bx + s.body_w) {
                    c = s.body_color;
                }
                const bool in_garment = y >= gy && y < gy + s.garment_h && x >= gx && x < gx + s.garment_w;
                if (in_garment) {
                    c = garment_pixel(s.garment, y - gy, x - gx, s.garment_h, s.garment_w, s.pattern_cell);
                }
                if (occluded(s, f, F, x, W)) {
                    c = occ;
                } else if (in_garment) {
                    out.agnostic_mask[px] = 1.0f;
                }
                detail::put(out.person_video, px * 3, c);
            }
        }
        // pose: channel 0 body center, 1 top corners, 2 bottom corners
        const float cy = static_cast<float>(by) + 0.5f * static_cast<float>(s.body_h - 1);
        const float cx = static_cast<float>(bx) + 0.5f * static_cast<float>(s.body_w - 1);
        const float top = static_cast<float>(by), bottom = static_cast<float>(by + s.body_h - 1);
        const float left = static_cast<float>(bx), right = static_cast<float>(bx + s.body_w - 1);
        const std::array<std::array<float, 2>, 5> joints{{{cy, cx}, {top, left}, {top, right}, {bottom, left},
                                                          {bottom, right}}};
        const std::array<std::size_t, 5> channel{0, 1, 1, 2, 2};
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t base = ((f * H + y) * W + x) * 3;
                for (std::size_t j = 0; j < joints.size(); ++j) {
                    const float dy = static_cast<float>(y) - joints[j][0], dx = static_cast<float>(x) - joints[j][1];
                    const float g = std::exp(-(dy * dy + dx * dx) / (2.0f * sigma * sigma));
                    float& dst = out.pose_map[base + channel[j]];
                    dst = std::max(dst, g);
                }
            }
        }
    }
    out.scene = s;
    return out;
}

// Scene (background, body, motion) from scene_seed, garment from garment_seed.
// scene_seed != garment_seed gives the unpaired setting.
inline TryOnSample synth_sample(std::uint64_t scene_seed, std::uint64_t garment_seed, const GeneratorConfig& cfg) {
    return render_sample(sample_scene(scene_seed, garment_seed, cfg), cfg);
}

inline TryOnSample synth_sample(std::uint64_t seed, const GeneratorConfig& cfg) { return synth_sample(seed, seed, cfg); }

struct SamplePair {
    TryOnSample paired;
    TryOnSample unpaired;
};

inline SamplePair synth_pair(std::uint64_t seed_a, std::uint64_t seed_b, const GeneratorConfig& cfg) {
    require(seed_a != seed_b, "synth_pair: unpaired garment must come from a different seed");
    return {synth_sample(seed_a, cfg), synth_sample(seed_a, seed_b, cfg)};
}

// Person-video pixels inside the mask replaced by mid gray.
inline Tensor<float> agnostic_video(const TryOnSample& s) {
    Tensor<float> out = s.person_video;
    for (std::size_t p = 0; p < s.agnostic_mask.size(); ++p) {
        if (s.agnostic_mask[p] != 0.0f) {
            out[3 * p] = out[3 * p + 1] = out[3 * p + 2] = 0.5f;
        }
    }
    return out;
}

inline std::size_t mask_area(const Tensor<float>& mask, std::size_t f) {
    const auto& sh = mask.shape();
    const std::size_t n = sh[1] * sh[2];
    std::size_t a = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a += mask[f * n + i] != 0.0f;
    }
    return a;
}

// Crop [gh, gw, 3] at (y, x) from an [H, W, 3] image stored at `base`.
inline Tensor<float> crop_rect(const Tensor<float>& img, std::size_t base, std::size_t W, std::size_t y, std::size_t x,
                               std::size_t gh, std::size_t gw) {
    Tensor<float> out({gh, gw, 3});
    for (std::size_t u = 0; u < gh; ++u) {
        for (std::size_t v = 0; v < gw; ++v) {
            for (std::size_t c = 0; c < 3; ++c) {
                out[(u * gw + v) * 3 + c] = img[base + ((y + u) * W + x + v) * 3 + c];
            }
        }
    }
    return out;
}

// Inverse placement: frame f's garment footprint mapped back to garment space.
inline Tensor<float> garment_crop_from_frame(const Tensor<float>& video, const SceneParams& s, std::size_t f) {
    const auto& sh = video.shape();
    require(sh.size() == 4 && sh[3] == 3 && f < sh[0], "garment crop: bad video shape");
    return crop_rect(video, f * sh[1] * sh[2] * 3, sh[2], s.garment_y(f), s.garment_x(f), s.garment_h, s.garment_w);
}

inline Tensor<float> garment_reference(const Tensor<float>& garment_image, const SceneParams& s) {
    return crop_rect(garment_image, 0, garment_image.shape()[1], s.canon_y, s.canon_x, s.garment_h, s.garment_w);
}

inline TensorMap sample_tensors(const TryOnSample& s) {
    return {{"agnostic_mask", s.agnostic_mask},
            {"garment_image", s.garment_image},
            {"person_video", s.person_video},
            {"pose_map", s.pose_map}};
}

// ---- dataset on disk ----

struct DatasetEntry {
    std::string path;  // relative to the dataset directory
    std::uint64_t seed = 0;
    std::string split;
    std::string caption;
    std::uint64_t unpaired_garment_seed = 0;  // test split only
};

struct Dataset {
    GeneratorConfig config;
    std::uint64_t base_seed = 0;
    std::vector<DatasetEntry> entries;

    std::vector<const DatasetEntry*> split(const std::string& name) const {
        std::vector<const DatasetEntry*> out;
        for (const auto& e : entries) {
            if (e.split == name) {
                out.push_back(&e);
            }
        }
        return out;
    }
};

inline std::uint64_t sample_seed(std::uint64_t base_seed, std::size_t index) { return mix_seed(base_seed, index); }

inline Dataset plan_dataset(const GeneratorConfig& cfg, std::uint64_t base_seed) {
    cfg.validate();
    Dataset d{cfg, base_seed, {}};
    const std::size_t n = cfg.n_train + cfg.n_test;
    for (std::size_t i = 0; i < n; ++i) {
        DatasetEntry e;
        const bool train = i < cfg.n_train;
        const std::size_t local = train ? i : i - cfg.n_train;
        e.split = train ? "train" : "test";
        e.seed = sample_seed(base_seed, i);
        char name[64];
        std::snprintf(name, sizeof name, "samples/%s_%04zu.tensors", e.split.c_str(), local);
        e.path = name;
        e.caption = make_caption(sample_garment(e.seed));
        d.entries.push_back(std::move(e));
    }
    // unpaired: each test video wears the next test sample's garment
    for (std::size_t i = 0; i < cfg.n_test; ++i) {
        d.entries[cfg.n_train + i].unpaired_garment_seed = d.entries[cfg.n_train + (i + 1) % cfg.n_test].seed;
    }
    return d;
}

inline nlohmann::json dataset_manifest(const Dataset& d) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& e : d.entries) {
        nlohmann::json j{{"path", e.path}, {"seed", e.seed}, {"split", e.split}, {"caption", e.caption}};
        if (e.split == "test") {
            j["unpaired_garment_seed"] = e.unpaired_garment_seed;
        }
        samples.push_back(j);
    }
    return {{"generator", d.config}, {"base_seed", d.base_seed}, {"samples", samples}};
}

inline Dataset parse_dataset_manifest(const nlohmann::json& j) {
    Dataset d;
    try {
        d.config = j.at("generator").get<GeneratorConfig>();
        d.base_seed = j.at("base_seed").get<std::uint64_t>();
        for (const auto& s : j.at("samples")) {
            DatasetEntry e;
            e.path = s.at("path").get<std::string>();
            e.seed = s.at("seed").get<std::uint64_t>();
            e.split = s.at("split").get<std::string>();
            e.caption = s.value("caption", std::string{});
            e.unpaired_garment_seed = s.value("unpaired_garment_seed", std::uint64_t{0});
            d.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    d.config.validate();
    return d;
}

inline void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
    for (const auto& e : d.entries) {
        write_tensor_container(dir / e.path, sample_tensors(synth_sample(e.seed, d.config)));
    }
    write_file_bytes(dir / "manifest.json", dataset_manifest(d).dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
    const std::string text = read_file_bytes(dir / "manifest.json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    return parse_dataset_manifest(j);
}

// Loads the stored tensors; scene parameters are re-derived from the seed.
inline TryOnSample load_sample(const std::filesystem::path& dir, const Dataset& d, const DatasetEntry& e) {
    auto t = read_tensor_container(dir / e.path);
    TryOnSample s;
    try {
        s.person_video = std::move(t.at("person_video"));
        s.garment_image = std::move(t.at("garment_image"));
        s.agnostic_mask = std::move(t.at("agnostic_mask"));
        s.pose_map = std::move(t.at("pose_map"));
    } catch (const std::out_of_range&) {
        throw FormatError("sample container " + e.path + " is missing a tensor");
    }
    s.scene = sample_scene(e.seed, e.seed, d.config);
    s.caption = make_caption(s.scene->garment);
    const Shape want{d.config.frames, d.config.height, d.config.width, 3};
    if (s.person_video.shape() != want) {
        throw FormatError("sample " + e.path + " has shape " + shape_str(s.person_video.shape()));
    }
    return s;
}

}  // namespace tryon

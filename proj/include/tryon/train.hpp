#pragma once

// Teacher training with the mask-aware loss, checkpoint I/O and sampling
// glue between prepared samples and the denoiser.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryon/conditioning.hpp"
#include "tryon/container.hpp"
#include "tryon/data.hpp"
#include "tryon/diffusion.hpp"
#include "tryon/model.hpp"
#include "tryon/optim.hpp"
#include "tryon/parallel.hpp"

namespace tryon {

// A sample pushed through the frozen encoders once.
struct PreparedSample {
    Tensor<float> z0;            // [F, h, w, C_lat]
    Tensor<float> agnostic_lat;  // [F, h, w, C_lat]
    Tensor<float> pose_lat;      // [F, h, w, C_lat]
    MaskLatent mask;             // [F, h, w, 1]
    FrozenGarmentFeatures garment;
};

inline PreparedSample prepare_sample(const TryOnSample& s, const ToyVaeParams& vae, std::size_t channels) {
    PreparedSample p;
    p.z0 = toy_vae_encode(s.person_video, vae);
    p.agnostic_lat = toy_vae_encode(agnostic_video(s), vae);
    p.pose_lat = toy_vae_encode(s.pose_map, vae);
    p.mask = mask_to_latent(s.agnostic_mask, vae);
    p.garment = encode_garment_frozen(s.garment_image, s.caption, vae, channels);
    return p;
}

inline DenoiserInputs<float> denoiser_inputs(const PreparedSample& p, const Tensor<float>& noisy) {
    return {assemble_input(noisy, p.agnostic_lat, p.pose_lat, p.mask).x, p.garment.garment_latent,
            p.garment.line_latent, p.garment.txt_tokens, p.garment.clip_tokens};
}

inline void check_model_fits(const DenoiserConfig& cfg, const ToyVaeParams& vae) {
    if (cfg.latent_channels != vae.latent_channels || cfg.pose_channels != vae.latent_channels) {
        throw InvalidArgument("model latent/pose channels must equal the autoencoder's latent channels");
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters in a tensor container, config in a JSON sidecar.

inline std::string head_name(PredictionHead h) { return h == PredictionHead::epsilon ? "epsilon" : "clean"; }

inline PredictionHead parse_head(const std::string& s) {
    if (s == "epsilon") return PredictionHead::epsilon;
    if (s == "clean") return PredictionHead::clean;
    throw InvalidArgument("unknown prediction head '" + s + "'");
}

inline nlohmann::json model_config_json(const DenoiserConfig& c) {
    return {{"latent_channels", c.latent_channels}, {"pose_channels", c.pose_channels}, {"channels", c.channels},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"blocks", c.blocks},
            {"adapter_rank", c.adapter_rank},
            {"residual_gain", c.residual_gain},
            {"rope_base", c.rope_base},
            {"head", head_name(c.head)}};
}

inline DenoiserConfig parse_model_config(const nlohmann::json& j, DenoiserConfig c = {}) {
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.pose_channels = j.value("pose_channels", c.pose_channels);
    c.channels = j.value("channels", c.channels);
    c.heads = j.value("heads", c.heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.blocks = j.value("blocks", c.blocks);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.residual_gain = j.value("residual_gain", c.residual_gain);
    c.rope_base = j.value("rope_base", c.rope_base);
    if (j.contains("head")) {
        c.head = parse_head(j.at("head").get<std::string>());
    }
    c.validate();
    return c;
}

inline void save_checkpoint(const std::filesystem::path& stem, const Denoiser<float>& m) {
    TensorMap t;
    for (auto& [name, p] : const_cast<Denoiser<float>&>(m).named_params()) {
        t.emplace(name, *p);
    }
    write_tensor_container(stem.string() + ".tensors", t);
    write_file_bytes(stem.string() + ".json", model_config_json(m.cfg).dump(2) + "\n");
}

inline Denoiser<float> load_checkpoint(const std::filesystem::path& stem) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(stem.string() + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint config: " + std::string(e.what()));
    }
    auto m = Denoiser<float>::init(parse_model_config(j), 0);
    const auto t = read_tensor_container(stem.string() + ".tensors");
    for (auto& [name, p] : m.named_params()) {
        const auto it = t.find(name);
        if (it == t.end() || it->second.shape() != p->shape()) {
            throw FormatError("checkpoint " + stem.string() + ": missing or misshapen tensor " + name);
        }
        *p = it->second;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Teacher training.

struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch = 4;
    AdamWConfig optimizer{.lr = 1e-3};
    std::uint64_t seed = 1;
    std::size_t threads = 1;
};

struct LossRow {
    std::size_t iteration = 0;
    MaskedLoss loss;
};

// One draw of (t, eps) per batch element, taken sequentially so the result
// does not depend on the thread count.
struct NoiseDraw {
    std::size_t sample = 0;
    std::size_t t = 0;
    Tensor<float> eps;
};

// Mean masked loss over the batch; accumulates d(mean loss)/d(params).
// Per-sample gradients are reduced in batch order.
inline MaskedLoss teacher_batch_gradient(const Denoiser<float>& m, const std::vector<PreparedSample>& data,
                                         const std::vector<NoiseDraw>& draws, const NoiseSchedule& s,
                                         Denoiser<float>& grads, std::size_t threads = 1) {
    const std::size_t b = draws.size();
    std::vector<Denoiser<float>> per(b);
    std::vector<MaskedLoss> losses(b);
    parallel_for(b, threads, [&](std::size_t i) {
        const auto& d = draws[i];
        const PreparedSample& p = data.at(d.sample);
        const auto in = denoiser_inputs(p, add_noise(p.z0, d.t, d.eps, s));
        DenoiserCache<float> cache;
        const auto pred = denoiser_forward(m, in, d.t, s, &cache);
        losses[i] = masked_diffusion_loss(pred, d.eps, p.mask.m);
        Tensor<float> g = masked_diffusion_loss_grad(pred, d.eps, p.mask.m);
        g *= 1.0f / static_cast<float>(b);
        per[i] = m.zeros_like();
        denoiser_backward(m, in, g, cache, per[i]);
    });
    MaskedLoss mean;
    for (std::size_t i = 0; i < b; ++i) {
        accumulate(grads, per[i]);
        mean.total += losses[i].total / static_cast<double>(b);
        mean.masked_term += losses[i].masked_term / static_cast<double>(b);
        mean.unmasked_term += losses[i].unmasked_term / static_cast<double>(b);
    }
    return mean;
}

using LossCallback = std::function<void(const LossRow&)>;

inline std::vector<LossRow> train_teacher(Denoiser<float>& m, const std::vector<PreparedSample>& data,
                                          const TrainConfig& cfg, const NoiseSchedule& s,
                                          const LossCallback& on_step = {}) {
    require(!data.empty(), "train: empty dataset");
    require(cfg.iterations >= 1 && cfg.batch >= 1, "train: iterations and batch must be >= 1");
    Rng rng(mix_seed(cfg.seed, 0x7ea));
    AdamW<float> opt(cfg.optimizer);
    std::vector<LossRow> log;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::vector<NoiseDraw> draws(cfg.batch);
        for (auto& d : draws) {
            d.sample = rng.below(data.size());
            d.t = rng.below(s.steps);
            d.eps = rng.normal_tensor(data[d.sample].z0.shape());
        }
        auto grads = m.zeros_like();
        LossRow row{it, teacher_batch_gradient(m, data, draws, s, grads, cfg.threads)};
        try {
            opt.step(m.named_params(), grads.named_params());
        } catch (const NumericFailure& e) {
            throw NumericFailure(std::string("teacher training: ") + e.what(), static_cast<long>(it));
        }
        log.push_back(row);
        if (on_step) {
            on_step(row);
        }
    }
    return log;
}

inline std::string loss_csv(const std::vector<LossRow>& rows) {
    std::string out = "iteration,loss,masked_term,unmasked_term\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.iteration, r.loss.total, r.loss.masked_term,
                      r.loss.unmasked_term);
        out += buf;
    }
    return out;
}

// Mean of loss.total over rows[begin, end).
inline double mean_loss(const std::vector<LossRow>& rows, std::size_t begin, std::size_t end) {
    require(begin < end && end <= rows.size(), "mean_loss: bad range");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        s += rows[i].loss.total;
    }
    return s / static_cast<double>(end - begin);
}

// ---------------------------------------------------------------------------
// Sampling.

inline std::uint64_t sample_noise_seed(std::uint64_t seed, std::size_t index) { return mix_seed(seed ^ 0x5a3e, index); }

// Teacher DDIM in latent space; returns the clean latent video.
inline Tensor<float> teacher_sample(const Denoiser<float>& m, const PreparedSample& p, std::size_t steps,
                                    std::uint64_t seed, const NoiseSchedule& s, const DdimOptions& opt = {},
                                    const TrajectoryObserver<float>& observe = {}, std::size_t* nfe = nullptr) {
    if (m.cfg.head != PredictionHead::epsilon) {
        throw InvalidArgument("teacher sampling needs an epsilon-head model");
    }
    auto eps_model = [&](const Tensor<float>& x, std::size_t t) {
        if (nfe) {
            ++*nfe;
        }
        return denoiser_forward(m, denoiser_inputs(p, x), t, s);
    };
    return ddim_sample<float>(eps_model, p.z0.shape(), steps, seed, s, opt, observe);
}

}  // namespace tryon

#pragma once

// Variance-preserving noise schedule, model-input assembly, the mask-aware
// epsilon loss and the deterministic DDIM sampler.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "tryon/conditioning.hpp"
#include "tryon/rng.hpp"
#include "tryon/tensor.hpp"

namespace tryon {

struct NoiseSchedule {
    std::size_t steps = 0;           // T
    std::vector<double> alpha_bar;   // cumulative signal coefficient per step
    std::vector<double> sigma;       // sqrt(1 - alpha_bar)

    double signal(std::size_t t) const { return std::sqrt(alpha_bar.at(t)); }
    double noise(std::size_t t) const { return sigma.at(t); }
};

inline constexpr double kAlphaBarMin = 1e-6;
inline constexpr double kAlphaBarMax = 0.9999;

// Cosine schedule: alpha_bar_t = cos^2(((t/T + 0.008) / 1.008) * pi/2).
inline NoiseSchedule make_schedule(std::size_t steps) {
    if (steps < 2) {
        throw InvalidArgument("noise schedule needs T >= 2");
    }
    NoiseSchedule s;
    s.steps = steps;
    s.alpha_bar.resize(steps);
    s.sigma.resize(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        const double u = (static_cast<double>(t) / static_cast<double>(steps) + 0.008) / 1.008;
        const double c = std::cos(u * std::numbers::pi / 2.0);
        s.alpha_bar[t] = std::clamp(c * c, kAlphaBarMin, kAlphaBarMax);
        s.sigma[t] = std::sqrt(1.0 - s.alpha_bar[t]);
    }
    return s;
}

// z_t = sqrt(alpha_bar_t) z0 + sigma_t eps
template <class T>
Tensor<T> add_noise(const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
    if (t >= s.steps) {
        throw InvalidArgument("add_noise: timestep " + std::to_string(t) + " >= T");
    }
    if (z0.shape() != eps.shape()) {
        throw InvalidArgument("add_noise: noise shape differs from sample shape");
    }
    const double a = s.signal(t), b = s.noise(t);
    Tensor<T> out(z0.shape());
    for (std::size_t i = 0; i < z0.size(); ++i) {
        out[i] = static_cast<T>(a * z0[i] + b * eps[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Masks and input assembly.

struct MaskLatent {
    Tensor<float> m;  // [F, h, w, 1], values in {0, 1}
};

// s x s max-pool of a binary pixel mask.
inline MaskLatent mask_to_latent(const Tensor<float>& mask_img, const ToyVaeParams& vae) {
    if (mask_img.rank() != 4 || mask_img.dim(3) != 1) {
        throw InvalidArgument("mask_to_latent expects [F, H, W, 1]");
    }
    for (float v : mask_img.data()) {
        if (v != 0.0f && v != 1.0f) {
            throw InvalidArgument("mask_to_latent: mask must be binary");
        }
    }
    const std::size_t f = mask_img.dim(0), h = mask_img.dim(1), w = mask_img.dim(2), s = vae.factor;
    if (h % s != 0 || w % s != 0) {
        throw InvalidArgument("mask_to_latent: dims not divisible by the vae factor");
    }
    const std::size_t lh = h / s, lw = w / s;
    Tensor<float> out({f, lh, lw, 1});
    for (std::size_t fi = 0; fi < f; ++fi) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                if (mask_img[(fi * h + y) * w + x] == 1.0f) {
                    out[(fi * lh + y / s) * lw + x / s] = 1.0f;
                }
            }
        }
    }
    return {std::move(out)};
}

// Channel layout: noise | agnostic | pose | mask.
struct ModelInput {
    Tensor<float> x;  // [F, h, w, C_noise + C_agnostic + C_pose + 1]
    std::size_t noise_channels = 0;
    std::size_t agnostic_channels = 0;
    std::size_t pose_channels = 0;
};

inline ModelInput assemble_input(const Tensor<float>& noisy, const Tensor<float>& agnostic_lat,
                                 const Tensor<float>& pose_lat, const MaskLatent& mask_lat) {
    const auto& parts = std::array<const Tensor<float>*, 4>{&noisy, &agnostic_lat, &pose_lat, &mask_lat.m};
    for (auto* p : parts) {
        if (p->rank() != 4) {
            throw InvalidArgument("assemble_input: every part must be [F, h, w, C]");
        }
        for (std::size_t d = 0; d < 3; ++d) {
            if (p->dim(d) != noisy.dim(d)) {
                throw InvalidArgument("assemble_input: spatial/temporal dims disagree: " + shape_str(noisy.shape()) +
                                      " vs " + shape_str(p->shape()));
            }
        }
    }
    const std::size_t cells = noisy.dim(0) * noisy.dim(1) * noisy.dim(2);
    std::size_t total = 0;
    for (auto* p : parts) {
        total += p->dim(3);
    }
    ModelInput in;
    in.noise_channels = noisy.dim(3);
    in.agnostic_channels = agnostic_lat.dim(3);
    in.pose_channels = pose_lat.dim(3);
    in.x = Tensor<float>({noisy.dim(0), noisy.dim(1), noisy.dim(2), total});
    for (std::size_t i = 0; i < cells; ++i) {
        float* o = in.x.data().data() + i * total;
        for (auto* p : parts) {
            const std::size_t c = p->dim(3);
            std::copy_n(p->data().data() + i * c, c, o);
            o += c;
        }
    }
    return in;
}

// Copies channels [begin, end) out of a channels-last tensor.
template <class T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const std::size_t c = x.shape().back();
    if (begin >= end || end > c) {
        throw InvalidArgument("channel_slice out of range");
    }
    Shape sh = x.shape();
    sh.back() = end - begin;
    Tensor<T> out(sh);
    const std::size_t cells = x.size() / c, n = end - begin;
    for (std::size_t i = 0; i < cells; ++i) {
        std::copy_n(x.data().data() + i * c + begin, n, out.data().data() + i * n);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mask-aware loss: mean((pred - eps)^2) + mean((M * (pred - eps))^2).

struct MaskedLoss {
    double total = 0.0;
    double unmasked_term = 0.0;
    double masked_term = 0.0;
};

namespace detail {
template <class T>
void check_loss_shapes(const Tensor<T>& pred, const Tensor<T>& eps, const Tensor<T>& mask) {
    if (pred.shape() != eps.shape()) {
        throw InvalidArgument("masked loss: pred " + shape_str(pred.shape()) + " vs eps " + shape_str(eps.shape()));
    }
    if (mask.rank() != pred.rank() || mask.shape().back() != 1 || mask.size() * pred.shape().back() != pred.size()) {
        throw InvalidArgument("masked loss: mask " + shape_str(mask.shape()) + " does not broadcast over " +
                              shape_str(pred.shape()));
    }
}
}  // namespace detail

template <class T>
MaskedLoss masked_diffusion_loss(const Tensor<T>& pred, const Tensor<T>& eps, const Tensor<T>& mask) {
    detail::check_loss_shapes(pred, eps, mask);
    const std::size_t c = pred.shape().back();
    double plain = 0.0, masked = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(eps[i]);
        const double md = static_cast<double>(mask[i / c]) * d;
        plain += d * d;
        masked += md * md;
    }
    const double n = static_cast<double>(pred.size());
    return {plain / n + masked / n, plain / n, masked / n};
}

// d loss / d pred = (2/N) (pred - eps) (1 + M^2)
template <class T>
Tensor<T> masked_diffusion_loss_grad(const Tensor<T>& pred, const Tensor<T>& eps, const Tensor<T>& mask) {
    detail::check_loss_shapes(pred, eps, mask);
    const std::size_t c = pred.shape().back();
    const double scale = 2.0 / static_cast<double>(pred.size());
    Tensor<T> g(pred.shape());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double m = mask[i / c];
        g[i] = static_cast<T>(scale * (static_cast<double>(pred[i]) - static_cast<double>(eps[i])) * (1.0 + m * m));
    }
    return g;
}

// ---------------------------------------------------------------------------
// DDIM (eta = 0).

// `steps` evenly spaced timesteps over [0, T-1], endpoints included, ascending.
inline std::vector<std::size_t> sub_schedule(std::size_t train_steps, std::size_t steps) {
    if (steps < 1 || steps > train_steps) {
        throw InvalidArgument("sampler steps must lie in [1, T]");
    }
    if (steps == 1) {
        return {train_steps - 1};
    }
    std::vector<std::size_t> ts(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        ts[i] = static_cast<std::size_t>(
            std::llround(static_cast<double>(i) * static_cast<double>(train_steps - 1) / static_cast<double>(steps - 1)));
    }
    return ts;
}

// x0 implied by an epsilon prediction.
template <class T>
Tensor<T> predict_clean(const Tensor<T>& x_t, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& s) {
    const double a = s.signal(t), b = s.noise(t);
    Tensor<T> x0(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        x0[i] = static_cast<T>((static_cast<double>(x_t[i]) - b * eps[i]) / a);
    }
    return x0;
}

struct DdimOptions {
    double clip_x0 = 0.0;  // clamp predicted x0 to [-clip, clip]; 0 disables
};

// Called with (sub-schedule index, timestep, state) before each model call.
template <class T>
using TrajectoryObserver = std::function<void(std::size_t, std::size_t, const Tensor<T>&)>;

// eps_model(x_t, t) -> epsilon prediction. Runs from the last sub-schedule
// point down to the first and returns the x0 prediction made there.
template <class T, class EpsModel>
Tensor<T> ddim_sample_from(EpsModel&& eps_model, Tensor<T> x, std::size_t steps, const NoiseSchedule& s,
                           const DdimOptions& opt = {}, const TrajectoryObserver<T>& observe = {}) {
    const auto ts = sub_schedule(s.steps, steps);
    Tensor<T> x0;
    for (std::size_t n = ts.size(); n-- > 0;) {
        const std::size_t t = ts[n];
        if (observe) {
            observe(n, t, x);
        }
        const Tensor<T> eps = eps_model(static_cast<const Tensor<T>&>(x), t);
        if (!eps.all_finite()) {
            throw NumericFailure("ddim: non-finite epsilon prediction", static_cast<long>(ts.size() - 1 - n));
        }
        x0 = predict_clean(x, eps, t, s);
        if (opt.clip_x0 > 0.0) {
            for (auto& v : x0.data()) {
                v = static_cast<T>(std::clamp(static_cast<double>(v), -opt.clip_x0, opt.clip_x0));
            }
        }
        if (n == 0) {
            break;
        }
        const std::size_t tp = ts[n - 1];
        const double ap = s.signal(tp), bp = s.noise(tp);
        // Noise direction re-derived from the (possibly clipped) x0.
        const double a = s.signal(t), b = s.noise(t);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double e = opt.clip_x0 > 0.0 ? (static_cast<double>(x[i]) - a * x0[i]) / b : static_cast<double>(eps[i]);
            x[i] = static_cast<T>(ap * x0[i] + bp * e);
        }
        if (!x.all_finite()) {
            throw NumericFailure("ddim: non-finite state", static_cast<long>(ts.size() - n));
        }
    }
    return x0;
}

template <class T = float, class EpsModel>
Tensor<T> ddim_sample(EpsModel&& eps_model, const Shape& shape, std::size_t steps, std::uint64_t seed,
                      const NoiseSchedule& s, const DdimOptions& opt = {}, const TrajectoryObserver<T>& observe = {}) {
    Rng rng(seed);
    return ddim_sample_from<T>(std::forward<EpsModel>(eps_model), rng.normal_tensor<T>(shape), steps, s, opt, observe);
}

inline constexpr std::size_t kTeacherSteps = 20;

}  // namespace tryon

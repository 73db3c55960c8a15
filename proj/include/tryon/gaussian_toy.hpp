#pragma once

// Analytically solvable toy: data x0 ~ N(mu, s^2) independently per element.
// Under the VP forward process the noisy marginal stays Gaussian, so the
// exact epsilon predictor is affine in x_t and the probability-flow ODE has
// a closed-form solution. Used as an oracle for the samplers.

#include <cmath>
#include <cstddef>
#include <vector>

#include "tryon/diffusion.hpp"

namespace tryon::toy {

// Large enough that first-order DDIM over the full schedule is within 1e-3 of
// sampler_target for |x_T| <= 4 (error ~ 2.3 / steps at mu 0.7, s 0.4).
inline constexpr std::size_t kOracleSteps = 4000;

struct Gaussian {
    double mu = 0.0;
    double s = 1.0;

    // lambda_t = sigma_t / sqrt(alpha_bar_t); y = x / sqrt(alpha_bar_t).
    static double lambda(std::size_t t, const NoiseSchedule& sch) { return sch.noise(t) / sch.signal(t); }

    double marginal_var(std::size_t t, const NoiseSchedule& sch) const {
        return sch.alpha_bar[t] * s * s + sch.sigma[t] * sch.sigma[t];
    }

    // grad log p_t(x) = -(x - sqrt(ab) mu) / (ab s^2 + sigma^2)
    template <class T>
    Tensor<T> score(const Tensor<T>& x, std::size_t t, const NoiseSchedule& sch) const {
        Tensor<T> out(x.shape());
        const double m = sch.signal(t) * mu, v = marginal_var(t, sch);
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = static_cast<T>(-(x[i] - m) / v);
        }
        return out;
    }

    template <class T>
    Tensor<T> exact_eps(const Tensor<T>& x, std::size_t t, const NoiseSchedule& sch) const {
        Tensor<T> out = score(x, t, sch);
        out *= static_cast<T>(-sch.noise(t));
        return out;
    }

    // Flow map between noise levels lambda_a -> lambda_b in y coordinates:
    // y_b - mu = (y_a - mu) sqrt(s^2 + lambda_b^2) / sqrt(s^2 + lambda_a^2).
    template <class T>
    Tensor<T> flow(const Tensor<T>& x, std::size_t from, std::size_t to, const NoiseSchedule& sch) const {
        const double ra = sch.signal(from), rb = sch.signal(to);
        const double la = lambda(from, sch), lb = lambda(to, sch);
        const double k = std::sqrt(s * s + lb * lb) / std::sqrt(s * s + la * la);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = static_cast<T>(rb * (mu + (x[i] / ra - mu) * k));
        }
        return out;
    }

    // Clean endpoint (lambda = 0) of the flow started at x_t.
    template <class T>
    Tensor<T> ode_endpoint(const Tensor<T>& x, std::size_t from, const NoiseSchedule& sch) const {
        const double ra = sch.signal(from), la = lambda(from, sch);
        const double k = s / std::sqrt(s * s + la * la);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = static_cast<T>(mu + (x[i] / ra - mu) * k);
        }
        return out;
    }
};

// What an exact sampler returns: the flow from `from` down to t = 0, then the
// clean prediction there. alpha_bar_0 < 1, so this differs from ode_endpoint
// by a fixed O(lambda_0^2) bias that no step count removes.
template <class T>
Tensor<T> sampler_target(const Gaussian& g, const Tensor<T>& x, std::size_t from, const NoiseSchedule& sch) {
    const Tensor<T> x_0 = g.flow(x, from, 0, sch);
    return predict_clean(x_0, g.exact_eps(x_0, 0, sch), 0, sch);
}

// The clean-latent prediction at timestep t_k whose deterministic re-noising to
// t_n (via the implied noise) lands exactly on `target`.
template <class T>
Tensor<T> clean_for_renoise_target(const Tensor<T>& x, const Tensor<T>& target, std::size_t tk, std::size_t tn,
                                   const NoiseSchedule& sch) {
    const double ak = sch.signal(tk), sk = sch.noise(tk), an = sch.signal(tn), sn = sch.noise(tn);
    const double denom = an - sn * ak / sk;
    if (std::abs(denom) < 1e-12) {
        throw InvalidArgument("re-noise target: source and destination noise levels coincide");
    }
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<T>((target[i] - (sn / sk) * x[i]) / denom);
    }
    return out;
}

}  // namespace tryon::toy

#pragma once

// AdamW over a named parameter list.

#include <cmath>
#include <vector>

#include "tryon/attention.hpp"

namespace tryon {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  // global L2 norm; 0 disables
};

template <class T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // params and grads must come from named_params() of structurally equal
    // models. Returns the pre-clip global gradient norm.
    double step(NamedParams<T> params, NamedParams<T> grads) {
        if (params.size() != grads.size()) {
            throw InvalidArgument("adamw: parameter/gradient lists differ in length");
        }
        if (m_.empty()) {
            for (auto& [name, p] : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw InvalidState("adamw: parameter list changed between steps");
        }
        double sq = 0.0;
        for (auto& [name, g] : grads) {
            for (T v : g->data()) {
                sq += static_cast<double>(v) * static_cast<double>(v);
            }
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) {
            throw NumericFailure("adamw: non-finite gradient", static_cast<long>(t_));
        }
        const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = *params[k].second;
            const auto& g = *grads[k].second;
            if (p.shape() != g.shape()) {
                throw InvalidArgument("adamw: shape mismatch for " + params[k].first);
            }
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = clip * static_cast<double>(g[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
                const double pi = static_cast<double>(p[i]) * (1.0 - cfg_.lr * cfg_.weight_decay);
                p[i] = static_cast<T>(pi - cfg_.lr * upd);
            }
        }
        return norm;
    }

    std::size_t steps() const { return t_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace tryon

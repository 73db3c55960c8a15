#pragma once

// Spatiotemporal rotary position embedding with an optional garment slot.
//
// Tokens are flattened t-major (t, then x, then y). When the grid carries a
// garment slot, t = 0 is the garment plane and video frame f sits at t = f+1,
// so the garment tokens form a contiguous prefix of H*W rows.

#include <cmath>
#include <cstddef>
#include <vector>

#include "tryon/tensor.hpp"

namespace tryon {

struct GridPosition {
    std::size_t t = 0;
    std::size_t x = 0;
    std::size_t y = 0;
};

struct PositionGrid {
    std::size_t frames = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t garment_slots = 0;

    PositionGrid() = default;
    PositionGrid(std::size_t f, std::size_t h, std::size_t w, std::size_t g = 0)
        : frames(f), height(h), width(w), garment_slots(g) {
        if (f < 1 || h < 1 || w < 1) {
            throw InvalidArgument("position grid dims must be >= 1");
        }
        if (g > 1) {
            throw InvalidArgument("at most one garment slot is supported");
        }
    }

    std::size_t plane() const noexcept { return height * width; }
    std::size_t time_extent() const noexcept { return frames + garment_slots; }
    std::size_t seq_len() const noexcept { return time_extent() * plane(); }

    std::size_t flat_index(const GridPosition& p) const noexcept { return (p.t * height + p.x) * width + p.y; }

    GridPosition position(std::size_t flat) const noexcept {
        const std::size_t t = flat / plane();
        const std::size_t rem = flat % plane();
        return {t, rem / width, rem % width};
    }

    bool operator==(const PositionGrid&) const = default;
};

inline PositionGrid extend_grid_for_garment(const PositionGrid& grid) {
    if (grid.garment_slots != 0) {
        throw InvalidState("grid already carries a garment slot");
    }
    PositionGrid g = grid;
    g.garment_slots = 1;
    return g;
}

enum class RopeAxis { temporal, row, column };

struct RopeFrequencies {
    std::size_t pairs = 0;
    std::size_t pairs_t = 0;
    std::size_t pairs_x = 0;
    std::size_t pairs_y = 0;
    std::vector<double> omega_t;
    std::vector<double> omega_x;
    std::vector<double> omega_y;

    std::size_t head_dim() const noexcept { return 2 * pairs; }

    // Temporal pairs come first, then row pairs, then column pairs.
    RopeAxis axis(std::size_t k) const noexcept {
        if (k < pairs_t) {
            return RopeAxis::temporal;
        }
        return k < pairs_t + pairs_x ? RopeAxis::row : RopeAxis::column;
    }

    double omega(std::size_t k) const noexcept {
        if (k < pairs_t) {
            return omega_t[k];
        }
        if (k < pairs_t + pairs_x) {
            return omega_x[k - pairs_t];
        }
        return omega_y[k - pairs_t - pairs_x];
    }
};

inline RopeFrequencies build_rope_frequencies(std::size_t head_dim, double base = 10000.0) {
    if (head_dim % 2 != 0 || head_dim < 6) {
        throw InvalidArgument("rope head_dim must be even and >= 6, got " + std::to_string(head_dim));
    }
    if (!(base > 1.0)) {
        throw InvalidArgument("rope base must exceed 1");
    }
    RopeFrequencies f;
    f.pairs = head_dim / 2;
    f.pairs_x = f.pairs / 3;
    f.pairs_y = f.pairs / 3;
    f.pairs_t = f.pairs - 2 * (f.pairs / 3);
    auto axis_block = [base](std::size_t n) {
        std::vector<double> w(n);
        for (std::size_t j = 0; j < n; ++j) {
            w[j] = std::pow(base, -static_cast<double>(j) / static_cast<double>(n));
        }
        return w;
    };
    f.omega_t = axis_block(f.pairs_t);
    f.omega_x = axis_block(f.pairs_x);
    f.omega_y = axis_block(f.pairs_y);
    return f;
}

// theta_k(p) = w_t t + w_x x + w_y y, where only the axis owning pair k has a
// nonzero frequency.
inline double rotation_angle(const RopeFrequencies& freqs, const GridPosition& p, std::size_t k) {
    if (k >= freqs.pairs) {
        throw InvalidArgument("rope pair index out of range");
    }
    switch (freqs.axis(k)) {
        case RopeAxis::temporal:
            return freqs.omega(k) * static_cast<double>(p.t);
        case RopeAxis::row:
            return freqs.omega(k) * static_cast<double>(p.x);
        case RopeAxis::column:
            return freqs.omega(k) * static_cast<double>(p.y);
    }
    return 0.0;
}

// cos/sin of every (position, pair) angle for one grid.
struct RopeTable {
    std::size_t pairs = 0;
    std::vector<double> cos;
    std::vector<double> sin;

    RopeTable(const PositionGrid& grid, const RopeFrequencies& freqs) : pairs(freqs.pairs) {
        const std::size_t n = grid.seq_len();
        cos.resize(n * pairs);
        sin.resize(n * pairs);
        for (std::size_t i = 0; i < n; ++i) {
            const auto p = grid.position(i);
            for (std::size_t k = 0; k < pairs; ++k) {
                const double a = rotation_angle(freqs, p, k);
                cos[i * pairs + k] = std::cos(a);
                sin[i * pairs + k] = std::sin(a);
            }
        }
    }
};

// Rotates channel pairs (2k, 2k+1) of each head in place. Rows of `x` are
// tokens; each row holds heads * head_dim channels. sign = -1 applies the
// inverse rotation, which is also the adjoint used by backward passes.
template <class T>
void rotate_rows(Tensor<T>& x, std::size_t heads, const RopeTable& table, double sign = 1.0) {
    const std::size_t hd = 2 * table.pairs;
    if (x.cols() != heads * hd) {
        throw InvalidArgument("rope channel count " + std::to_string(x.cols()) + " != heads*head_dim " +
                              std::to_string(heads * hd));
    }
    if (x.rows() * table.pairs != table.cos.size()) {
        throw InvalidArgument("rope sequence length " + std::to_string(x.rows()) + " does not match grid");
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        const double* c = table.cos.data() + i * table.pairs;
        const double* s = table.sin.data() + i * table.pairs;
        for (std::size_t h = 0; h < heads; ++h) {
            T* v = r.data() + h * hd;
            for (std::size_t k = 0; k < table.pairs; ++k) {
                const double a = v[2 * k], b = v[2 * k + 1];
                const double sn = sign * s[k];
                v[2 * k] = static_cast<T>(c[k] * a - sn * b);
                v[2 * k + 1] = static_cast<T>(sn * a + c[k] * b);
            }
        }
    }
}

// tokens: [L', heads, head_dim] in t-major order.
template <class T>
Tensor<T> apply_rope(const Tensor<T>& tokens, const PositionGrid& grid, const RopeFrequencies& freqs,
                     double sign = 1.0) {
    if (tokens.rank() != 3) {
        throw InvalidArgument("apply_rope expects [L', heads, head_dim]");
    }
    if (tokens.dim(0) != grid.seq_len()) {
        throw InvalidArgument("apply_rope: token count " + std::to_string(tokens.dim(0)) + " != grid length " +
                              std::to_string(grid.seq_len()));
    }
    if (tokens.dim(2) != freqs.head_dim()) {
        throw InvalidArgument("apply_rope: head_dim does not match frequencies");
    }
    const std::size_t heads = tokens.dim(1);
    Tensor<T> flat = tokens.reshaped({tokens.dim(0), heads * tokens.dim(2)});
    rotate_rows(flat, heads, RopeTable(grid, freqs), sign);
    return flat.reshaped(tokens.shape());
}

// [H*W, C] garment plane followed by [F*H*W, C] frame tokens.
template <class T>
Tensor<T> prepend_garment_token(const Tensor<T>& input_tokens, const Tensor<T>& garment_tokens,
                                std::size_t plane) {
    if (garment_tokens.rows() != plane) {
        throw InvalidArgument("garment token count " + std::to_string(garment_tokens.rows()) + " != H*W " +
                              std::to_string(plane));
    }
    if (input_tokens.rows() % plane != 0) {
        throw InvalidArgument("input token count is not a multiple of H*W");
    }
    return concat_rows(garment_tokens, input_tokens);
}

}  // namespace tryon

#pragma once

// Dense row-major tensors and the handful of kernels the model needs.
//
// Storage is contiguous; element type is a template parameter so that the
// same model code can run in float (training) or double (gradient checks).
// Reductions accumulate in double regardless of the element type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tryon/errors.hpp"

namespace tryon {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <class T = float>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_size(shape_)) {
            throw InvalidArgument("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                  shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // Rank-2 accessors; callers are expected to have checked the rank.
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : data_.size() / shape_[0]; }
    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw InvalidArgument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    Tensor& fill(T v) {
        std::fill(data_.begin(), data_.end(), v);
        return *this;
    }

    Tensor& operator+=(const Tensor& o) {
        check_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += o.data_[i];
        }
        return *this;
    }

    Tensor& operator-=(const Tensor& o) {
        check_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] -= o.data_[i];
        }
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data_) {
            v *= s;
        }
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, T s) { return a *= s; }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

private:
    void check_shape() const {
        for (auto d : shape_) {
            if (d == 0) {
                throw InvalidArgument("tensor shape entries must be >= 1, got " + shape_str(shape_));
            }
        }
    }

    void check_same(const Tensor& o, const char* op) const {
        if (shape_ != o.shape_) {
            throw InvalidArgument(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) + " vs " +
                                  shape_str(o.shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Matrix products. All operands are rank-2 views (rows x cols).

// A[N,K] * B[K,M]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k) {
        throw InvalidArgument("matmul inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor<T> out({n, m});
    std::vector<double> acc(m);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* ar = a.data().data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) {
                continue;
            }
            const T* br = b.data().data() + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                acc[j] += av * static_cast<double>(br[j]);
            }
        }
        T* orow = out.data().data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            orow[j] = static_cast<T>(acc[j]);
        }
    }
    return out;
}

// A[K,N]^T * B[K,M] -> [N,M]; the weight-gradient product.
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
    if (b.rows() != k) {
        throw InvalidArgument("matmul_tn inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> acc(n * m, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const T* ar = a.data().data() + p * n;
        const T* br = b.data().data() + p * m;
        for (std::size_t i = 0; i < n; ++i) {
            const double av = ar[i];
            if (av == 0.0) {
                continue;
            }
            double* orow = acc.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += av * static_cast<double>(br[j]);
            }
        }
    }
    return Tensor<T>({n, m}, std::vector<T>(acc.begin(), acc.end()));
}

// A[N,K] * B[M,K]^T -> [N,M]; the input-gradient product.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    if (b.cols() != k) {
        throw InvalidArgument("matmul_nt inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const T* ar = a.data().data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const T* br = b.data().data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += static_cast<double>(ar[p]) * static_cast<double>(br[p]);
            }
            out.at(i, j) = static_cast<T>(s);
        }
    }
    return out;
}

// Adds bias[M] to every row of x[N,M].
template <class T>
void add_row_bias(Tensor<T>& x, const Tensor<T>& bias) {
    const std::size_t m = x.cols();
    if (bias.size() != m) {
        throw InvalidArgument("bias length " + std::to_string(bias.size()) + " != " + std::to_string(m));
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < m; ++j) {
            r[j] += bias[j];
        }
    }
}

// Column sums of x[N,M] -> [M].
template <class T>
Tensor<T> sum_rows(const Tensor<T>& x) {
    const std::size_t m = x.cols();
    std::vector<double> acc(m, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < m; ++j) {
            acc[j] += r[j];
        }
    }
    return Tensor<T>({m}, std::vector<T>(acc.begin(), acc.end()));
}

// Row-concatenation of [Na,C] and [Nb,C].
template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) {
        throw InvalidArgument("concat_rows channel mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> d;
    d.reserve(a.size() + b.size());
    d.insert(d.end(), a.vec().begin(), a.vec().end());
    d.insert(d.end(), b.vec().begin(), b.vec().end());
    return Tensor<T>({a.rows() + b.rows(), a.cols()}, std::move(d));
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.rows()) {
        throw InvalidArgument("slice_rows out of range");
    }
    const std::size_t c = x.cols();
    return Tensor<T>({end - begin, c}, std::vector<T>(x.vec().begin() + begin * c, x.vec().begin() + end * c));
}

template <class T>
double dot(std::span<const T> a, std::span<const T> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return s;
}

template <class T>
double sum(const Tensor<T>& x) {
    double s = 0.0;
    for (auto v : x.data()) {
        s += v;
    }
    return s;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument("max_abs_diff shape mismatch");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Softmax along an arbitrary axis, stabilized by max subtraction.

template <class T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis) {
    if (axis >= logits.rank()) {
        throw InvalidArgument("softmax axis " + std::to_string(axis) + " out of range for rank " +
                              std::to_string(logits.rank()));
    }
    const auto& sh = logits.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= sh[i];
    }
    for (std::size_t i = axis + 1; i < sh.size(); ++i) {
        inner *= sh[i];
    }
    const std::size_t n = sh[axis];
    Tensor<T> out(sh);
    std::vector<double> buf(n);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                mx = std::max(mx, static_cast<double>(logits[base + j * inner]));
            }
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                buf[j] = std::exp(static_cast<double>(logits[base + j * inner]) - mx);
                z += buf[j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                out[base + j * inner] = static_cast<T>(buf[j] / z);
            }
        }
    }
    return out;
}

// In-place softmax of a contiguous row.
template <class T>
void softmax_row(std::span<T> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : row) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double z = 0.0;
    for (auto& v : row) {
        const double e = std::exp(static_cast<double>(v) - mx);
        v = static_cast<T>(e);
        z += e;
    }
    const double inv = 1.0 / z;
    for (auto& v : row) {
        v = static_cast<T>(static_cast<double>(v) * inv);
    }
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis.

template <class T>
struct LayerNormCache {
    Tensor<T> xhat;          // normalized input, before gain/bias
    std::vector<double> rstd;  // 1/sqrt(var + eps) per row
};

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                     LayerNormCache<T>* cache = nullptr) {
    const std::size_t c = x.rank() == 0 ? 0 : x.shape().back();
    if (gain.size() != c || bias.size() != c) {
        throw InvalidArgument("layer_norm gain/bias size must match last axis " + std::to_string(c));
    }
    if (eps < 0.0) {
        throw InvalidArgument("layer_norm eps must be non-negative");
    }
    const std::size_t rows = x.size() / c;
    Tensor<T> out(x.shape());
    if (cache) {
        cache->xhat = Tensor<T>(x.shape());
        cache->rstd.assign(rows, 0.0);
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            mean += xr[j];
        }
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        if (var + eps <= 0.0) {
            throw NumericFailure("layer_norm: zero variance with eps = 0");
        }
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (xr[j] - mean) * rstd;
            out[r * c + j] = static_cast<T>(xh * gain[j] + bias[j]);
            if (cache) {
                cache->xhat[r * c + j] = static_cast<T>(xh);
            }
        }
        if (cache) {
            cache->rstd[r] = rstd;
        }
    }
    return out;
}

// Returns dx; accumulates into dgain/dbias.
template <class T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& gain, const LayerNormCache<T>& cache,
                              Tensor<T>& dgain, Tensor<T>& dbias) {
    const std::size_t c = gain.size();
    const std::size_t rows = dy.size() / c;
    Tensor<T> dx(dy.shape());
    std::vector<double> g(c);
    for (std::size_t r = 0; r < rows; ++r) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = dy[r * c + j];
            const double xh = cache.xhat[r * c + j];
            dgain[j] += static_cast<T>(d * xh);
            dbias[j] += static_cast<T>(d);
            g[j] = d * gain[j];
            sum_g += g[j];
            sum_gx += g[j] * xh;
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = cache.xhat[r * c + j];
            dx[r * c + j] = static_cast<T>(cache.rstd[r] * (g[j] - inv_c * sum_g - xh * inv_c * sum_gx));
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation.

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        y[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + 0.044715 * v * v * v))));
    }
    return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& dy, const Tensor<T>& x) {
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double u = detail::kGeluC * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double du = detail::kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        dx[i] = static_cast<T>(dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Numerical verification.

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central differences of a scalar function, one coordinate at a time.
template <class T, class F>
Tensor<T> finite_diff_gradient(F&& f, const Tensor<T>& x, double h) {
    if (!(h >= 1e-5 && h <= 1e-2)) {
        throw InvalidArgument("finite_diff_gradient step must lie in [1e-5, 1e-2]");
    }
    const double f0 = static_cast<double>(f(x));
    if (!std::isfinite(f0)) {
        throw NumericFailure("finite_diff_gradient: f(x) is not finite");
    }
    Tensor<T> grad(x.shape());
    Tensor<T> xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = xp[i];
        xp[i] = static_cast<T>(orig + h);
        const double fp = static_cast<double>(f(xp));
        xp[i] = static_cast<T>(orig - h);
        const double fm = static_cast<double>(f(xp));
        xp[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericFailure("finite_diff_gradient: non-finite f at coordinate " + std::to_string(i));
        }
        grad[i] = static_cast<T>((fp - fm) / (2.0 * h));
    }
    return grad;
}

// Relative error |a - n| / max(|a|, |n|, floor), worst element reported.
template <class T>
GradCheckReport compare_gradients(const Tensor<T>& analytic, const Tensor<T>& numeric, double floor = 1e-8) {
    if (analytic.shape() != numeric.shape()) {
        throw InvalidArgument("compare_gradients shape mismatch");
    }
    GradCheckReport rep;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        const double rel = std::abs(a - n) / denom;
        if (rel > rep.max_rel_error || i == 0) {
            rep = {rel, i, a, n};
        }
    }
    return rep;
}

}  // namespace tryon

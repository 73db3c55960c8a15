#include <gtest/gtest.h>

#include <cmath>

#include "tryon/rng.hpp"
#include "tryon/tensor.hpp"

using namespace tryon;

TEST(Softmax, UniformOverEqualLogits) {
    const Tensor<float> p = softmax(Tensor<float>({3}, 0.0f), 0);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-7);
    }
}

TEST(Softmax, ClosedFormTwoLogits) {
    const Tensor<float> p = softmax(Tensor<float>({2}, {std::log(2.0f), 0.0f}), 0);
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-6);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-6);
}

TEST(Softmax, LargeLogitMatchesDoublePrecision) {
    const Tensor<float> p = softmax(Tensor<float>({2}, {1000.0f, 0.0f}), 0);
    // exp(-1000) underflows in double as well; reference is (1, 0).
    const double ref0 = 1.0 / (1.0 + std::exp(-1000.0));
    EXPECT_NEAR(p[0], ref0, 1e-6);
    EXPECT_NEAR(p[1], 1.0 - ref0, 1e-6);
    EXPECT_TRUE(p.all_finite());
}

TEST(Softmax, AxisOutOfRangeThrows) {
    EXPECT_THROW(softmax(Tensor<float>({2, 2}), 2), InvalidArgument);
}

TEST(Softmax, SimplexAndShiftInvarianceOnRandomSlices) {
    Rng rng(3);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const Tensor<float> x = rng.normal_tensor({3, 4, 5}, 3.0);
        Tensor<float> shifted = x;
        for (auto& v : shifted.data()) {
            v += 17.25f;
        }
        const Tensor<float> p = softmax(x, axis);
        const Tensor<float> q = softmax(shifted, axis);
        EXPECT_LE(max_abs_diff(p, q), 1e-6);
        const Shape& sh = x.shape();
        std::size_t stride = 1;
        for (std::size_t d = axis + 1; d < 3; ++d) {
            stride *= sh[d];
        }
        const std::size_t n = sh[axis];
        for (std::size_t base = 0; base < p.size(); ++base) {
            if ((base / stride) % n != 0) {
                continue;
            }
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const float v = p[base + j * stride];
                EXPECT_GE(v, 0.0f);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(LayerNorm, ConstantVectorGivesZeros) {
    const Tensor<float> x({1, 4}, 2.5f);
    const Tensor<float> y = layer_norm(x, Tensor<float>({4}, 1.0f), Tensor<float>({4}), 1e-5);
    for (float v : y.data()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(LayerNorm, AlreadyStandardizedWithZeroEps) {
    const Tensor<float> x({1, 2}, {1.0f, -1.0f});
    const Tensor<float> y = layer_norm(x, Tensor<float>({2}, 1.0f), Tensor<float>({2}), 0.0);
    EXPECT_FLOAT_EQ(y[0], 1.0f);
    EXPECT_FLOAT_EQ(y[1], -1.0f);
}

TEST(LayerNorm, RandomRowsAreStandardized) {
    Rng rng(5);
    const Tensor<float> x = rng.normal_tensor({6, 64}, 4.0);
    const Tensor<float> y = layer_norm(x, Tensor<float>({64}, 1.0f), Tensor<float>({64}), 1e-8);
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0.0, v = 0.0;
        for (float e : y.row(r)) {
            m += e;
        }
        m /= 64.0;
        for (float e : y.row(r)) {
            v += (e - m) * (e - m);
        }
        v /= 64.0;
        EXPECT_NEAR(m, 0.0, 1e-4);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(LayerNorm, SizeMismatchThrows) {
    EXPECT_THROW(layer_norm(Tensor<float>({2, 3}), Tensor<float>({2}), Tensor<float>({3}), 1e-5), InvalidArgument);
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
    Rng rng(9);
    const Tensor<double> x = rng.normal_tensor<double>({3, 8});
    const Tensor<double> gain = rng.normal_tensor<double>({8});
    const Tensor<double> bias = rng.normal_tensor<double>({8});
    const Tensor<double> w = rng.normal_tensor<double>({3, 8});
    auto f = [&](const Tensor<double>& xi) {
        const auto y = layer_norm(xi, gain, bias, 1e-5);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            s += y[i] * w[i];
        }
        return s;
    };
    LayerNormCache<double> cache;
    layer_norm(x, gain, bias, 1e-5, &cache);
    Tensor<double> dg({8}), db({8});
    const Tensor<double> dx = layer_norm_backward(w, gain, cache, dg, db);
    const auto rep = compare_gradients(dx, finite_diff_gradient(f, x, 1e-5));
    EXPECT_LE(rep.max_rel_error, 1e-3);
}

TEST(Gelu, BackwardMatchesFiniteDifferences) {
    Rng rng(10);
    const Tensor<double> x = rng.normal_tensor<double>({20}, 2.0);
    auto f = [](const Tensor<double>& xi) { return sum(gelu(xi)); };
    const Tensor<double> dx = gelu_backward(Tensor<double>({20}, 1.0), x);
    EXPECT_LE(compare_gradients(dx, finite_diff_gradient(f, x, 1e-5)).max_rel_error, 1e-3);
}

TEST(FiniteDiff, SumOfSquares) {
    const Tensor<double> x({2}, {1.0, 2.0});
    auto f = [](const Tensor<double>& v) { return v[0] * v[0] + v[1] * v[1]; };
    const Tensor<double> g = finite_diff_gradient(f, x, 1e-3);
    EXPECT_NEAR(g[0], 2.0, 1e-4);
    EXPECT_NEAR(g[1], 4.0, 1e-4);
}

TEST(FiniteDiff, ConstantGivesZeros) {
    const Tensor<float> x({5}, 1.0f);
    const Tensor<float> g = finite_diff_gradient([](const Tensor<float>&) { return 3.0; }, x, 1e-3);
    for (float v : g.data()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(FiniteDiff, RejectsBadStepAndNonFinite) {
    const Tensor<float> x({1}, 1.0f);
    auto f = [](const Tensor<float>&) { return 0.0; };
    EXPECT_THROW(finite_diff_gradient(f, x, 1e-6), InvalidArgument);
    EXPECT_THROW(finite_diff_gradient(f, x, 0.1), InvalidArgument);
    auto bad = [](const Tensor<float>&) { return std::nan(""); };
    EXPECT_THROW(finite_diff_gradient(bad, x, 1e-3), NumericFailure);
}

TEST(CompareGradients, ReportsWorstElement) {
    const Tensor<double> a({3}, {1.0, 2.0, 3.0});
    const Tensor<double> n({3}, {1.0, 2.2, 3.0});
    const auto rep = compare_gradients(a, n);
    EXPECT_EQ(rep.worst_index, 1u);
    EXPECT_NEAR(rep.max_rel_error, 0.2 / 2.2, 1e-12);
    EXPECT_GE(rep.max_rel_error, 0.0);
}

TEST(Tensor, ShapeContract) {
    EXPECT_THROW(Tensor<float>({2, 0}), InvalidArgument);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), InvalidArgument);
    const Tensor<float> t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_THROW(t.reshaped({4}), InvalidArgument);
    EXPECT_THROW(matmul(Tensor<float>({2, 3}), Tensor<float>({2, 3})), InvalidArgument);
}

TEST(Tensor, MatmulVariantsAgree) {
    Rng rng(1);
    const auto a = rng.normal_tensor<double>({4, 3});
    const auto b = rng.normal_tensor<double>({3, 5});
    const auto ab = matmul(a, b);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                s += a.at(i, k) * b.at(k, j);
            }
            EXPECT_NEAR(ab.at(i, j), s, 1e-12);
        }
    }
    Tensor<double> bt({5, 3}), at({3, 4});
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            bt.at(j, i) = b.at(i, j);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            at.at(i, j) = a.at(j, i);
        }
    }
    EXPECT_LE(max_abs_diff(matmul_nt(a, bt), ab), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_tn(at, b), ab), 1e-12);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.normal(), b.normal());
    }
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

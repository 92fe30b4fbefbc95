#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hma/hma.hpp"
#include "oracles.hpp"

using namespace hma;

namespace {

Tensor<double> run_unary(const Tensor<double>& x, Var (*op)(Tape<double>&, Var)) {
    Tape<double> t;
    return t.value(op(t, t.constant(x)));
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
    EXPECT_THROW(Tensor<double>(Shape{}), ShapeError);
    EXPECT_THROW(Tensor<double>({1, 2, 3, 4, 5}), ShapeError);
    EXPECT_THROW(Tensor<double>({2, 0}), ShapeError);
    EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor<double> ok({2, 3, 4});
    EXPECT_EQ(ok.size(), 24u);
}

TEST(Matmul, IdentityLeavesOperand) {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(kernels::matmul(eye, a), a);
}

TEST(Matmul, HandArithmetic) {
    auto c = kernels::matmul(Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4}));
    ASSERT_EQ(c.dims(), (Shape{1, 1}));
    EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopExactly) {
    Rng rng(11);
    auto a = random_normal<double>({5, 7}, rng);
    auto b = random_normal<double>({7, 3}, rng);
    EXPECT_EQ(kernels::matmul(a, b), oracle::matmul(a, b));
}

TEST(Matmul, AgreesWithOracleOnSmallDims) {
    Rng rng(12);
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t m = rng.range(1, 8), k = rng.range(1, 8), n = rng.range(1, 8);
        auto a = random_normal<double>({m, k}, rng);
        auto b = random_normal<double>({k, n}, rng);
        EXPECT_EQ(kernels::matmul(a, b), oracle::matmul(a, b));
    }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    EXPECT_THROW(kernels::matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError);
}

TEST(Softmax, SymmetricInput) {
    auto y = kernels::softmax_axis(Tensor<double>({2}, {0, 0}), 0);
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, LogInputs) {
    auto y = kernels::softmax_axis(Tensor<double>({2}, {std::log(1.0), std::log(3.0)}), 0);
    EXPECT_NEAR(y[0], 0.25, 1e-15);
    EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, LargeEqualInputsDoNotOverflow) {
    auto y = kernels::softmax_axis(Tensor<double>({2}, {1000, 1000}), 0);
    EXPECT_EQ(y[0], 0.5);
    EXPECT_EQ(y[1], 0.5);
}

TEST(Softmax, SlicesSumToOneAndArePositive) {
    Rng rng(3);
    auto x = random_normal<double>({2, 3, 4, 5}, rng, 4.0);
    for (std::size_t axis = 0; axis < 4; ++axis) {
        auto y = kernels::softmax_axis(x, axis);
        const auto s = kernels::split_at(x.dims(), axis);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t in = 0; in < s.inner; ++in) {
                double sum = 0;
                for (std::size_t e = 0; e < s.extent; ++e) {
                    const double v = y[o * s.extent * s.inner + e * s.inner + in];
                    EXPECT_GT(v, 0.0);
                    sum += v;
                }
                EXPECT_NEAR(sum, 1.0, 1e-6);
            }
    }
}

TEST(Activation, Relu) {
    auto y = run_unary(Tensor<double>({2}, {-1, 2}), [](Tape<double>& t, Var x) { return ag::relu(t, x); });
    EXPECT_EQ(y, Tensor<double>({2}, {0, 2}));
}

TEST(Activation, SigmoidAtZero) {
    auto y = run_unary(Tensor<double>({1}, {0}), [](Tape<double>& t, Var x) { return ag::sigmoid(t, x); });
    EXPECT_EQ(y[0], 0.5);
}

TEST(Activation, SigmoidSaturatesWithoutNan) {
    auto y = run_unary(Tensor<double>({2}, {-500, 500}), [](Tape<double>& t, Var x) { return ag::sigmoid(t, x); });
    for (double v : y.data()) {
        EXPECT_FALSE(std::isnan(v));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(y[1], 1.0);
}

TEST(Conv2d, IdentityPointwiseWeights) {
    Rng rng(5);
    auto x = random_normal<double>({2, 3, 4, 5}, rng);
    Tensor<double> w({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1;
    EXPECT_EQ(kernels::conv2d<double>(x, w, nullptr, {1, 0}), x);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
    Tensor<double> x({1, 1, 3, 3});
    x.at(0, 0, 1, 1) = 1;  // one-hot centre
    Tensor<double> w({1, 1, 3, 3}, 1.0);
    auto y = kernels::conv2d<double>(x, w, nullptr, {1, 1});
    EXPECT_EQ(y, Tensor<double>({1, 1, 3, 3}, 1.0));

    Tensor<double> corner({1, 1, 3, 3});
    corner.at(0, 0, 0, 0) = 1;
    auto yc = kernels::conv2d<double>(corner, w, nullptr, {1, 1});
    EXPECT_EQ(yc, Tensor<double>({1, 1, 3, 3}, {1, 1, 0, 1, 1, 0, 0, 0, 0}));

    auto all = kernels::conv2d<double>(Tensor<double>({1, 1, 3, 3}, 1.0), w, nullptr, {1, 1});
    EXPECT_EQ(all, Tensor<double>({1, 1, 3, 3}, {4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, MatchesNaiveLoopsExactly) {
    Rng rng(21);
    for (int rep = 0; rep < 40; ++rep) {
        const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
        const std::size_t B = rng.range(1, 2), C = rng.range(1, 4), CO = rng.range(1, 4);
        const std::size_t H = rng.range(1, 8), W = rng.range(1, 8), stride = rng.range(1, 2);
        const std::size_t pad = k / 2;
        if (H + 2 * pad < k || W + 2 * pad < k) continue;
        auto x = random_normal<double>({B, C, H, W}, rng);
        auto w = random_normal<double>({CO, C, k, k}, rng);
        auto b = random_normal<double>({CO}, rng);
        const bool with_bias = rng.bernoulli(0.5);
        EXPECT_EQ(kernels::conv2d<double>(x, w, with_bias ? &b : nullptr, {stride, pad}),
                  oracle::conv2d(x, w, with_bias ? &b : nullptr, stride, pad));
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
    EXPECT_THROW(kernels::conv2d<double>(Tensor<double>({1, 2, 3, 3}), Tensor<double>({1, 3, 1, 1}), nullptr, {1, 0}),
                 ShapeError);
}

TEST(BatchNorm, ConstantInputGivesShift) {
    BatchNormState<double> st(2);
    st.beta = Tensor<double>({2}, {0.25, -1.5});
    st.gamma = Tensor<double>({2}, {3.0, 2.0});
    auto y = kernels::batchnorm(Tensor<double>({2, 2, 3, 3}, 7.0), st, true);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 9; ++i) {
            EXPECT_EQ(y[(b * 2 + 0) * 9 + i], 0.25);
            EXPECT_EQ(y[(b * 2 + 1) * 9 + i], -1.5);
        }
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
    Rng rng(9);
    auto x = random_normal<double>({4, 3, 5, 5}, rng);
    // standardize each channel exactly
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) m += x[(b * 3 + c) * 25 + i];
        m /= 100;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) v += std::pow(x[(b * 3 + c) * 25 + i] - m, 2);
        v /= 100;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) x[(b * 3 + c) * 25 + i] = (x[(b * 3 + c) * 25 + i] - m) / std::sqrt(v);
    }
    BatchNormState<double> st(3);
    auto y = kernels::batchnorm(x, st, true);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(std::abs(y[i] - x[i]), 1e-5 * std::abs(x[i]) + 1e-6);
}

TEST(BatchNorm, TrainingOutputHasUnitStatistics) {
    Rng rng(10);
    auto x = random_normal<double>({3, 4, 6, 6}, rng, 3.0, 2.0);
    BatchNormState<double> st(4);
    auto y = kernels::batchnorm(x, st, true);
    for (std::size_t c = 0; c < 4; ++c) {
        std::vector<double> v;
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t i = 0; i < 36; ++i) v.push_back(y[(b * 4 + c) * 36 + i]);
        const double m = oracle::mean(v);
        double var = 0;
        for (double e : v) var += (e - m) * (e - m);
        var /= static_cast<double>(v.size());
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
    BatchNormState<double> st(1);
    EXPECT_EQ(st.momentum, 0.9);
    EXPECT_GT(st.eps, 0.0);
    kernels::batchnorm(Tensor<double>({1, 1, 1, 2}, {1.0, 3.0}), st, true);
    EXPECT_NEAR(st.running_mean[0], 0.1 * 2.0, 1e-15);
    EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-15);
    EXPECT_GE(st.running_var[0], 0.0);
}

TEST(GlobalAvgPool, ConstantMap) {
    auto y = kernels::global_avg_pool(Tensor<double>({1, 2, 3, 3}, 4.5));
    EXPECT_EQ(y, Tensor<double>({1, 2}, 4.5));
}

TEST(GlobalAvgPool, TwoByTwo) {
    auto y = kernels::global_avg_pool(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(y[0], 2.5);
}

TEST(GlobalAvgPool, MatchesBruteForceMean) {
    Rng rng(4);
    auto x = random_normal<double>({2, 3, 5, 7}, rng);
    auto y = kernels::global_avg_pool(x);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            std::vector<double> v;
            for (std::size_t h = 0; h < 5; ++h)
                for (std::size_t w = 0; w < 7; ++w) v.push_back(x.at(b, c, h, w));
            EXPECT_EQ(y.at(b, c), oracle::mean(v));
        }
}

TEST(AdaptiveRegionPool, SingleRegionIsGlobalPool) {
    Rng rng(6);
    auto x = random_normal<double>({2, 3, 4, 6}, rng);
    auto y = kernels::adaptive_region_pool(x, PartitionSpec::from_grid(4, 6, 1, 1));
    EXPECT_EQ(y.reshaped({2, 3}), kernels::global_avg_pool(x));
}

TEST(AdaptiveRegionPool, QuadrantConstants) {
    Tensor<double> x({1, 1, 4, 4});
    const double q[4] = {1.5, -2.0, 3.25, 7.0};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t xx = 0; xx < 4; ++xx) x.at(0, 0, y, xx) = q[(y / 2) * 2 + xx / 2];
    auto r = kernels::adaptive_region_pool(x, PartitionSpec::from_grid(4, 4, 2, 2));
    EXPECT_EQ(r, Tensor<double>({1, 1, 4}, {1.5, -2.0, 3.25, 7.0}));
}

TEST(AdaptiveRegionPool, MatchesRegionLoops) {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t gh = rng.range(1, 4), gw = rng.range(1, 4), ph = rng.range(1, 4), pw = rng.range(1, 4);
        auto x = random_normal<double>({2, 2, gh * ph, gw * pw}, rng);
        auto y = kernels::adaptive_region_pool(x, PartitionSpec{gh, gw, ph, pw});
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c)
                for (std::size_t gy = 0; gy < gh; ++gy)
                    for (std::size_t gx = 0; gx < gw; ++gx)
                        EXPECT_EQ(y.at(b, c, gy * gw + gx), oracle::region_mean(x, b, c, gy, gx, ph, pw));
    }
}

TEST(AdaptiveRegionPool, PixelGridIsIdentityReshape) {
    Rng rng(8);
    auto x = random_normal<double>({2, 3, 4, 5}, rng);
    auto y = kernels::adaptive_region_pool(x, PartitionSpec::from_grid(4, 5, 4, 5));
    EXPECT_EQ(y, x.reshaped({2, 3, 20}));
}

TEST(AdaptiveRegionPool, IndivisibleGridIsAPartitionError) {
    EXPECT_THROW(kernels::adaptive_region_pool(Tensor<double>({1, 1, 5, 4}), PartitionSpec::from_grid(4, 4, 2, 2)),
                 PartitionError);
    EXPECT_THROW(PartitionSpec::from_grid(5, 4, 2, 2), PartitionError);
}

TEST(ConcatChannels, SingleInputIsIdentity) {
    Rng rng(1);
    auto x = random_normal<double>({2, 3, 2, 2}, rng);
    EXPECT_EQ(kernels::concat_channels<double>({&x}), x);
}

TEST(ConcatChannels, SlicesRecoverOriginals) {
    Tensor<double> a({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> b({1, 1, 2, 2}, {5, 6, 7, 8});
    auto c = kernels::concat_channels<double>({&a, &b});
    ASSERT_EQ(c.dims(), (Shape{1, 2, 2, 2}));
    EXPECT_EQ(c, Tensor<double>({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(ConcatChannels, GradientScattersBack) {
    Rng rng(2);
    auto a = random_normal<double>({2, 2, 2, 3}, rng);
    auto b = random_normal<double>({2, 1, 2, 3}, rng);
    auto w = random_normal<double>({2, 3, 2, 3}, rng);
    Tape<double> t;
    Var va = t.param(a), vb = t.param(b);
    t.backward(ag::weighted_sum(t, ag::concat_channels(t, {va, vb}), w));
    auto ga = t.grad(va), gb = t.grad(vb);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_EQ(ga[(n * 2 + 0) * 6 + i], w[(n * 3 + 0) * 6 + i]);
            EXPECT_EQ(ga[(n * 2 + 1) * 6 + i], w[(n * 3 + 1) * 6 + i]);
            EXPECT_EQ(gb[n * 6 + i], w[(n * 3 + 2) * 6 + i]);
        }
    auto r = grad_check(
        [&](Tape<double>& tt) {
            return ag::weighted_sum(tt, ag::concat_channels(tt, {tt.param(a), tt.param(b)}), w);
        },
        {&a, &b});
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Tape, BackwardVisitsOpsInReverseOrder) {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({2}, {1, 2}));
    Var a = ag::relu(t, x);
    Var b = ag::sigmoid(t, a);
    Var c = ag::affine_const(t, b, 2.0, 1.0);
    Var s = ag::weighted_sum(t, c, Tensor<double>({2}, 1.0));
    t.backward(s);
    EXPECT_EQ(t.backward_order(), (std::vector<std::size_t>{s.id, c.id, b.id, a.id}));
}

TEST(Tape, RecordingOffKeepsNoGraph) {
    Tape<double> t;
    t.set_recording(false);
    Tensor<double> p({2}, 1.0);
    Var s = ag::weighted_sum(t, t.param(p), Tensor<double>({2}, 1.0));
    EXPECT_FALSE(t.requires_grad(s));
}

TEST(GradCheck, QuadraticIsExact) {
    Tensor<double> x({2}, {1, 2});
    Tape<double> t;
    Var v = t.param(x);
    t.backward(ag::weighted_sum(t, ag::mul(t, v, v), Tensor<double>({2}, 1.0)));
    EXPECT_EQ(t.grad(v), Tensor<double>({2}, {2, 4}));
    auto r = grad_check([](Tape<double>& tt, Var xv) {
        return ag::weighted_sum(tt, ag::mul(tt, xv, xv), Tensor<double>({2}, 1.0));
    }, x);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
    Rng rng(13);
    auto x = random_normal<double>({2, 5, 3, 3}, rng);
    LabelMap labels({2, 3, 3});
    for (auto& l : labels.data()) l = static_cast<std::uint8_t>(rng.below(5));
    auto r = grad_check([&](Tape<double>& t, Var v) { return ag::cross_entropy(t, v, labels); }, x);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, RelativeErrorFloorsDenominator) {
    EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_NEAR(relative_error(1e-12, 0.0), 1e-4, 1e-18);
}

TEST(Hmat, RoundTripsEveryDtype) {
    Rng rng(3);
    auto d = random_normal<double>({2, 3, 4}, rng);
    auto f = random_normal<float>({5}, rng);
    LabelMap u({2, 2}, {0, 5, 255, 7});
    EXPECT_EQ(hmat::decode<double>(hmat::encode(d)), d);
    EXPECT_EQ(hmat::decode<float>(hmat::encode(f)), f);
    EXPECT_EQ(hmat::decode<std::uint8_t>(hmat::encode(u)), u);
}

TEST(Hmat, HeaderLayoutIsLittleEndian) {
    auto bytes = hmat::encode(Tensor<float>({2}, {1.0f, -2.0f}));
    const std::vector<std::uint8_t> expected{'H', 'M', 'A', 'T', 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0,
                                             2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0};
    EXPECT_EQ(bytes, expected);
}

TEST(Hmat, MalformedInputReportsOffset) {
    auto bytes = hmat::encode(Tensor<double>({3}, 1.0));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(hmat::decode<double>(bad), FormatError);
    EXPECT_THROW(hmat::decode<float>(bytes), FormatError);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    try {
        hmat::decode<double>(cut);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), cut.size());
    }
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(hmat::decode<double>(extra), FormatError);
}

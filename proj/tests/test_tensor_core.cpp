#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "hvad/gradcheck.hpp"
#include "hvad/layers.hpp"
#include "hvad/optim.hpp"
#include "oracles.hpp"

using namespace hvad;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void expect_grad_ok(const GradCheckReport& r, const std::string& what) {
    for (const auto& e : r.entries) {
        EXPECT_LT(e.max_rel_error, kGradTol) << what << " / " << e.name << " worst index " << e.worst_index
                                             << " analytic " << e.analytic_at_worst << " numeric "
                                             << e.numeric_at_worst;
    }
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndBadReshape) {
    EXPECT_THROW(Tensor<float>(Shape{2, 0}), ConfigError);
    Tensor<float> t(Shape{2, 3});
    EXPECT_THROW(t.reshape({4, 2}), ConfigError);
    t.reshape({3, 2});
    EXPECT_EQ(t.shape(), (Shape{3, 2}));
    EXPECT_THROW(Tensor<float>(Shape{2}, std::vector<float>{1, 2, 3}), ConfigError);
}

TEST(Tensor, RowMajorIndexing) {
    Tensor<int> t(Shape{2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i);
    EXPECT_EQ(t.at(1, 2, 3), 23);
    EXPECT_EQ(t.at(0, 1, 0), 4);
}

TEST(Tensor, AssertFiniteThrowsNumericError) {
    Tensor<double> t(Shape{3}, 1.0);
    EXPECT_NO_THROW(t.assert_finite("t"));
    t[1] = std::nan("");
    EXPECT_THROW(t.assert_finite("t"), NumericError);
}

TEST(Conv2D, SameCeilGeometry) {
    auto g = ConvGeometry::same_ceil(5, 5, 3, 2);
    EXPECT_EQ(g.out_h, 3u);
    EXPECT_EQ(g.pad_top, 1u);  // total 2, split evenly
    g = ConvGeometry::same_ceil(10, 10, 3, 2);
    EXPECT_EQ(g.out_h, 5u);
    EXPECT_EQ(g.pad_top, 0u);  // total 1, the odd pixel goes bottom/right
    g = ConvGeometry::same_ceil(3, 3, 3, 2);
    EXPECT_EQ(g.out_h, 2u);
}

TEST(Conv2D, MatchesDirectLoopOracle) {
    std::mt19937_64 rng(11);
    struct Case { std::size_t h, w, c, o, k, s; };
    for (auto cs : {Case{10, 10, 3, 4, 3, 1}, Case{10, 10, 2, 3, 3, 2}, Case{5, 5, 4, 2, 3, 2}, Case{3, 3, 2, 2, 3, 2},
                    Case{7, 4, 3, 5, 1, 1}, Case{6, 9, 2, 2, 3, 1}}) {
        auto x = oracle::random_tensor({2, cs.h, cs.w, cs.c}, rng);
        auto f = oracle::random_tensor({cs.k, cs.k, cs.c, cs.o}, rng);
        auto b = oracle::random_tensor({cs.o}, rng);
        EXPECT_LT(max_abs_diff(conv2d(x, f, b, cs.s), oracle::conv2d(x, f, b, cs.s)), 1e-12);
    }
}

TEST(Conv2D, RankThreeInputIsBatchOfOne) {
    std::mt19937_64 rng(3);
    auto x = oracle::random_tensor({5, 5, 2}, rng);
    auto f = oracle::random_tensor({3, 3, 2, 3}, rng);
    Tensor<double> b(Shape{3});
    auto y = conv2d(x, f, b, 2);
    EXPECT_EQ(y.shape(), (Shape{3, 3, 3}));
    auto yb = conv2d(x.reshaped({1, 5, 5, 2}), f, b, 2);
    EXPECT_EQ(y.storage(), yb.storage());
}

TEST(Conv2D, ChannelMismatchIsConfigError) {
    Tensor<double> x(Shape{1, 5, 5, 2}), f(Shape{3, 3, 3, 4}), b(Shape{4});
    EXPECT_THROW(conv2d(x, f, b, 1), ConfigError);
}

TEST(Deconv2D, MatchesScatterOracle) {
    std::mt19937_64 rng(12);
    struct Case { std::size_t h, c, o, th; };
    for (auto cs : {Case{3, 4, 3, 5}, Case{5, 3, 2, 10}, Case{5, 2, 2, 9}}) {
        auto x = oracle::random_tensor({2, cs.h, cs.h, cs.c}, rng);
        auto f = oracle::random_tensor({3, 3, cs.o, cs.c}, rng);
        auto b = oracle::random_tensor({cs.o}, rng);
        auto y = deconv2d(x, f, b, 2, {cs.th, cs.th});
        EXPECT_LT(max_abs_diff(y, oracle::deconv2d(x, f, b, 2, cs.th, cs.th)), 1e-12);
    }
}

TEST(Deconv2D, IncompatibleTargetIsConfigError) {
    Tensor<double> x(Shape{1, 3, 3, 2}), f(Shape{3, 3, 2, 2}), b(Shape{2});
    EXPECT_THROW(deconv2d(x, f, b, 2, {10, 10}), ConfigError);
}

TEST(Deconv2D, AdjointOfConvolution) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const std::size_t small = seed % 2 ? 3 : 5, big = seed % 2 ? 5 : 10;
        auto x = oracle::random_tensor({2, small, small, 3}, rng);
        auto y = oracle::random_tensor({2, big, big, 4}, rng);
        auto f = oracle::random_tensor({3, 3, 4, 3}, rng);
        Tensor<double> zero4(Shape{4}), zero3(Shape{3});
        const double lhs = dot(deconv2d(x, f, zero4, 2, {big, big}), y);
        const double rhs = dot(x, conv2d(y, f, zero3, 2));
        EXPECT_NEAR(lhs, rhs, 1e-8 * std::max(1.0, std::abs(lhs)));
        auto via_backward = conv2d_backward_input(x, f, 2, {2, big, big, 4});
        EXPECT_LT(max_abs_diff(via_backward, deconv2d(x, f, zero4, 2, {big, big})), 1e-12);
    }
}

TEST(Dense, MatchesLoopOracle) {
    std::mt19937_64 rng(5);
    auto x = oracle::random_tensor({3, 7}, rng);
    auto w = oracle::random_tensor({7, 4}, rng);
    auto b = oracle::random_tensor({4}, rng);
    auto y = dense(x, w, b);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t u = 0; u < 4; ++u) {
            double acc = b[u];
            for (std::size_t f = 0; f < 7; ++f) acc += x.at(n, f) * w.at(f, u);
            EXPECT_NEAR(y.at(n, u), acc, 1e-12);
        }
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
    std::mt19937_64 rng(8);
    auto x = oracle::random_tensor({4, 3, 3, 2}, rng, 2.0, 5.0);
    Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0), rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
    auto y = batchnorm(x, gamma, beta, Mode::train, rm, rv, {});
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, var = 0, xm = 0, xv = 0;
        const std::size_t m = x.size() / 2;
        for (std::size_t r = 0; r < m; ++r) { mean += y[r * 2 + c]; xm += x[r * 2 + c]; }
        mean /= m;
        xm /= m;
        for (std::size_t r = 0; r < m; ++r) {
            var += (y[r * 2 + c] - mean) * (y[r * 2 + c] - mean);
            xv += (x[r * 2 + c] - xm) * (x[r * 2 + c] - xm);
        }
        var /= m;
        xv /= m;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, xv / (xv + 1e-5), 1e-9);
        EXPECT_NEAR(rm[c], 0.01 * xm, 1e-12);
        EXPECT_NEAR(rv[c], 0.99 + 0.01 * xv, 1e-12);
    }
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
    Tensor<double> x(Shape{1, 2}, std::vector<double>{3.0, -1.0});
    Tensor<double> gamma(Shape{2}, std::vector<double>{2.0, 1.0}), beta(Shape{2}, std::vector<double>{0.5, 0.0});
    Tensor<double> rm(Shape{2}, std::vector<double>{1.0, -1.0}), rv(Shape{2}, std::vector<double>{4.0, 1.0});
    auto y = batchnorm(x, gamma, beta, Mode::eval, rm, rv, {});
    EXPECT_NEAR(y[0], 2.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 0.5, 1e-12);
    EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(BatchNorm, TrainModeNeedsTwoValuesPerChannel) {
    Tensor<double> g(Shape{3}, 1.0), b(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0);
    EXPECT_THROW(batchnorm(Tensor<double>(Shape{1, 3}), g, b, Mode::train, rm, rv, {}), ConfigError);
    EXPECT_THROW(batchnorm(Tensor<double>(Shape{1, 1, 1, 3}), g, b, Mode::train, rm, rv, {}), ConfigError);
    // One sample of a spatial map has H*W values per channel.
    EXPECT_NO_THROW(batchnorm(Tensor<double>(Shape{1, 2, 2, 3}), g, b, Mode::train, rm, rv, {}));
}

TEST(BatchNorm, CalibrationPoolsBatchMomentsUntilAnotherPass) {
    std::mt19937_64 rng(12);
    BatchNorm<double> bn("bn", 2, {});
    const auto a = oracle::random_tensor({3, 2, 2, 2}, rng, 1.0, 3.0);
    const auto b = oracle::random_tensor({5, 2, 2, 2}, rng, -4.0, 0.0);
    const Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2});
    Tensor<double> rm(Shape{2}), rv(Shape{2}, 1.0);
    EXPECT_EQ(bn.forward(a, Mode::calibrate), batchnorm(a, gamma, beta, Mode::train, rm, rv, {}));
    bn.forward(b, Mode::calibrate);

    const auto buffers = bn.buffers();
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> all;
        for (const auto* t : {&a, &b})
            for (std::size_t r = 0; r < t->size() / 2; ++r) all.push_back((*t)[r * 2 + c]);
        const double mean = std::accumulate(all.begin(), all.end(), 0.0) / all.size();
        EXPECT_NEAR((*buffers[0].second)[c], mean, 1e-12);
        EXPECT_NEAR((*buffers[1].second)[c], oracle::sd_population(all) * oracle::sd_population(all), 1e-12);
    }

    // An eval pass ends the run; the next calibration sees only its own batch.
    bn.forward(a, Mode::eval);
    bn.forward(b, Mode::calibrate);
    Tensor<double> bm(Shape{2}), bv(Shape{2});
    batchnorm(b, gamma, beta, Mode::train, bm, bv, {1e-5, 0.0});
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR((*buffers[0].second)[c], bm[c], 1e-12);
        EXPECT_NEAR((*buffers[1].second)[c], bv[c], 1e-12);
    }
    EXPECT_THROW(batchnorm(a, rm, rm, Mode::calibrate, rm, rv, {}), std::logic_error);
}

TEST(Activation, SoftmaxRowsSumToOne) {
    std::mt19937_64 rng(9);
    auto x = oracle::random_tensor({5, 16}, rng, -30.0, 30.0);
    auto p = activation(x, ActivationKind::softmax);
    for (std::size_t n = 0; n < 5; ++n) {
        double s = 0;
        for (std::size_t j = 0; j < 16; ++j) {
            EXPECT_GE(p.at(n, j), 0.0);
            s += p.at(n, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Activation, PointwiseValues) {
    Tensor<double> x(Shape{3}, std::vector<double>{-2.0, 0.0, 3.0});
    auto r = activation(x, ActivationKind::relu);
    auto l = activation(x, ActivationKind::leaky_relu, 0.2);
    auto s = activation(x, ActivationKind::sigmoid);
    EXPECT_EQ(r.storage(), (std::vector<double>{0.0, 0.0, 3.0}));
    EXPECT_DOUBLE_EQ(l[0], -0.4);
    EXPECT_DOUBLE_EQ(l[2], 3.0);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
    Tensor<double> big(Shape{2}, std::vector<double>{-800.0, 800.0});
    auto sb = activation(big, ActivationKind::sigmoid);
    EXPECT_TRUE(sb.all_finite());
}

TEST(Dropout, EvalModeIsBitExactIdentity) {
    std::mt19937_64 rng(1);
    auto x = oracle::random_tensor({4, 8}, rng);
    EXPECT_EQ(dropout(x, 0.5, Mode::eval, rng), x);
    EXPECT_EQ(dropout(x, 0.0, Mode::train, rng), x);
    EXPECT_EQ(dropout(x, 0.5, Mode::calibrate, rng), x);
}

TEST(Dropout, TrainModeScalesKeptUnits) {
    std::mt19937_64 rng(2);
    Tensor<double> x(Shape{20000}, 1.0);
    auto y = dropout(x, 0.5, Mode::train, rng);
    std::size_t kept = 0;
    for (double v : y.storage()) {
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        kept += v != 0.0;
    }
    EXPECT_NEAR(static_cast<double>(kept) / 20000.0, 0.5, 0.02);
    EXPECT_THROW(dropout(x, 1.0, Mode::train, rng), ConfigError);
}

TEST(Init, ScaledUniformBoundsAndZeroBias) {
    std::mt19937_64 rng(4);
    Conv2D<double> conv("c", 3, 32, 3, 1, rng);
    const double bound = std::sqrt(6.0 / (27.0 + 288.0));
    for (double v : conv.filters().value.storage()) EXPECT_LE(std::abs(v), bound);
    for (double v : conv.bias().value.storage()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// finite-difference checks, every layer kind, 20 seeds each
// ---------------------------------------------------------------------------

TEST(GradCheck, DetectsAWrongGradient) {
    Tensor<double> w(Shape{2}, std::vector<double>{0.3, -0.7}), g(Shape{2});
    auto loss = [&] { return w[0] * w[0] + 3 * w[1]; };
    auto fill = [&] { g[0] = 2 * w[0]; g[1] = 2.0; };  // second entry is wrong
    auto r = grad_check({{"w", &w, &g}}, loss, fill);
    EXPECT_FALSE(r.passed(kGradTol));
    EXPECT_EQ(r.entries[0].max_rel_error, r.max_rel_error());
}

TEST(GradCheck, Conv2DStrideOneAndTwo) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(seed);
        Conv2D<double> c1("conv_s1", 2, 3, 3, 1, rng);
        Conv2D<double> c2("conv_s2", 2, 3, 3, 2, rng);
        Conv2D<double> c3("conv_1x1", 3, 2, 1, 1, rng);
        for (auto* p : c1.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        for (auto* p : c2.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        for (auto* p : c3.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        expect_grad_ok(grad_check_layer(c1, oracle::random_tensor({2, 5, 5, 2}, rng), Mode::train, seed), "conv s1");
        expect_grad_ok(grad_check_layer(c2, oracle::random_tensor({2, 5, 5, 2}, rng), Mode::train, seed), "conv s2");
        expect_grad_ok(grad_check_layer(c3, oracle::random_tensor({2, 4, 4, 3}, rng), Mode::train, seed), "conv 1x1");
    }
}

TEST(GradCheck, Deconv2D) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        Deconv2D<double> d1("deconv_3to5", 3, 2, 3, 2, {5, 5}, rng);
        Deconv2D<double> d2("deconv_5to10", 2, 2, 3, 2, {10, 10}, rng);
        for (auto* p : d1.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        for (auto* p : d2.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        expect_grad_ok(grad_check_layer(d1, oracle::random_tensor({2, 3, 3, 3}, rng), Mode::train, seed), "deconv 3->5");
        expect_grad_ok(grad_check_layer(d2, oracle::random_tensor({1, 5, 5, 2}, rng), Mode::train, seed), "deconv 5->10");
    }
}

TEST(GradCheck, Dense) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(2000 + seed);
        Dense<double> fc("fc", 6, 4, rng);
        for (auto* p : fc.parameters()) p->value = oracle::random_tensor(p->shape(), rng);
        expect_grad_ok(grad_check_layer(fc, oracle::random_tensor({3, 6}, rng), Mode::train, seed), "dense");
    }
}

TEST(GradCheck, BatchNormTrainAndEval) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(3000 + seed);
        BatchNorm<double> bn("bn", 3, {});
        for (auto* p : bn.parameters()) p->value = oracle::random_tensor(p->shape(), rng, 0.5, 1.5);
        auto x = oracle::random_tensor({3, 2, 2, 3}, rng, -2.0, 2.0);
        expect_grad_ok(grad_check_layer(bn, x, Mode::train, seed), "bn train");
        for (auto& [name, buf] : bn.buffers()) *buf = oracle::random_tensor(buf->shape(), rng, 0.5, 1.5);
        expect_grad_ok(grad_check_layer(bn, x, Mode::eval, seed), "bn eval");
    }
}

TEST(GradCheck, Activations) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(4000 + seed);
        for (auto kind : {ActivationKind::relu, ActivationKind::leaky_relu, ActivationKind::sigmoid, ActivationKind::softmax}) {
            Activation<double> a("act", kind, 0.2);
            auto x = oracle::random_tensor({3, 7}, rng, -3.0, 3.0);
            // Keep pointwise inputs away from the kink at 0.
            for (auto& v : x.storage()) if (std::abs(v) < 1e-3) v = 0.5;
            expect_grad_ok(grad_check_layer(a, x, Mode::train, seed), to_string(kind));
        }
    }
}

TEST(GradCheck, DropoutWithFixedMaskAndFlatten) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(5000 + seed);
        auto drng = std::make_shared<std::mt19937_64>();
        Dropout<double> d("drop", 0.5, drng);
        auto x = oracle::random_tensor({2, 9}, rng);
        expect_grad_ok(grad_check_layer(d, x, Mode::train, seed, {}, [&] { drng->seed(seed); }), "dropout");
        Flatten<double> f("flat");
        expect_grad_ok(grad_check_layer(f, oracle::random_tensor({2, 3, 3, 2}, rng), Mode::train, seed), "flatten");
    }
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

TEST(Optimizer, SgdStep) {
    Parameter<double> p("w", Tensor<double>(Shape{1}, 1.0));
    p.grad[0] = 1.0;
    Sgd sgd({0.1});
    std::vector<Parameter<double>*> ps{&p};
    sgd.step<double>(ps);
    EXPECT_DOUBLE_EQ(p.value[0], 0.9);
    EXPECT_EQ(sgd.steps(), 1u);
}

TEST(Optimizer, AdamFirstStepHasMagnitudeLr) {
    for (double g : {1e-3, 1.0, 250.0}) {
        Parameter<double> p("w", Tensor<double>(Shape{1}, 0.0));
        p.grad[0] = g;
        Adam adam;
        std::vector<Parameter<double>*> ps{&p};
        adam.step<double>(ps);
        EXPECT_NEAR(std::abs(p.value[0]), 2e-4, 1e-8 * 1e3);
    }
}

TEST(Optimizer, AdamDecreasesQuadratic) {
    Parameter<double> p("w", Tensor<double>(Shape{1}, 1.0));
    Adam adam;
    std::vector<Parameter<double>*> ps{&p};
    for (int i = 0; i < 100; ++i) {
        p.grad[0] = 2.0 * p.value[0];
        adam.step<double>(ps);
    }
    EXPECT_LT(std::abs(p.value[0]), 1.0);
    // Scalar recurrence run independently.
    double w = 1.0, m = 0, v = 0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2 * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 2e-4 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    EXPECT_NEAR(p.value[0], w, 1e-12);
}

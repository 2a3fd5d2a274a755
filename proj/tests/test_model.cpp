#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "arch_table.hpp"
#include "hvad/model.hpp"
#include "oracles.hpp"

using namespace hvad;

namespace {

void expect_conforms(const arch::Rows& trace, const arch::Rows& table) {
    const std::string err = arch::conformance_error(trace, table);
    EXPECT_TRUE(err.empty()) << err;
}

ModelConfig config(std::size_t w, std::size_t h, bool decoder = true, bool adversarial = true) {
    ModelConfig c;
    c.frame_width = w;
    c.frame_height = h;
    c.use_decoder = decoder;
    c.use_adversarial = adversarial;
    return c;
}

}  // namespace

TEST(Model, ShapeTraceMatchesTablesAtBaseResolution) {
    HybridModel<float> m(config(160, 120));
    expect_conforms(m.shape_trace(), arch::table_rows(16, 12));
    EXPECT_EQ(HybridModel<float>::feature_length(), 7104u);
}

TEST(Model, ConformanceCheckRejectsAWrongTable) {
    HybridModel<float> m(config(160, 120));
    EXPECT_FALSE(arch::conformance_error(m.shape_trace(), arch::table_rows(32, 24)).empty());
    auto rows = arch::table_rows(16, 12);
    rows[3].output = "5x5x65";
    EXPECT_FALSE(arch::conformance_error(m.shape_trace(), rows).empty());
}

TEST(Model, HeadsFollowTheGrid) {
    HybridModel<float> big(config(320, 240));
    expect_conforms(big.shape_trace(), arch::table_rows(32, 24));
    HybridModel<float> small(config(80, 60));
    expect_conforms(small.shape_trace(), arch::table_rows(8, 6));
    auto out = small.forward_generator(Tensor<float>(Shape{3, 10, 10, 3}, 0.2f), Mode::eval);
    EXPECT_EQ(out.probs_x.shape(), (Shape{3, 8}));
    EXPECT_EQ(out.probs_y.shape(), (Shape{3, 6}));
}

TEST(Model, EncoderBlockOneHasNoBatchNorm) {
    HybridModel<float> m(config(160, 120));
    for (const auto& r : m.shape_trace()) {
        if (r.component == "Enc/block1") {
            EXPECT_NE(r.layer, "bnorm");
        }
    }
    for (const auto& [name, buf] : m.buffers()) EXPECT_EQ(name.find("enc/block1"), std::string::npos) << name;
}

TEST(Model, ConfigValidation) {
    EXPECT_THROW(HybridModel<float>(config(165, 120)), ConfigError);
    EXPECT_THROW(HybridModel<float>(config(160, 125)), ConfigError);
    EXPECT_THROW(HybridModel<float>(config(160, 120, false, true)), ConfigError);
    auto bad = config(160, 120);
    bad.dropout = 1.0;
    EXPECT_THROW(HybridModel<float>{bad}, ConfigError);
}

TEST(Model, DecoderOffAllocatesNoDecoder) {
    HybridModel<float> full(config(160, 120));
    HybridModel<float> clf(config(160, 120, false, false));
    EXPECT_LT(clf.parameter_count(), full.parameter_count());
    EXPECT_TRUE(clf.decoder_parameters().empty());
    EXPECT_TRUE(clf.discriminator_parameters().empty());
    for (auto* p : clf.parameters()) {
        EXPECT_NE(p->name.rfind("dec/", 0), 0u) << p->name;
        EXPECT_NE(p->name.rfind("disc/", 0), 0u) << p->name;
    }
    auto a = full.classifier_parameters();
    auto b = clf.classifier_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i]->name, b[i]->name);
        EXPECT_EQ(a[i]->shape(), b[i]->shape());
    }
    auto out = clf.forward_generator(Tensor<float>(Shape{2, 10, 10, 3}, 0.5f), Mode::eval);
    EXPECT_FALSE(out.reconstruction.has_value());
    for (const auto& r : clf.shape_trace()) {
        EXPECT_NE(r.component.rfind("Dec/", 0), 0u);
        EXPECT_NE(r.component.rfind("Disc/", 0), 0u);
    }
}

TEST(Model, ParameterCountDeterministic) {
    HybridModel<float> a(config(160, 120), 1), b(config(160, 120), 2);
    EXPECT_EQ(a.parameter_count(), b.parameter_count());
    std::size_t n = 0;
    for (auto* p : a.parameters()) n += p->value.size();
    EXPECT_EQ(a.parameter_count(), n);
}

TEST(Model, SoftmaxAndReconstructionShapes) {
    HybridModel<float> m(config(160, 120), 5);
    std::mt19937_64 rng(1);
    auto x = oracle::random_tensor({4, 10, 10, 3}, rng, 0.0, 1.0).cast<float>();
    auto out = m.forward_generator(x, Mode::train);
    ASSERT_TRUE(out.reconstruction.has_value());
    EXPECT_EQ(out.reconstruction->shape(), x.shape());
    for (const auto* probs : {&out.probs_x, &out.probs_y}) {
        for (std::size_t n = 0; n < 4; ++n) {
            double s = 0;
            for (std::size_t j = 0; j < probs->dim(1); ++j) s += probs->at(n, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Model, EvalForwardIsDeterministic) {
    HybridModel<float> m(config(80, 60), 3);
    std::mt19937_64 rng(2);
    auto x = oracle::random_tensor({5, 10, 10, 3}, rng, 0.0, 1.0).cast<float>();
    auto a = m.forward_generator(x, Mode::eval);
    m.seed_dropout(99);
    auto b = m.forward_generator(x, Mode::eval);
    EXPECT_EQ(*a.reconstruction, *b.reconstruction);
    EXPECT_EQ(a.probs_x, b.probs_x);
    EXPECT_EQ(a.probs_y, b.probs_y);
}

TEST(Model, WrongCuboidShapeIsConfigError) {
    HybridModel<float> m(config(80, 60));
    EXPECT_THROW(m.forward_generator(Tensor<float>(Shape{2, 10, 10, 4}), Mode::eval), ConfigError);
    EXPECT_THROW(m.forward_generator(Tensor<float>(Shape{2, 5, 10, 3}), Mode::eval), ConfigError);
    EXPECT_NO_THROW(m.forward_generator(Tensor<float>(Shape{10, 10, 3}), Mode::eval));
}

TEST(Model, DiscriminatorScoresInOpenUnitInterval) {
    HybridModel<float> a(config(80, 60), 1), b(config(80, 60), 2);
    std::mt19937_64 rng(3);
    auto x = oracle::random_tensor({6, 10, 10, 3}, rng, 0.0, 1.0).cast<float>();
    auto sa = a.forward_discriminator(x, Mode::train);
    auto sb = b.forward_discriminator(x, Mode::train);
    ASSERT_EQ(sa.shape(), (Shape{6}));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_GT(sa[i], 0.0f);
        EXPECT_LT(sa[i], 1.0f);
    }
    EXPECT_NE(sa, sb);
    HybridModel<float> off(config(80, 60, true, false));
    EXPECT_THROW(off.forward_discriminator(x, Mode::eval), ConfigError);
}

TEST(Model, CastPreservesValues) {
    HybridModel<float> m(config(80, 60), 4);
    auto d = m.cast<double>();
    auto pf = m.parameters();
    auto pd = d.parameters();
    ASSERT_EQ(pf.size(), pd.size());
    for (std::size_t i = 0; i < pf.size(); ++i) EXPECT_EQ(pd[i]->value.cast<float>(), pf[i]->value);
}

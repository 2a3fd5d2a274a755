#pragma once

// The hybrid network: convolutional auto-encoder, patch-position classifier
// fed by every encoder block, and the discriminator used for adversarial
// training.
//
//   cuboid [10,10,3]
//     enc/block1  conv 3x3/1 (32), conv 3x3/1 (64), lrelu          -> 10x10x64
//     enc/block2  conv 3x3/2 (64), conv 3x3/1 (128), bnorm, lrelu  -> 5x5x128
//     enc/block3  conv 3x3/2 (128), conv 3x3/1 (256), bnorm, lrelu -> 3x3x256
//     dec         conv/bn/relu, [deconv, conv, bn, dropout, relu] x2, conv -> 10x10x3
//     clf         1x1 conv on block1 (32) and block2 (64), raw block3,
//                 flatten + concat (7104), then per axis
//                 fc 1024, relu, dropout, fc 1024, relu, dropout, fc, softmax
//     disc        conv 3x3/2 x3, conv 1x1, bnorm, fc 4->1, sigmoid

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hvad/hash.hpp"
#include "hvad/layers.hpp"

namespace hvad {

inline constexpr std::size_t kPatch = 10;
inline constexpr std::size_t kDepth = 3;

struct ModelConfig {
    std::size_t frame_width = 160;
    std::size_t frame_height = 120;
    bool use_decoder = true;
    bool use_adversarial = true;
    double dropout = 0.5;
    double leaky_slope = kLeakySlope;
    BatchNormOptions batchnorm;

    std::size_t grid_w() const { return frame_width / kPatch; }
    std::size_t grid_h() const { return frame_height / kPatch; }

    void validate() const {
        if (frame_width == 0 || frame_height == 0 || frame_width % kPatch || frame_height % kPatch) {
            throw ConfigError("frame size " + std::to_string(frame_width) + "x" + std::to_string(frame_height) +
                              " is not divisible by the patch size " + std::to_string(kPatch));
        }
        if (use_adversarial && !use_decoder) {
            throw ConfigError("adversarial training requires the decoder (it scores reconstructions)");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    }

    nlohmann::json to_json() const {
        return {{"frame_width", frame_width},
                {"frame_height", frame_height},
                {"use_decoder", use_decoder},
                {"use_adversarial", use_adversarial},
                {"dropout", dropout},
                {"leaky_slope", leaky_slope},
                {"bn_epsilon", batchnorm.epsilon},
                {"bn_momentum", batchnorm.momentum}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.frame_width = j.at("frame_width").get<std::size_t>();
        c.frame_height = j.at("frame_height").get<std::size_t>();
        c.use_decoder = j.at("use_decoder").get<bool>();
        c.use_adversarial = j.at("use_adversarial").get<bool>();
        c.dropout = j.at("dropout").get<double>();
        c.leaky_slope = j.at("leaky_slope").get<double>();
        c.batchnorm.epsilon = j.at("bn_epsilon").get<double>();
        c.batchnorm.momentum = j.at("bn_momentum").get<double>();
        return c;
    }

    /// Stable identifier of the architecture and its switches.
    std::string hash() const { return hex64(fnv1a(to_json().dump())); }
};

template <class T>
struct ForwardOutputs {
    std::optional<Tensor<T>> reconstruction;  // [N,10,10,3]
    Tensor<T> probs_x;                        // [N, grid_w]
    Tensor<T> probs_y;                        // [N, grid_h]
};

/// Loss gradients w.r.t. the generator outputs. Null entries contribute nothing.
template <class T>
struct GeneratorGrads {
    const Tensor<T>* reconstruction = nullptr;
    const Tensor<T>* probs_x = nullptr;
    const Tensor<T>* probs_y = nullptr;
};

template <class T>
class HybridModel {
public:
    static constexpr std::size_t kBranch1Channels = 32;
    static constexpr std::size_t kBranch2Channels = 64;
    static constexpr std::size_t kHiddenUnits = 1024;

    explicit HybridModel(const ModelConfig& cfg, std::uint64_t init_seed = 0)
        : cfg_(cfg), rng_(std::make_shared<std::mt19937_64>(init_seed)) {
        cfg_.validate();
        build_encoder(mix_seed(init_seed, 1));
        if (cfg_.use_decoder) build_decoder(mix_seed(init_seed, 2));
        build_classifier(mix_seed(init_seed, 3));
        if (cfg_.use_decoder) build_discriminator(mix_seed(init_seed, 4));
    }

    HybridModel(HybridModel&&) noexcept = default;
    HybridModel& operator=(HybridModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    std::size_t grid_w() const { return cfg_.grid_w(); }
    std::size_t grid_h() const { return cfg_.grid_h(); }
    bool has_decoder() const { return cfg_.use_decoder; }
    /// The discriminator exists whenever a decoder does; it is only trained
    /// and callable with adversarial training enabled.
    bool has_discriminator() const { return cfg_.use_decoder; }

    static constexpr std::size_t feature_length() {
        return kPatch * kPatch * kBranch1Channels + 5 * 5 * kBranch2Channels + 3 * 3 * 256;
    }

    /// Reseeds the generator that draws dropout masks.
    void seed_dropout(std::uint64_t seed) { rng_->seed(seed); }

    ForwardOutputs<T> forward_generator(const Tensor<T>& batch, Mode mode) {
        Tensor<T> x = as_batch(batch);
        Tensor<T> e1 = enc1_.forward(std::move(x), mode);
        Tensor<T> e2 = enc2_.forward(e1, mode);
        Tensor<T> e3 = enc3_.forward(e2, mode);

        ForwardOutputs<T> out;
        if (cfg_.use_decoder) out.reconstruction = dec_.forward(e3, mode);

        Tensor<T> f1 = branch1_.forward(e1, mode);
        Tensor<T> f2 = branch2_.forward(e2, mode);
        Tensor<T> f3 = branch3_.forward(e3, mode);
        Tensor<T> feature = concat_features(f1, f2, f3);
        out.probs_x = tower_x_.forward(feature, mode);
        out.probs_y = tower_y_.forward(feature, mode);
        return out;
    }

    /// Backpropagates through the most recent forward_generator call.
    void backward_generator(const GeneratorGrads<T>& g) {
        const std::size_t n = batch_;
        Tensor<T> dfeat(Shape{n, feature_length()});
        if (g.probs_x) add_into(dfeat, tower_x_.backward(*g.probs_x));
        if (g.probs_y) add_into(dfeat, tower_y_.backward(*g.probs_y));

        auto [d1, d2, d3] = split_features(dfeat);
        Tensor<T> de3 = branch3_.backward(std::move(d3));
        if (cfg_.use_decoder && g.reconstruction) add_into(de3, dec_.backward(*g.reconstruction));
        Tensor<T> de2 = enc3_.backward(std::move(de3));
        add_into(de2, branch2_.backward(std::move(d2)));
        Tensor<T> de1 = enc2_.backward(std::move(de2));
        add_into(de1, branch1_.backward(std::move(d1)));
        input_grad_ = enc1_.backward(std::move(de1));
    }

    /// Gradient w.r.t. the cuboid batch from the last backward_generator call
    /// (empty unless input gradients are enabled).
    const Tensor<T>& input_grad() const { return input_grad_; }
    void set_input_grad_enabled(bool on) { enc1_.front().propagate_input_grad = on; }

    /// Probability that each cuboid is real, shape [N].
    Tensor<T> forward_discriminator(const Tensor<T>& batch, Mode mode) {
        if (!cfg_.use_adversarial) throw ConfigError("discriminator called with adversarial training disabled");
        Tensor<T> x = as_batch(batch, false);
        Tensor<T> s = disc_.forward(std::move(x), mode);
        s.reshape({s.dim(0)});
        return s;
    }

    /// Returns the gradient w.r.t. the discriminator input, [N,10,10,3].
    Tensor<T> backward_discriminator(const Tensor<T>& grad_scores) {
        return disc_.backward(grad_scores.reshaped({grad_scores.size(), 1}));
    }

    std::vector<Parameter<T>*> encoder_parameters() { return collect({&enc1_, &enc2_, &enc3_}); }
    std::vector<Parameter<T>*> decoder_parameters() { return cfg_.use_decoder ? dec_.parameters() : std::vector<Parameter<T>*>{}; }
    std::vector<Parameter<T>*> classifier_parameters() {
        return collect({&branch1_, &branch2_, &branch3_, &tower_x_, &tower_y_});
    }
    std::vector<Parameter<T>*> generator_parameters() {
        return collect({&enc1_, &enc2_, &enc3_, &dec_, &branch1_, &branch2_, &branch3_, &tower_x_, &tower_y_});
    }
    std::vector<Parameter<T>*> discriminator_parameters() { return disc_.parameters(); }
    std::vector<Parameter<T>*> parameters() {
        auto p = generator_parameters();
        for (auto* d : discriminator_parameters()) p.push_back(d);
        return p;
    }
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto* s : all_blocks())
            for (auto& b : s->buffers()) out.push_back(b);
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->value.size();
        return n;
    }

    /// Layer-by-layer output sizes from a forward pass on a dummy batch.
    std::vector<TraceRow> shape_trace() {
        Tensor<T> dummy(Shape{2, kPatch, kPatch, kDepth}, T{0.5});
        forward_generator(dummy, Mode::eval);
        std::vector<TraceRow> rows;
        auto append = [&](const Sequential<T>& s) {
            for (auto& r : s.trace()) rows.push_back(r);
        };
        append(enc1_);
        append(enc2_);
        append(enc3_);
        if (cfg_.use_decoder) append(dec_);
        append(branch1_);
        append(branch2_);
        append(branch3_);
        rows.push_back({"Clf/feature", "concatenation", "-", std::to_string(feature_length())});
        append(tower_x_);
        append(tower_y_);
        if (has_discriminator()) {
            disc_.forward(dummy, Mode::eval);
            rows.push_back({"Disc/input", "-", "-", "10x10x3"});
            append(disc_);
        }
        return rows;
    }

    /// Copies parameter values and buffers into a model of another scalar type.
    template <class U>
    HybridModel<U> cast() {
        HybridModel<U> out(cfg_);
        auto src = parameters();
        auto dst = out.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
        auto sb = buffers();
        auto db = out.buffers();
        for (std::size_t i = 0; i < sb.size(); ++i) *db[i].second = sb[i].second->template cast<U>();
        return out;
    }

    /// First encoder convolution, [3,3,3,32].
    Parameter<T>& first_layer_filters() { return static_cast<Conv2D<T>&>(enc1_.front()).filters(); }

private:
    void build_encoder(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const double s = cfg_.leaky_slope;
        enc1_ = Sequential<T>("Enc/block1");
        enc1_.template add<Conv2D<T>>("enc/block1/conv1", kDepth, 32, 3, 1, rng);
        enc1_.template add<Conv2D<T>>("enc/block1/conv2", 32, 64, 3, 1, rng);
        enc1_.template add<Activation<T>>("enc/block1/lrelu", ActivationKind::leaky_relu, s);
        enc1_.front().propagate_input_grad = false;

        enc2_ = Sequential<T>("Enc/block2");
        enc2_.template add<Conv2D<T>>("enc/block2/conv1", 64, 64, 3, 2, rng);
        enc2_.template add<Conv2D<T>>("enc/block2/conv2", 64, 128, 3, 1, rng);
        enc2_.template add<BatchNorm<T>>("enc/block2/bnorm", 128, cfg_.batchnorm);
        enc2_.template add<Activation<T>>("enc/block2/lrelu", ActivationKind::leaky_relu, s);

        enc3_ = Sequential<T>("Enc/block3");
        enc3_.template add<Conv2D<T>>("enc/block3/conv1", 128, 128, 3, 2, rng);
        enc3_.template add<Conv2D<T>>("enc/block3/conv2", 128, 256, 3, 1, rng);
        enc3_.template add<BatchNorm<T>>("enc/block3/bnorm", 256, cfg_.batchnorm);
        enc3_.template add<Activation<T>>("enc/block3/lrelu", ActivationKind::leaky_relu, s);
    }

    void build_decoder(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const double p = cfg_.dropout;
        dec_ = Sequential<T>("Dec/block1");
        dec_.template add<Conv2D<T>>("dec/block1/conv", 256, 128, 3, 1, rng);
        dec_.template add<BatchNorm<T>>("dec/block1/bnorm", 128, cfg_.batchnorm);
        dec_.template add<Activation<T>>("dec/block1/relu", ActivationKind::relu);
        dec_.set_component("Dec/block2");
        dec_.template add<Deconv2D<T>>("dec/block2/deconv", 128, 128, 3, 2, std::pair<std::size_t, std::size_t>{5, 5}, rng);
        dec_.template add<Conv2D<T>>("dec/block2/conv", 128, 64, 3, 1, rng);
        dec_.template add<BatchNorm<T>>("dec/block2/bnorm", 64, cfg_.batchnorm);
        dec_.template add<Dropout<T>>("dec/block2/dropout", p, rng_);
        dec_.template add<Activation<T>>("dec/block2/relu", ActivationKind::relu);
        dec_.set_component("Dec/block3");
        dec_.template add<Deconv2D<T>>("dec/block3/deconv", 64, 64, 3, 2, std::pair<std::size_t, std::size_t>{10, 10}, rng);
        dec_.template add<Conv2D<T>>("dec/block3/conv", 64, 32, 3, 1, rng);
        dec_.template add<BatchNorm<T>>("dec/block3/bnorm", 32, cfg_.batchnorm);
        dec_.template add<Dropout<T>>("dec/block3/dropout", p, rng_);
        dec_.template add<Activation<T>>("dec/block3/relu", ActivationKind::relu);
        dec_.set_component("Dec/output");
        dec_.template add<Conv2D<T>>("dec/output/conv", 32, kDepth, 3, 1, rng);
    }

    void build_classifier(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        branch1_ = Sequential<T>("Clf/branch1");
        branch1_.template add<Conv2D<T>>("clf/branch1/conv", 64, kBranch1Channels, 1, 1, rng);
        branch1_.template add<Flatten<T>>("clf/branch1/flatten");
        branch2_ = Sequential<T>("Clf/branch2");
        branch2_.template add<Conv2D<T>>("clf/branch2/conv", 128, kBranch2Channels, 1, 1, rng);
        branch2_.template add<Flatten<T>>("clf/branch2/flatten");
        branch3_ = Sequential<T>("Clf/branch3");
        branch3_.template add<Flatten<T>>("clf/branch3/flatten");
        tower_x_ = make_tower("x", cfg_.grid_w(), rng);
        tower_y_ = make_tower("y", cfg_.grid_h(), rng);
    }

    Sequential<T> make_tower(const std::string& axis, std::size_t classes, std::mt19937_64& rng) {
        const double p = cfg_.dropout;
        Sequential<T> t("Clf/hidden1_" + axis);
        t.template add<Dense<T>>("clf/hidden1_" + axis + "/fc", feature_length(), kHiddenUnits, rng);
        t.template add<Activation<T>>("clf/hidden1_" + axis + "/relu", ActivationKind::relu);
        t.template add<Dropout<T>>("clf/hidden1_" + axis + "/dropout", p, rng_);
        t.set_component("Clf/hidden2_" + axis);
        t.template add<Dense<T>>("clf/hidden2_" + axis + "/fc", kHiddenUnits, kHiddenUnits, rng);
        t.template add<Activation<T>>("clf/hidden2_" + axis + "/relu", ActivationKind::relu);
        t.template add<Dropout<T>>("clf/hidden2_" + axis + "/dropout", p, rng_);
        t.set_component("Clf/output_" + axis);
        t.template add<Dense<T>>("clf/output_" + axis + "/fc", kHiddenUnits, classes, rng);
        t.template add<Activation<T>>("clf/output_" + axis + "/softmax", ActivationKind::softmax);
        return t;
    }

    void build_discriminator(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const double s = cfg_.leaky_slope;
        disc_ = Sequential<T>("Disc/block1");
        disc_.template add<Conv2D<T>>("disc/block1/conv", kDepth, 32, 3, 2, rng);
        disc_.template add<Activation<T>>("disc/block1/lrelu", ActivationKind::leaky_relu, s);
        disc_.set_component("Disc/block2");
        disc_.template add<Conv2D<T>>("disc/block2/conv", 32, 64, 3, 2, rng);
        disc_.template add<BatchNorm<T>>("disc/block2/bnorm", 64, cfg_.batchnorm);
        disc_.template add<Activation<T>>("disc/block2/lrelu", ActivationKind::leaky_relu, s);
        disc_.set_component("Disc/block3");
        disc_.template add<Conv2D<T>>("disc/block3/conv", 64, 128, 3, 2, rng);
        disc_.template add<BatchNorm<T>>("disc/block3/bnorm", 128, cfg_.batchnorm);
        disc_.template add<Activation<T>>("disc/block3/lrelu", ActivationKind::leaky_relu, s);
        disc_.set_component("Disc/block4");
        disc_.template add<Conv2D<T>>("disc/block4/conv", 128, 1, 1, 1, rng);
        disc_.template add<BatchNorm<T>>("disc/block4/bnorm", 1, cfg_.batchnorm);
        disc_.template add<Dense<T>>("disc/block4/fc", 4, 1, rng);
        disc_.template add<Activation<T>>("disc/block4/sigmoid", ActivationKind::sigmoid);
    }

    Tensor<T> as_batch(const Tensor<T>& batch, bool remember = true) {
        const Shape& s = batch.shape();
        const bool single = s == Shape{kPatch, kPatch, kDepth};
        const bool batched = s.size() == 4 && s[1] == kPatch && s[2] == kPatch && s[3] == kDepth;
        if (!single && !batched) {
            throw ConfigError("expected cuboids of shape [N,10,10,3], got " + shape_string(s));
        }
        Tensor<T> x = single ? batch.reshaped({1, kPatch, kPatch, kDepth}) : batch;
        if (remember) batch_ = x.dim(0);
        return x;
    }

    Tensor<T> concat_features(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) const {
        const std::size_t n = a.dim(0);
        const std::size_t la = a.dim(1), lb = b.dim(1), lc = c.dim(1);
        Tensor<T> out(Shape{n, la + lb + lc});
        for (std::size_t i = 0; i < n; ++i) {
            T* dst = out.data() + i * (la + lb + lc);
            std::copy_n(a.data() + i * la, la, dst);
            std::copy_n(b.data() + i * lb, lb, dst + la);
            std::copy_n(c.data() + i * lc, lc, dst + la + lb);
        }
        return out;
    }

    std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> split_features(const Tensor<T>& f) const {
        const std::size_t n = f.dim(0);
        const std::size_t la = kPatch * kPatch * kBranch1Channels, lb = 5 * 5 * kBranch2Channels, lc = 3 * 3 * 256;
        Tensor<T> a(Shape{n, la}), b(Shape{n, lb}), c(Shape{n, lc});
        for (std::size_t i = 0; i < n; ++i) {
            const T* src = f.data() + i * (la + lb + lc);
            std::copy_n(src, la, a.data() + i * la);
            std::copy_n(src + la, lb, b.data() + i * lb);
            std::copy_n(src + la + lb, lc, c.data() + i * lc);
        }
        return {std::move(a), std::move(b), std::move(c)};
    }

    static void add_into(Tensor<T>& acc, const Tensor<T>& g) {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }

    static std::vector<Parameter<T>*> collect(std::initializer_list<Sequential<T>*> blocks) {
        std::vector<Parameter<T>*> out;
        for (auto* b : blocks)
            for (auto* p : b->parameters()) out.push_back(p);
        return out;
    }

    std::vector<Sequential<T>*> all_blocks() {
        return {&enc1_, &enc2_, &enc3_, &dec_, &branch1_, &branch2_, &branch3_, &tower_x_, &tower_y_, &disc_};
    }

    ModelConfig cfg_;
    std::shared_ptr<std::mt19937_64> rng_;
    Sequential<T> enc1_, enc2_, enc3_, dec_;
    Sequential<T> branch1_, branch2_, branch3_, tower_x_, tower_y_;
    Sequential<T> disc_;
    std::size_t batch_ = 0;
    Tensor<T> input_grad_;
};

}  // namespace hvad

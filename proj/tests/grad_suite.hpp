#pragma once

// Finite-difference gradient suite over every layer kind, every loss and the
// assembled network. Each entry reports the worst relative error across seeds.

#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hvad/gradcheck.hpp"
#include "hvad/layers.hpp"
#include "hvad/losses.hpp"
#include "hvad/model.hpp"
#include "oracles.hpp"

namespace suite {

using namespace hvad;

struct Outcome {
    std::string op;
    int seeds = 0;
    double max_rel_error = 0.0;
    std::string worst;  // target name at the worst seed
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

inline void absorb(Outcome& o, const GradCheckReport& r) {
    for (const auto& e : r.entries) {
        o.checked += e.checked;
        o.skipped += e.skipped;
        if (e.max_rel_error >= o.max_rel_error) {
            o.max_rel_error = e.max_rel_error;
            o.worst = e.name;
        }
    }
}

template <class Make>
Outcome layer_case(const std::string& op, int seeds, Make make) {
    Outcome o;
    o.op = op;
    for (int s = 0; s < seeds; ++s) {
        absorb(o, make(static_cast<std::uint64_t>(s)));
        ++o.seeds;
    }
    return o;
}

inline void randomize(std::vector<Parameter<double>*> ps, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    for (auto* p : ps) p->value = oracle::random_tensor(p->shape(), rng, lo, hi);
}

inline Tensor<double> away_from_zero(Tensor<double> t) {
    for (auto& v : t.storage())
        if (std::abs(v) < 1e-3) v = 0.5;
    return t;
}

inline Tensor<double> random_simplex(std::size_t n, std::size_t k, std::mt19937_64& rng) {
    auto t = oracle::random_tensor({n, k}, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += t.at(i, j);
        for (std::size_t j = 0; j < k; ++j) t.at(i, j) /= s;
    }
    return t;
}

// The objectives contain |.| and rectifier kinks; coordinates whose step
// straddles one are skipped and counted.
inline GradCheckOptions kinked(std::size_t coords = 0, std::uint64_t seed = 0) {
    GradCheckOptions o;
    o.kink_tolerance = 1e-2;
    o.max_coords = coords;
    o.sample_seed = seed;
    return o;
}

inline std::vector<Outcome> layer_suite(int seeds) {
    std::vector<Outcome> out;
    out.push_back(layer_case("conv2d 3x3/1", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(s);
        Conv2D<double> l("conv", 2, 3, 3, 1, rng);
        randomize(l.parameters(), rng);
        return grad_check_layer(l, oracle::random_tensor({2, 5, 5, 2}, rng), Mode::train, s);
    }));
    out.push_back(layer_case("conv2d 3x3/2", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(100 + s);
        Conv2D<double> l("conv", 2, 3, 3, 2, rng);
        randomize(l.parameters(), rng);
        return grad_check_layer(l, oracle::random_tensor({2, 5, 5, 2}, rng), Mode::train, s);
    }));
    out.push_back(layer_case("conv2d 1x1/1", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(200 + s);
        Conv2D<double> l("conv", 3, 2, 1, 1, rng);
        randomize(l.parameters(), rng);
        return grad_check_layer(l, oracle::random_tensor({2, 4, 4, 3}, rng), Mode::train, s);
    }));
    out.push_back(layer_case("deconv2d 3x3/2", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(300 + s);
        const bool big = s % 2;
        Deconv2D<double> l("deconv", 2, 3, 3, 2, big ? std::pair<std::size_t, std::size_t>{10, 10} : std::pair<std::size_t, std::size_t>{5, 5}, rng);
        randomize(l.parameters(), rng);
        const std::size_t h = big ? 5 : 3;
        return grad_check_layer(l, oracle::random_tensor({2, h, h, 2}, rng), Mode::train, s);
    }));
    out.push_back(layer_case("dense", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(400 + s);
        Dense<double> l("fc", 6, 4, rng);
        randomize(l.parameters(), rng);
        return grad_check_layer(l, oracle::random_tensor({3, 6}, rng), Mode::train, s);
    }));
    out.push_back(layer_case("batchnorm train", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(500 + s);
        BatchNorm<double> l("bn", 3, {});
        randomize(l.parameters(), rng, 0.5, 1.5);
        return grad_check_layer(l, oracle::random_tensor({3, 2, 2, 3}, rng, -2, 2), Mode::train, s);
    }));
    out.push_back(layer_case("batchnorm eval", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(600 + s);
        BatchNorm<double> l("bn", 3, {});
        randomize(l.parameters(), rng, 0.5, 1.5);
        for (auto& [n, b] : l.buffers()) *b = oracle::random_tensor(b->shape(), rng, 0.5, 1.5);
        return grad_check_layer(l, oracle::random_tensor({3, 2, 2, 3}, rng, -2, 2), Mode::eval, s);
    }));
    for (auto kind : {ActivationKind::relu, ActivationKind::leaky_relu, ActivationKind::sigmoid, ActivationKind::softmax}) {
        out.push_back(layer_case(to_string(kind), seeds, [kind](std::uint64_t s) {
            std::mt19937_64 rng(700 + s);
            Activation<double> l("act", kind, 0.2);
            return grad_check_layer(l, away_from_zero(oracle::random_tensor({3, 7}, rng, -3, 3)), Mode::train, s);
        }));
    }
    out.push_back(layer_case("dropout", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(800 + s);
        auto drng = std::make_shared<std::mt19937_64>();
        Dropout<double> l("drop", 0.5, drng);
        return grad_check_layer(l, oracle::random_tensor({2, 9}, rng), Mode::train, s, {}, [&] { drng->seed(s); });
    }));
    out.push_back(layer_case("flatten", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(900 + s);
        Flatten<double> l("flat");
        return grad_check_layer(l, oracle::random_tensor({2, 3, 3, 2}, rng), Mode::train, s);
    }));
    return out;
}

// Loss gradients with respect to the quantities the network produces.
inline std::vector<Outcome> loss_suite(int seeds) {
    std::vector<Outcome> out;
    const LossWeights w;
    out.push_back(layer_case("reconstruction loss", seeds, [&](std::uint64_t s) {
        std::mt19937_64 rng(1000 + s);
        auto c = oracle::random_tensor({2, 10, 10, 3}, rng, 0, 1);
        auto m = oracle::random_tensor({2, 10, 10, 3}, rng, 0, 1);
        ForwardOutputs<double> fo;
        fo.reconstruction = m;
        fo.probs_x = random_simplex(2, 8, rng);
        fo.probs_y = random_simplex(2, 6, rng);
        PositionLabels labels{{1, 7}, {0, 5}};
        LossWeights rw = w;
        rw.lambda_C = 0;
        GeneratorLossGrads<double> g;
        auto loss = [&] { return generator_loss(c, fo, labels, rw, nullptr).total_G; };
        auto fill = [&] { generator_loss(c, fo, labels, rw, nullptr, &g); };
        return grad_check({{"reconstruction", &*fo.reconstruction, &g.reconstruction}}, loss, fill, kinked());
    }));
    out.push_back(layer_case("classification loss", seeds, [&](std::uint64_t s) {
        std::mt19937_64 rng(1100 + s);
        auto c = oracle::random_tensor({3, 10, 10, 3}, rng, 0, 1);
        ForwardOutputs<double> fo;
        fo.probs_x = random_simplex(3, 16, rng);
        fo.probs_y = random_simplex(3, 12, rng);
        std::uniform_int_distribution<std::size_t> ux(0, 15), uy(0, 11);
        PositionLabels labels{{ux(rng), ux(rng), ux(rng)}, {uy(rng), uy(rng), uy(rng)}};
        GeneratorLossGrads<double> g;
        auto loss = [&] { return generator_loss(c, fo, labels, w, nullptr).total_G; };
        auto fill = [&] { generator_loss(c, fo, labels, w, nullptr, &g); };
        return grad_check({{"probs_x", &fo.probs_x, &g.probs_x}, {"probs_y", &fo.probs_y, &g.probs_y}}, loss, fill);
    }));
    out.push_back(layer_case("generator adversarial term", seeds, [&](std::uint64_t s) {
        std::mt19937_64 rng(1200 + s);
        auto c = oracle::random_tensor({4, 10, 10, 3}, rng, 0, 1);
        ForwardOutputs<double> fo;
        fo.reconstruction = oracle::random_tensor({4, 10, 10, 3}, rng, 0, 1);
        fo.probs_x = random_simplex(4, 8, rng);
        fo.probs_y = random_simplex(4, 6, rng);
        PositionLabels labels{{0, 1, 2, 3}, {0, 1, 2, 3}};
        auto d = oracle::random_tensor({4}, rng, 0.05, 0.95);
        GeneratorLossGrads<double> g;
        auto loss = [&] { return generator_loss(c, fo, labels, w, &d).total_G; };
        auto fill = [&] { generator_loss(c, fo, labels, w, &d, &g); };
        return grad_check({{"d_score", &d, &g.d_score}, {"reconstruction", &*fo.reconstruction, &g.reconstruction}},
                          loss, fill, kinked());
    }));
    out.push_back(layer_case("discriminator loss", seeds, [](std::uint64_t s) {
        std::mt19937_64 rng(1300 + s);
        auto real = oracle::random_tensor({5}, rng, 0.05, 0.95);
        auto fake = oracle::random_tensor({5}, rng, 0.05, 0.95);
        Tensor<double> gr, gf;
        auto loss = [&] { return discriminator_loss_batch(real, fake); };
        auto fill = [&] { discriminator_loss_batch(real, fake, &gr, &gf); };
        return grad_check({{"d_real", &real, &gr}, {"d_fake", &fake, &gf}}, loss, fill);
    }));
    return out;
}

// Generator objective through the whole network (encoder, decoder, classifier
// and the discriminator's input gradient) w.r.t. sampled parameter entries.
inline GradCheckReport model_generator_check(std::uint64_t seed, std::size_t coords) {
    ModelConfig cfg;
    cfg.frame_width = 80;
    cfg.frame_height = 60;
    HybridModel<double> m(cfg, seed);
    std::mt19937_64 rng(seed + 77);
    auto x = oracle::random_tensor({3, 10, 10, 3}, rng, 0, 1);
    PositionLabels labels{{0, 3, 7}, {5, 2, 0}};
    const LossWeights w;
    auto run = [&](bool backward) {
        m.seed_dropout(seed);
        auto out = m.forward_generator(x, Mode::train);
        auto d = m.forward_discriminator(*out.reconstruction, Mode::train);
        GeneratorLossGrads<double> g;
        auto rep = generator_loss(x, out, labels, w, &d, backward ? &g : nullptr);
        if (backward) {
            for (auto* p : m.parameters()) p->zero_grad();
            Tensor<double> dr = m.backward_discriminator(g.d_score);
            for (std::size_t i = 0; i < dr.size(); ++i) g.reconstruction[i] += dr[i];
            m.backward_generator({&g.reconstruction, &g.probs_x, &g.probs_y});
        }
        return rep.total_G;
    };
    std::vector<CheckTarget> targets;
    for (auto* p : m.generator_parameters()) targets.push_back({p->name, &p->value, &p->grad});
    auto opt = kinked(coords, seed);
    opt.step = 1e-6;  // a bias shift moves thousands of rectifier inputs
    // Biases feeding batchnorm have an exact zero gradient; their central
    // difference is pure round-off near 1e-7, against O(1) real gradients.
    opt.floor = 1e-2;
    return grad_check(targets, [&] { return run(false); }, [&] { run(true); }, opt);
}

// Discriminator objective w.r.t. sampled discriminator parameters.
inline GradCheckReport model_discriminator_check(std::uint64_t seed, std::size_t coords) {
    ModelConfig cfg;
    cfg.frame_width = 80;
    cfg.frame_height = 60;
    HybridModel<double> m(cfg, seed);
    std::mt19937_64 rng(seed + 91);
    auto real = oracle::random_tensor({3, 10, 10, 3}, rng, 0, 1);
    auto fake = oracle::random_tensor({3, 10, 10, 3}, rng, 0, 1);
    // Both batches pass through one forward so batch statistics are shared
    // the same way in the loss and in its gradient.
    auto run = [&](bool backward) {
        Tensor<double> both(Shape{6, 10, 10, 3});
        std::copy(real.storage().begin(), real.storage().end(), both.data());
        std::copy(fake.storage().begin(), fake.storage().end(), both.data() + real.size());
        auto d = m.forward_discriminator(both, Mode::train);
        Tensor<double> dr(Shape{3}), df(Shape{3});
        for (std::size_t i = 0; i < 3; ++i) { dr[i] = d[i]; df[i] = d[3 + i]; }
        Tensor<double> gr, gf;
        const double loss = discriminator_loss_batch(dr, df, backward ? &gr : nullptr, backward ? &gf : nullptr);
        if (backward) {
            for (auto* p : m.discriminator_parameters()) p->zero_grad();
            Tensor<double> g(Shape{6});
            for (std::size_t i = 0; i < 3; ++i) { g[i] = gr[i]; g[3 + i] = gf[i]; }
            m.backward_discriminator(g);
        }
        return loss;
    };
    std::vector<CheckTarget> targets;
    for (auto* p : m.discriminator_parameters()) targets.push_back({p->name, &p->value, &p->grad});
    return grad_check(targets, [&] { return run(false); }, [&] { run(true); }, kinked(coords, seed));
}

inline std::vector<Outcome> model_suite(int seeds, std::size_t coords) {
    std::vector<Outcome> out;
    out.push_back(layer_case("network: generator objective", seeds,
                             [&](std::uint64_t s) { return model_generator_check(s, coords); }));
    out.push_back(layer_case("network: discriminator objective", seeds,
                             [&](std::uint64_t s) { return model_discriminator_check(s, coords); }));
    return out;
}

}  // namespace suite

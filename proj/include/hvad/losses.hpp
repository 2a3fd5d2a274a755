#pragma once

// Reconstruction, position-classification and adversarial objectives.
// Per-sample losses are summed over elements; batch losses are batch means.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hvad/errors.hpp"
#include "hvad/model.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

inline constexpr double kLogClamp = 1e-12;

struct LossWeights {
    double lambda_l2 = 1.0;
    double lambda_grad = 1.0 / 3.0;
    double lambda_G = 0.25;
    double lambda_R = 1.0;
    double lambda_C = 1.0;

    void validate() const {
        for (double v : {lambda_l2, lambda_grad, lambda_G, lambda_R, lambda_C}) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and nonnegative");
        }
    }
};

struct LossReport {
    double recon_l2 = 0.0;        // ||c - M(c)||^2, batch mean
    double recon_grad = 0.0;      // sum_d || |grad_d c| - |grad_d M(c)| ||_1, batch mean
    double reconstruction = 0.0;  // lambda_l2 * recon_l2 + lambda_grad * recon_grad
    double classification = 0.0;
    double adversarial_G = 0.0;   // -log D(M(c)), batch mean
    double discriminator = 0.0;
    double total_G = 0.0;

    static constexpr const char* csv_header =
        "recon_l2,recon_grad,reconstruction,classification,adversarial_G,discriminator,total_G";

    bool finite() const {
        for (double v : {recon_l2, recon_grad, reconstruction, classification, adversarial_G, discriminator, total_G})
            if (!std::isfinite(v)) return false;
        return true;
    }
};

enum class Axis { x, y, t };

/// Forward difference of a [rows, cols, time] cuboid along one axis; that axis
/// shrinks by one.
template <class T>
Tensor<T> grad3d(const Tensor<T>& c, Axis axis) {
    if (c.rank() != 3) throw ConfigError("grad3d expects a [H,W,T] cuboid");
    const std::size_t H = c.dim(0), W = c.dim(1), D = c.dim(2);
    const std::size_t dy = axis == Axis::y, dx = axis == Axis::x, dt = axis == Axis::t;
    if ((dy && H < 2) || (dx && W < 2) || (dt && D < 2)) throw ConfigError("grad3d: axis length must be at least 2");
    Tensor<T> out(Shape{H - dy, W - dx, D - dt});
    for (std::size_t i = 0; i < H - dy; ++i)
        for (std::size_t j = 0; j < W - dx; ++j)
            for (std::size_t k = 0; k < D - dt; ++k) out.at(i, j, k) = c.at(i + dy, j + dx, k + dt) - c.at(i, j, k);
    return out;
}

namespace detail {

inline double signum(double v) { return (v > 0) - (v < 0); }

// Per-sample reconstruction terms for the cuboid at `base`; optionally adds
// scale_l2 * d(l2)/dm and scale_grad * d(grad term)/dm into gm.
template <class T>
std::pair<double, double> reconstruction_terms(const T* c, const T* m, T* gm, double scale_l2, double scale_grad) {
    constexpr std::size_t H = kPatch, W = kPatch, D = kDepth;
    auto idx = [](std::size_t i, std::size_t j, std::size_t k) { return (i * W + j) * D + k; };
    double l2 = 0.0;
    for (std::size_t i = 0; i < H * W * D; ++i) {
        const double e = static_cast<double>(c[i]) - m[i];
        l2 += e * e;
        if (gm) gm[i] += static_cast<T>(scale_l2 * -2.0 * e);
    }
    double g = 0.0;
    const std::size_t steps[3][3] = {{0, 1, 0}, {1, 0, 0}, {0, 0, 1}};  // x, y, t
    for (const auto& s : steps) {
        for (std::size_t i = 0; i + s[0] < H; ++i)
            for (std::size_t j = 0; j + s[1] < W; ++j)
                for (std::size_t k = 0; k + s[2] < D; ++k) {
                    const std::size_t a = idx(i, j, k), b = idx(i + s[0], j + s[1], k + s[2]);
                    const double gc = static_cast<double>(c[b]) - c[a];
                    const double gmv = static_cast<double>(m[b]) - m[a];
                    const double diff = std::abs(gc) - std::abs(gmv);
                    g += std::abs(diff);
                    if (gm) {
                        const double d = scale_grad * -signum(diff) * signum(gmv);
                        gm[b] += static_cast<T>(d);
                        gm[a] -= static_cast<T>(d);
                    }
                }
    }
    return {l2, g};
}

}  // namespace detail

/// lambda_l2 * ||c - m||_2^2 + lambda_grad * sum_{d in x,y,t} || |grad_d c| - |grad_d m| ||_1
template <class T>
double reconstruction_loss(const Tensor<T>& c, const Tensor<T>& m, const LossWeights& w) {
    if (c.shape() != m.shape() || c.shape() != Shape{kPatch, kPatch, kDepth}) {
        throw ConfigError("reconstruction_loss expects two [10,10,3] cuboids");
    }
    auto [l2, g] = detail::reconstruction_terms<T>(c.data(), m.data(), nullptr, 0, 0);
    return w.lambda_l2 * l2 + w.lambda_grad * g;
}

/// -log p_x(label_x) - log p_y(label_y), probabilities clamped at 1e-12.
template <class T>
double classification_loss(std::span<const T> probs_x, std::span<const T> probs_y, std::size_t label_x,
                           std::size_t label_y) {
    if (label_x >= probs_x.size() || label_y >= probs_y.size()) {
        throw DataError("position label (" + std::to_string(label_x) + "," + std::to_string(label_y) +
                        ") outside grid " + std::to_string(probs_x.size()) + "x" + std::to_string(probs_y.size()));
    }
    return -std::log(std::max<double>(probs_x[label_x], kLogClamp)) -
           std::log(std::max<double>(probs_y[label_y], kLogClamp));
}

inline double clamp_probability(double p) { return std::clamp(p, kLogClamp, 1.0 - kLogClamp); }

/// -1/2 log D(c) - 1/2 log(1 - D(M(c)))
inline double discriminator_loss(double d_real, double d_fake) {
    return -0.5 * std::log(clamp_probability(d_real)) - 0.5 * std::log(1.0 - clamp_probability(d_fake));
}

/// Batch of position labels, one pair per cuboid.
struct PositionLabels {
    std::vector<std::size_t> x, y;
    std::size_t size() const { return x.size(); }
};

/// Gradients of the generator objective w.r.t. the generator outputs and the
/// discriminator score of the reconstructions.
template <class T>
struct GeneratorLossGrads {
    Tensor<T> reconstruction;
    Tensor<T> probs_x;
    Tensor<T> probs_y;
    Tensor<T> d_score;  // empty when the adversarial term is off
};

/// Generator objective for a batch:
///   total_G = lambda_G * (-log D(M(c))) + lambda_R * L_R + lambda_C * L_C
/// averaged over the batch. `d_fake` may be null (adversarial term dropped).
template <class T>
LossReport generator_loss(const Tensor<T>& cuboids, const ForwardOutputs<T>& out, const PositionLabels& labels,
                          const LossWeights& w, std::type_identity_t<const Tensor<T>*> d_fake,
                          std::type_identity_t<GeneratorLossGrads<T>*> grads = nullptr) {
    const std::size_t n = out.probs_x.dim(0);
    const std::size_t gw = out.probs_x.dim(1), gh = out.probs_y.dim(1);
    if (labels.size() != n) throw DataError("label count does not match batch size");
    const double inv_n = 1.0 / static_cast<double>(n);
    constexpr std::size_t cub = kPatch * kPatch * kDepth;

    LossReport r;
    if (grads) {
        grads->probs_x = Tensor<T>(out.probs_x.shape());
        grads->probs_y = Tensor<T>(out.probs_y.shape());
        if (out.reconstruction) grads->reconstruction = Tensor<T>(out.reconstruction->shape());
        grads->d_score = Tensor<T>();
    }

    if (out.reconstruction) {
        const Tensor<T>& m = *out.reconstruction;
        if (cuboids.size() != m.size()) throw ConfigError("reconstruction and input batch differ in size");
        for (std::size_t i = 0; i < n; ++i) {
            T* gm = grads ? grads->reconstruction.data() + i * cub : nullptr;
            auto [l2, g] = detail::reconstruction_terms<T>(cuboids.data() + i * cub, m.data() + i * cub, gm,
                                                           w.lambda_R * w.lambda_l2 * inv_n,
                                                           w.lambda_R * w.lambda_grad * inv_n);
            r.recon_l2 += l2 * inv_n;
            r.recon_grad += g * inv_n;
        }
        r.reconstruction = w.lambda_l2 * r.recon_l2 + w.lambda_grad * r.recon_grad;
    }

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lx = labels.x[i], ly = labels.y[i];
        std::span<const T> px(out.probs_x.data() + i * gw, gw), py(out.probs_y.data() + i * gh, gh);
        r.classification += classification_loss<T>(px, py, lx, ly) * inv_n;
        if (grads) {
            if (px[lx] > kLogClamp) grads->probs_x[i * gw + lx] = static_cast<T>(-w.lambda_C * inv_n / px[lx]);
            if (py[ly] > kLogClamp) grads->probs_y[i * gh + ly] = static_cast<T>(-w.lambda_C * inv_n / py[ly]);
        }
    }

    if (d_fake && w.lambda_G > 0.0) {
        if (grads) grads->d_score = Tensor<T>(d_fake->shape());
        for (std::size_t i = 0; i < n; ++i) {
            const double d = (*d_fake)[i];
            r.adversarial_G += -std::log(clamp_probability(d)) * inv_n;
            if (grads && d > kLogClamp && d < 1.0 - kLogClamp) grads->d_score[i] = static_cast<T>(-w.lambda_G * inv_n / d);
        }
    }

    r.total_G = w.lambda_G * r.adversarial_G + w.lambda_R * r.reconstruction + w.lambda_C * r.classification;
    return r;
}

/// Batch-mean discriminator loss and its gradients w.r.t. both score vectors.
template <class T>
double discriminator_loss_batch(const Tensor<T>& d_real, const Tensor<T>& d_fake, Tensor<T>* grad_real = nullptr,
                                Tensor<T>* grad_fake = nullptr) {
    const std::size_t n = d_real.size();
    if (d_fake.size() != n) throw ConfigError("discriminator score batches differ in size");
    const double inv_n = 1.0 / static_cast<double>(n);
    if (grad_real) *grad_real = Tensor<T>(d_real.shape());
    if (grad_fake) *grad_fake = Tensor<T>(d_fake.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loss += discriminator_loss(d_real[i], d_fake[i]) * inv_n;
        const double r = d_real[i], f = d_fake[i];
        if (grad_real && r > kLogClamp && r < 1.0 - kLogClamp) (*grad_real)[i] = static_cast<T>(-0.5 * inv_n / r);
        if (grad_fake && f > kLogClamp && f < 1.0 - kLogClamp) (*grad_fake)[i] = static_cast<T>(0.5 * inv_n / (1.0 - f));
    }
    return loss;
}

}  // namespace hvad

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "hvad/tensor.hpp"

namespace hvad {

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SgdOptions {
    double lr = 1e-4;
};

/// Learning-rate multiplier per epoch; constant by default.
using LrSchedule = std::function<double(std::uint64_t epoch)>;

/// Adam with bias-corrected moments. Moments live in Parameter::slots[0..1].
class Adam {
public:
    explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

    template <class T>
    void step(std::span<Parameter<T>* const> params, double lr_scale = 1.0) {
        ++steps_;
        const double lr = opt_.lr * lr_scale;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
        for (Parameter<T>* p : params) {
            if (p->slots.size() < 2) {
                p->slots.assign(2, Tensor<T>(p->shape()));
            }
            Tensor<T>& m = p->slots[0];
            Tensor<T>& v = p->slots[1];
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i];
                const double mi = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
                const double vi = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                p->value[i] = static_cast<T>(p->value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + opt_.eps));
            }
        }
    }

    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }
    const AdamOptions& options() const { return opt_; }

private:
    AdamOptions opt_;
    std::uint64_t steps_ = 0;
};

/// Plain gradient descent.
class Sgd {
public:
    explicit Sgd(SgdOptions opt = {}) : opt_(opt) {}

    template <class T>
    void step(std::span<Parameter<T>* const> params, double lr_scale = 1.0) {
        ++steps_;
        const double lr = opt_.lr * lr_scale;
        for (Parameter<T>* p : params)
            for (std::size_t i = 0; i < p->value.size(); ++i)
                p->value[i] = static_cast<T>(p->value[i] - lr * p->grad[i]);
    }

    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }
    const SgdOptions& options() const { return opt_; }

private:
    SgdOptions opt_;
    std::uint64_t steps_ = 0;
};

}  // namespace hvad

#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "hvad/ops.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

/// A tensor whose analytic gradient is checked.
struct CheckTarget {
    std::string name;
    Tensor<double>* value = nullptr;
    Tensor<double>* grad = nullptr;
};

struct GradCheckOptions {
    double step = 1e-5;
    /// Denominator floor of the relative error: |a - n| / max(|a|, |n|, floor).
    /// Keeps exact zeros (e.g. a bias feeding batchnorm) from reporting roundoff
    /// as a relative error of 1.
    double floor = 1e-5;
    /// Coordinates checked per target; 0 checks all of them.
    std::size_t max_coords = 0;
    std::uint64_t sample_seed = 0;
    /// Skip coordinates whose one-sided differences disagree by more than this
    /// fraction: a kink (relu, |x|) lies inside the step and neither side is the
    /// derivative. 0 disables the test.
    double kink_tolerance = 0.0;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates straddling a kink
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
    bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

/// `loss` evaluates the scalar objective at the current values; `fill_grads`
/// writes the analytic gradient of that objective into every target's grad.
inline GradCheckReport grad_check(std::vector<CheckTarget> targets, const std::function<double()>& loss,
                                  const std::function<void()>& fill_grads, const GradCheckOptions& opt = {}) {
    fill_grads();
    // Snapshot analytic gradients: later loss() calls may touch layer caches.
    std::vector<Tensor<double>> analytic;
    analytic.reserve(targets.size());
    for (const auto& t : targets) analytic.push_back(*t.grad);

    GradCheckReport report;
    const double center = opt.kink_tolerance > 0 ? loss() : 0.0;
    std::mt19937_64 rng(opt.sample_seed);
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        Tensor<double>& v = *targets[ti].value;
        std::vector<std::size_t> coords(v.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opt.max_coords && coords.size() > opt.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.max_coords);
        }
        GradCheckEntry e;
        e.name = targets[ti].name;
        for (std::size_t i : coords) {
            const double orig = v[i];
            v[i] = orig + opt.step;
            const double up = loss();
            v[i] = orig - opt.step;
            const double down = loss();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * opt.step);
            if (opt.kink_tolerance > 0) {
                const double fwd = (up - center) / opt.step, bwd = (center - down) / opt.step;
                const double jump = std::abs(fwd - bwd);
                if (jump > opt.floor && jump > opt.kink_tolerance * std::max(std::abs(fwd), std::abs(bwd))) {
                    ++e.skipped;
                    continue;
                }
            }
            const double a = analytic[ti][i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
            if (rel > e.max_rel_error || e.checked == 0) {
                e.max_rel_error = rel;
                e.worst_index = i;
                e.analytic_at_worst = a;
                e.numeric_at_worst = numeric;
            }
            ++e.checked;
        }
        report.entries.push_back(e);
    }
    return report;
}

/// Checks a layer against the objective sum(layer(x) * R) for a fixed random
/// projection R. Input gradients are included when the layer propagates them.
template <class LayerT>
GradCheckReport grad_check_layer(LayerT& layer, Tensor<double> input, Mode mode, std::uint64_t seed,
                                 const GradCheckOptions& opt = {},
                                 const std::function<void()>& before_forward = {}) {
    if (before_forward) before_forward();
    Tensor<double> probe = layer.forward(input, mode);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<double> proj(probe.shape());
    for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = nd(rng);

    Tensor<double> input_grad(input.shape());
    std::vector<CheckTarget> targets;
    if (layer.propagate_input_grad) targets.push_back({"input", &input, &input_grad});
    for (auto* p : layer.parameters()) targets.push_back({p->name, &p->value, &p->grad});

    auto loss = [&] {
        if (before_forward) before_forward();
        return dot(layer.forward(input, mode), proj);
    };
    auto fill = [&] {
        for (auto* p : layer.parameters()) p->zero_grad();
        if (before_forward) before_forward();
        layer.forward(input, mode);
        Tensor<double> g = layer.backward(proj);
        if (layer.propagate_input_grad) input_grad = g;
    };
    return grad_check(std::move(targets), loss, fill, opt);
}

}  // namespace hvad

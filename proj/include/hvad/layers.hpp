#pragma once

// Stateful layer wrappers around the kernels in ops.hpp. Each layer caches
// what its backward pass needs; parameter gradients accumulate until the
// caller zeroes them.

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hvad/ops.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
template <class T>
Tensor<T> scaled_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
    return t;
}

template <class T>
class Layer {
public:
    virtual ~Layer() = default;

    // Tensors pass by value so elementwise layers can work in place on a
    // moved-in argument.
    virtual Tensor<T> forward(Tensor<T> input, Mode mode) = 0;
    virtual Tensor<T> backward(Tensor<T> grad_out) = 0;

    virtual std::vector<Parameter<T>*> parameters() { return {}; }
    /// Non-trainable state that must survive checkpointing.
    virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }

    /// Short operation label ("conv", "bnorm", ...).
    virtual std::string kind() const = 0;
    /// Hyperparameter summary ("3x3 / 2", "0.2", ...).
    virtual std::string describe() const { return "-"; }

    const std::string& name() const { return name_; }

    /// When false, backward skips the input gradient and returns an empty tensor.
    bool propagate_input_grad = true;

protected:
    explicit Layer(std::string name) : name_(std::move(name)) {}

private:
    std::string name_;
};

template <class T>
class Conv2D final : public Layer<T> {
public:
    Conv2D(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
           std::mt19937_64& rng)
        : Layer<T>(name),
          stride_(stride),
          filters_(name + "/filters",
                   scaled_uniform<T>({kernel, kernel, in_ch, out_ch}, kernel * kernel * in_ch, kernel * kernel * out_ch, rng)),
          bias_(name + "/bias", Tensor<T>(Shape{out_ch})) {}

    Tensor<T> forward(Tensor<T> input, Mode) override {
        input_ = std::move(input);
        return conv2d(input_, filters_.value, bias_.value, stride_);
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        return conv2d_backward(input_, filters_.value, stride_, grad_out, filters_.grad, bias_.grad,
                               this->propagate_input_grad);
    }
    std::vector<Parameter<T>*> parameters() override { return {&filters_, &bias_}; }
    std::string kind() const override { return "conv"; }
    std::string describe() const override {
        const auto k = std::to_string(filters_.value.dim(0));
        return k + "x" + k + " / " + std::to_string(stride_);
    }

    Parameter<T>& filters() { return filters_; }
    Parameter<T>& bias() { return bias_; }

private:
    std::size_t stride_;
    Parameter<T> filters_, bias_;
    Tensor<T> input_;
};

template <class T>
class Deconv2D final : public Layer<T> {
public:
    Deconv2D(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
             std::pair<std::size_t, std::size_t> target_hw, std::mt19937_64& rng)
        : Layer<T>(name),
          stride_(stride),
          target_(target_hw),
          filters_(name + "/filters",
                   scaled_uniform<T>({kernel, kernel, out_ch, in_ch}, kernel * kernel * in_ch, kernel * kernel * out_ch, rng)),
          bias_(name + "/bias", Tensor<T>(Shape{out_ch})) {}

    Tensor<T> forward(Tensor<T> input, Mode) override {
        input_ = std::move(input);
        return deconv2d(input_, filters_.value, bias_.value, stride_, target_);
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        return deconv2d_backward(input_, filters_.value, stride_, grad_out, filters_.grad, bias_.grad,
                                 this->propagate_input_grad);
    }
    std::vector<Parameter<T>*> parameters() override { return {&filters_, &bias_}; }
    std::string kind() const override { return "deconv"; }
    std::string describe() const override {
        const auto k = std::to_string(filters_.value.dim(0));
        return k + "x" + k + " / " + std::to_string(stride_);
    }

private:
    std::size_t stride_;
    std::pair<std::size_t, std::size_t> target_;
    Parameter<T> filters_, bias_;
    Tensor<T> input_;
};

template <class T>
class Dense final : public Layer<T> {
public:
    Dense(std::string name, std::size_t in_features, std::size_t units, std::mt19937_64& rng)
        : Layer<T>(name),
          weights_(name + "/weights", scaled_uniform<T>({in_features, units}, in_features, units, rng)),
          bias_(name + "/bias", Tensor<T>(Shape{units})) {}

    /// Inputs of rank > 2 are flattened to [N, features].
    Tensor<T> forward(Tensor<T> input, Mode) override {
        in_shape_ = input.shape();
        input_ = std::move(input);
        if (input_.rank() != 2) input_.reshape({in_shape_[0], input_.size() / in_shape_[0]});
        return dense(input_, weights_.value, bias_.value);
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        Tensor<T> g = dense_backward(input_, weights_.value, grad_out, weights_.grad, bias_.grad, this->propagate_input_grad);
        if (!g.empty()) g.reshape(in_shape_);
        return g;
    }
    std::vector<Parameter<T>*> parameters() override { return {&weights_, &bias_}; }
    std::string kind() const override { return "fc"; }

    Parameter<T>& weights() { return weights_; }

private:
    Parameter<T> weights_, bias_;
    Tensor<T> input_;
    Shape in_shape_;
};

template <class T>
class BatchNorm final : public Layer<T> {
public:
    BatchNorm(std::string name, std::size_t channels, BatchNormOptions opt)
        : Layer<T>(name),
          opt_(opt),
          gamma_(name + "/gamma", Tensor<T>(Shape{channels}, T{1})),
          beta_(name + "/beta", Tensor<T>(Shape{channels})),
          running_mean_(Shape{channels}),
          running_var_(Shape{channels}, T{1}) {}

    /// A run of consecutive calibrate passes replaces the running statistics
    /// with the pooled mean and variance of every value it has seen; any other
    /// pass ends the run.
    Tensor<T> forward(Tensor<T> input, Mode mode) override {
        if (mode != Mode::calibrate) {
            pooled_count_ = 0.0;
            return batchnorm(std::move(input), gamma_.value, beta_.value, mode, running_mean_, running_var_, opt_,
                             &cache_);
        }
        const std::size_t c = gamma_.value.size();
        Tensor<T> mean(Shape{c}), var(Shape{c});
        BatchNormOptions batch_only = opt_;
        batch_only.momentum = 0.0;
        const double n = static_cast<double>(input.size() / std::max<std::size_t>(c, 1));
        Tensor<T> out = batchnorm(std::move(input), gamma_.value, beta_.value, Mode::train, mean, var, batch_only);
        if (pooled_count_ == 0.0) pooled_sum_.assign(c, 0.0), pooled_sq_.assign(c, 0.0);
        pooled_count_ += n;
        for (std::size_t j = 0; j < c; ++j) {
            pooled_sum_[j] += n * mean[j];
            pooled_sq_[j] += n * (static_cast<double>(var[j]) + static_cast<double>(mean[j]) * mean[j]);
            const double m = pooled_sum_[j] / pooled_count_;
            running_mean_[j] = static_cast<T>(m);
            running_var_[j] = static_cast<T>(std::max(0.0, pooled_sq_[j] / pooled_count_ - m * m));
        }
        return out;
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        return batchnorm_backward(cache_, gamma_.value, grad_out, gamma_.grad, beta_.grad);
    }
    std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_}; }
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
        return {{this->name() + "/running_mean", &running_mean_}, {this->name() + "/running_var", &running_var_}};
    }
    std::string kind() const override { return "bnorm"; }

private:
    BatchNormOptions opt_;
    Parameter<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    BatchNormCache<T> cache_;
    double pooled_count_ = 0.0;
    std::vector<double> pooled_sum_, pooled_sq_;
};

template <class T>
class Activation final : public Layer<T> {
public:
    Activation(std::string name, ActivationKind kind, double slope = kLeakySlope)
        : Layer<T>(std::move(name)), kind_(kind), slope_(slope) {}

    // Every supported kind's derivative is recoverable from the output alone
    // (relu and leaky relu preserve the sign), so only the output is kept.
    Tensor<T> forward(Tensor<T> input, Mode) override {
        activation_inplace(input, kind_, slope_);
        output_ = input;
        return input;
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        activation_backward_inplace(output_, grad_out, kind_, slope_);
        return grad_out;
    }
    std::string kind() const override { return to_string(kind_); }
    std::string describe() const override {
        if (kind_ != ActivationKind::leaky_relu) return "-";
        std::ostringstream os;
        os << slope_;
        return os.str();
    }

private:
    ActivationKind kind_;
    double slope_;
    Tensor<T> output_;
};

template <class T>
class Dropout final : public Layer<T> {
public:
    Dropout(std::string name, double p, std::shared_ptr<std::mt19937_64> rng)
        : Layer<T>(std::move(name)), p_(p), rng_(std::move(rng)) {}

    Tensor<T> forward(Tensor<T> input, Mode mode) override {
        return dropout(std::move(input), p_, mode, *rng_, &mask_);
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        if (mask_.empty()) return grad_out;
        for (std::size_t i = 0; i < grad_out.size(); ++i) grad_out[i] *= mask_[i];
        return grad_out;
    }
    std::string kind() const override { return "dropout"; }
    std::string describe() const override {
        std::ostringstream os;
        os << p_;
        return os.str();
    }

private:
    double p_;
    std::shared_ptr<std::mt19937_64> rng_;
    Tensor<T> mask_;
};

/// [N, ...] -> [N, prod(...)].
template <class T>
class Flatten final : public Layer<T> {
public:
    explicit Flatten(std::string name) : Layer<T>(std::move(name)) {}

    Tensor<T> forward(Tensor<T> input, Mode) override {
        in_shape_ = input.shape();
        input.reshape({in_shape_[0], input.size() / in_shape_[0]});
        return input;
    }
    Tensor<T> backward(Tensor<T> grad_out) override {
        grad_out.reshape(in_shape_);
        return grad_out;
    }
    std::string kind() const override { return "flatten"; }

private:
    Shape in_shape_;
};

/// One row of an architecture trace: block, operation, hyperparameters, and
/// per-sample output size.
struct TraceRow {
    std::string component;
    std::string layer;
    std::string parameter;
    std::string output;
};

/// Output size without the batch axis, e.g. "10x10x32" or "3200".
inline std::string sample_shape_string(const Shape& s) {
    return shape_string(Shape(s.begin() + 1, s.end()));
}

template <class T>
class Sequential {
public:
    explicit Sequential(std::string component = {}) : component_(std::move(component)) {}

    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <class L, class... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        components_.push_back(component_);
        return ref;
    }

    /// Subsequent layers are reported under this component label.
    void set_component(std::string c) { component_ = std::move(c); }

    Tensor<T> forward(Tensor<T> x, Mode mode) {
        out_shapes_.clear();
        for (auto& l : layers_) {
            x = l->forward(std::move(x), mode);
            out_shapes_.push_back(x.shape());
        }
        return x;
    }

    Tensor<T> backward(Tensor<T> g) {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            g = (*it)->backward(std::move(g));
            if (g.empty()) break;
        }
        return g;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& l : layers_)
            for (auto* p : l->parameters()) out.push_back(p);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& l : layers_)
            for (auto& b : l->buffers()) out.push_back(b);
        return out;
    }

    /// Rows for the most recent forward pass.
    std::vector<TraceRow> trace() const {
        std::vector<TraceRow> rows;
        for (std::size_t i = 0; i < layers_.size() && i < out_shapes_.size(); ++i) {
            rows.push_back({components_[i], layers_[i]->kind(), layers_[i]->describe(), sample_shape_string(out_shapes_[i])});
        }
        return rows;
    }

    std::size_t size() const { return layers_.size(); }
    Layer<T>& operator[](std::size_t i) { return *layers_[i]; }
    Layer<T>& front() { return *layers_.front(); }

private:
    std::string component_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    std::vector<std::string> components_;
    std::vector<Shape> out_shapes_;
};

}  // namespace hvad

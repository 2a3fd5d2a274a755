#pragma once

// Forward and backward kernels for the layer types of the hybrid network.
//
// Convolutions use "SAME with ceil" padding: output = ceil(input / stride),
// total padding max((out - 1) * stride + k - in, 0) split with the odd pixel
// on the bottom/right. Image tensors are [N, H, W, C]; a rank-3 [H, W, C]
// tensor is treated as a batch of one and results keep the caller's rank.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hvad/errors.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

/// calibrate: batchnorm layers re-estimate their population statistics from
/// batch moments; dropout is off and nothing is kept for backward.
enum class Mode { train, eval, calibrate };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Target number of scalars in one im2col chunk.
inline constexpr std::size_t kColChunkElems = std::size_t{1} << 20;

struct ImageDims {
    std::size_t n, h, w, c;
};

inline ImageDims image_dims(const Shape& s, const char* op) {
    if (s.size() == 3) return {1, s[0], s[1], s[2]};
    if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
    throw ConfigError(std::string(op) + ": expected [H,W,C] or [N,H,W,C] input, got " + shape_string(s));
}

inline Shape image_shape(const ImageDims& d, bool batched) {
    if (batched) return {d.n, d.h, d.w, d.c};
    return {d.h, d.w, d.c};
}

}  // namespace detail

/// Padding/output geometry of a square-kernel convolution.
struct ConvGeometry {
    std::size_t in_h = 0, in_w = 0;
    std::size_t out_h = 0, out_w = 0;
    std::size_t kernel = 0, stride = 0;
    std::size_t pad_top = 0, pad_left = 0;

    static ConvGeometry same_ceil(std::size_t in_h, std::size_t in_w, std::size_t kernel, std::size_t stride) {
        if (kernel == 0 || stride == 0) throw ConfigError("convolution kernel and stride must be positive");
        ConvGeometry g;
        g.in_h = in_h;
        g.in_w = in_w;
        g.kernel = kernel;
        g.stride = stride;
        g.out_h = (in_h + stride - 1) / stride;
        g.out_w = (in_w + stride - 1) / stride;
        const auto total = [&](std::size_t out, std::size_t in) -> std::size_t {
            const std::size_t need = (out - 1) * stride + kernel;
            return need > in ? need - in : 0;
        };
        g.pad_top = total(g.out_h, in_h) / 2;
        g.pad_left = total(g.out_w, in_w) / 2;
        return g;
    }

    std::size_t patch_len(std::size_t channels) const { return kernel * kernel * channels; }
};

namespace detail {

// Gathers rows [row_begin, row_end) of the im2col matrix. Row r is output
// position (n, oy, ox); column (ky * k + kx) * C + c.
template <class T>
void im2col(const T* in, const ImageDims& d, const ConvGeometry& g, std::size_t row_begin, std::size_t row_end,
            T* col) {
    const std::size_t k = g.kernel;
    const std::size_t plane = g.out_h * g.out_w;
    const std::size_t row_len = k * k * d.c;
    for (std::size_t r = row_begin; r < row_end; ++r) {
        const std::size_t n = r / plane;
        const std::size_t oy = (r % plane) / g.out_w;
        const std::size_t ox = r % g.out_w;
        T* dst = col + (r - row_begin) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
            for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
                T* cell = dst + (ky * k + kx) * d.c;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(d.h) || ix >= static_cast<long>(d.w)) {
                    std::fill(cell, cell + d.c, T{});
                } else {
                    const T* src = in + ((n * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)) * d.c;
                    std::copy(src, src + d.c, cell);
                }
            }
        }
    }
}

// Scatter-adds an im2col chunk back onto the image (adjoint of im2col).
template <class T>
void col2im_add(const T* col, const ImageDims& d, const ConvGeometry& g, std::size_t row_begin, std::size_t row_end,
                T* out) {
    const std::size_t k = g.kernel;
    const std::size_t plane = g.out_h * g.out_w;
    const std::size_t row_len = k * k * d.c;
    for (std::size_t r = row_begin; r < row_end; ++r) {
        const std::size_t n = r / plane;
        const std::size_t oy = (r % plane) / g.out_w;
        const std::size_t ox = r % g.out_w;
        const T* src = col + (r - row_begin) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
            if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
                if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
                const T* cell = src + (ky * k + kx) * d.c;
                T* dst = out + ((n * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)) * d.c;
                for (std::size_t c = 0; c < d.c; ++c) dst[c] += cell[c];
            }
        }
    }
}

inline std::size_t chunk_rows(std::size_t row_len) { return std::max<std::size_t>(1, kColChunkElems / row_len); }

template <class T>
void add_bias_rows(T* out, std::size_t rows, const Tensor<T>& bias) {
    const std::size_t c = bias.size();
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out + r * c;
        for (std::size_t j = 0; j < c; ++j) row[j] += bias[j];
    }
}

template <class T>
void accumulate_bias_grad(const T* grad, std::size_t rows, Tensor<T>& bias_grad) {
    const std::size_t c = bias_grad.size();
    std::vector<double> acc(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = grad + r * c;
        for (std::size_t j = 0; j < c; ++j) acc[j] += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) bias_grad[j] += static_cast<T>(acc[j]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// filters: [k, k, Cin, Cout]; bias: [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& filters, const Tensor<T>& bias, std::size_t stride) {
    using namespace detail;
    const ImageDims d = image_dims(input.shape(), "conv2d");
    if (filters.rank() != 4 || filters.dim(0) != filters.dim(1)) throw ConfigError("conv2d: filters must be [k,k,Cin,Cout]");
    if (filters.dim(2) != d.c) {
        throw ConfigError("conv2d: input has " + std::to_string(d.c) + " channels but filters expect " +
                          std::to_string(filters.dim(2)));
    }
    const std::size_t cout = filters.dim(3);
    if (bias.size() != cout) throw ConfigError("conv2d: bias length does not match output channels");
    const ConvGeometry g = ConvGeometry::same_ceil(d.h, d.w, filters.dim(0), stride);
    const ImageDims od{d.n, g.out_h, g.out_w, cout};
    Tensor<T> out(image_shape(od, input.rank() == 4));

    const std::size_t rows = d.n * g.out_h * g.out_w;
    const std::size_t K = g.patch_len(d.c);
    ConstMatMap<T> W(filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout));
    if (g.kernel == 1 && stride == 1) {
        ConstMatMap<T> X(input.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(K));
        MatMap<T> Y(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cout));
        Y.noalias() = X * W;
    } else {
        const std::size_t step = chunk_rows(K);
        std::vector<T> col(std::min(step, rows) * K);
        for (std::size_t r0 = 0; r0 < rows; r0 += step) {
            const std::size_t r1 = std::min(rows, r0 + step);
            im2col(input.data(), d, g, r0, r1, col.data());
            ConstMatMap<T> C(col.data(), static_cast<Eigen::Index>(r1 - r0), static_cast<Eigen::Index>(K));
            MatMap<T> Y(out.data() + r0 * cout, static_cast<Eigen::Index>(r1 - r0), static_cast<Eigen::Index>(cout));
            Y.noalias() = C * W;
        }
    }
    add_bias_rows(out.data(), rows, bias);
    return out;
}

/// Accumulates filter/bias gradients; returns the input gradient when requested
/// (an empty tensor otherwise).
template <class T>
Tensor<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& filters, std::size_t stride, const Tensor<T>& grad_out,
                          Tensor<T>& grad_filters, Tensor<T>& grad_bias, bool need_input_grad = true) {
    using namespace detail;
    const ImageDims d = image_dims(input.shape(), "conv2d_backward");
    const std::size_t cout = filters.dim(3);
    const ConvGeometry g = ConvGeometry::same_ceil(d.h, d.w, filters.dim(0), stride);
    const std::size_t rows = d.n * g.out_h * g.out_w;
    if (grad_out.size() != rows * cout) throw ConfigError("conv2d_backward: gradient shape mismatch");
    const std::size_t K = g.patch_len(d.c);

    ConstMatMap<T> W(filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout));
    MatMap<T> dW(grad_filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(cout));
    accumulate_bias_grad(grad_out.data(), rows, grad_bias);

    Tensor<T> grad_in;
    if (need_input_grad) grad_in = Tensor<T>(input.shape());

    if (g.kernel == 1 && stride == 1) {
        ConstMatMap<T> X(input.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(K));
        ConstMatMap<T> dY(grad_out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cout));
        dW.noalias() += X.transpose() * dY;
        if (need_input_grad) {
            MatMap<T> dX(grad_in.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(K));
            dX.noalias() = dY * W.transpose();
        }
        return grad_in;
    }

    const std::size_t step = chunk_rows(K);
    std::vector<T> col(std::min(step, rows) * K);
    std::vector<T> dcol(need_input_grad ? col.size() : 0);
    for (std::size_t r0 = 0; r0 < rows; r0 += step) {
        const std::size_t r1 = std::min(rows, r0 + step);
        const auto nr = static_cast<Eigen::Index>(r1 - r0);
        im2col(input.data(), d, g, r0, r1, col.data());
        ConstMatMap<T> C(col.data(), nr, static_cast<Eigen::Index>(K));
        ConstMatMap<T> dY(grad_out.data() + r0 * cout, nr, static_cast<Eigen::Index>(cout));
        dW.noalias() += C.transpose() * dY;
        if (need_input_grad) {
            MatMap<T> dC(dcol.data(), nr, static_cast<Eigen::Index>(K));
            dC.noalias() = dY * W.transpose();
            col2im_add(dcol.data(), d, g, r0, r1, grad_in.data());
        }
    }
    return grad_in;
}

/// Input gradient of conv2d only; the adjoint of the convolution as a linear map.
template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& filters, std::size_t stride,
                                const Shape& input_shape) {
    Tensor<T> dummy_in(input_shape);
    Tensor<T> gf(filters.shape());
    Tensor<T> gb(Shape{filters.dim(3)});
    return conv2d_backward(dummy_in, filters, stride, grad_out, gf, gb, true);
}

// ---------------------------------------------------------------------------
// deconv2d (transpose convolution)
// ---------------------------------------------------------------------------

/// Transpose of a SAME-ceil conv2d that maps [target_h, target_w, Cout] to the
/// input's spatial size. filters: [k, k, Cout, Cin]; bias: [Cout].
template <class T>
Tensor<T> deconv2d(const Tensor<T>& input, const Tensor<T>& filters, const Tensor<T>& bias, std::size_t stride,
                   std::pair<std::size_t, std::size_t> target_hw) {
    using namespace detail;
    const ImageDims d = image_dims(input.shape(), "deconv2d");
    if (filters.rank() != 4 || filters.dim(0) != filters.dim(1)) throw ConfigError("deconv2d: filters must be [k,k,Cout,Cin]");
    if (filters.dim(3) != d.c) throw ConfigError("deconv2d: input channels do not match filters");
    const std::size_t cout = filters.dim(2);
    if (bias.size() != cout) throw ConfigError("deconv2d: bias length does not match output channels");
    const ConvGeometry g = ConvGeometry::same_ceil(target_hw.first, target_hw.second, filters.dim(0), stride);
    if (g.out_h != d.h || g.out_w != d.w) {
        throw ConfigError("deconv2d: target " + std::to_string(target_hw.first) + "x" + std::to_string(target_hw.second) +
                          " is incompatible with input " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                          " at stride " + std::to_string(stride));
    }
    const ImageDims od{d.n, target_hw.first, target_hw.second, cout};
    Tensor<T> out(image_shape(od, input.rank() == 4));

    const std::size_t rows = d.n * d.h * d.w;
    const std::size_t K = g.patch_len(cout);
    ConstMatMap<T> F(filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d.c));
    const std::size_t step = chunk_rows(K);
    std::vector<T> col(std::min(step, rows) * K);
    for (std::size_t r0 = 0; r0 < rows; r0 += step) {
        const std::size_t r1 = std::min(rows, r0 + step);
        const auto nr = static_cast<Eigen::Index>(r1 - r0);
        ConstMatMap<T> X(input.data() + r0 * d.c, nr, static_cast<Eigen::Index>(d.c));
        MatMap<T> C(col.data(), nr, static_cast<Eigen::Index>(K));
        C.noalias() = X * F.transpose();
        col2im_add(col.data(), od, g, r0, r1, out.data());
    }
    add_bias_rows(out.data(), od.n * od.h * od.w, bias);
    return out;
}

template <class T>
Tensor<T> deconv2d_backward(const Tensor<T>& input, const Tensor<T>& filters, std::size_t stride,
                            const Tensor<T>& grad_out, Tensor<T>& grad_filters, Tensor<T>& grad_bias,
                            bool need_input_grad = true) {
    using namespace detail;
    const ImageDims d = image_dims(input.shape(), "deconv2d_backward");
    const ImageDims od = image_dims(grad_out.shape(), "deconv2d_backward");
    const std::size_t cout = filters.dim(2);
    const ConvGeometry g = ConvGeometry::same_ceil(od.h, od.w, filters.dim(0), stride);
    const std::size_t rows = d.n * d.h * d.w;
    const std::size_t K = g.patch_len(cout);

    accumulate_bias_grad(grad_out.data(), od.n * od.h * od.w, grad_bias);
    ConstMatMap<T> F(filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d.c));
    MatMap<T> dF(grad_filters.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d.c));

    Tensor<T> grad_in;
    if (need_input_grad) grad_in = Tensor<T>(input.shape());
    const std::size_t step = chunk_rows(K);
    std::vector<T> dcol(std::min(step, rows) * K);
    for (std::size_t r0 = 0; r0 < rows; r0 += step) {
        const std::size_t r1 = std::min(rows, r0 + step);
        const auto nr = static_cast<Eigen::Index>(r1 - r0);
        im2col(grad_out.data(), od, g, r0, r1, dcol.data());
        ConstMatMap<T> dC(dcol.data(), nr, static_cast<Eigen::Index>(K));
        ConstMatMap<T> X(input.data() + r0 * d.c, nr, static_cast<Eigen::Index>(d.c));
        dF.noalias() += dC.transpose() * X;
        if (need_input_grad) {
            MatMap<T> dX(grad_in.data() + r0 * d.c, nr, static_cast<Eigen::Index>(d.c));
            dX.noalias() = dC * F;
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// input [N, F], weights [F, U], bias [U].
template <class T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
    using namespace detail;
    if (input.rank() != 2 || weights.rank() != 2) throw ConfigError("dense: expected [N,F] input and [F,U] weights");
    if (input.dim(1) != weights.dim(0)) {
        throw ConfigError("dense: input has " + std::to_string(input.dim(1)) + " features but weights expect " +
                          std::to_string(weights.dim(0)));
    }
    if (bias.size() != weights.dim(1)) throw ConfigError("dense: bias length does not match units");
    const auto n = static_cast<Eigen::Index>(input.dim(0));
    const auto f = static_cast<Eigen::Index>(weights.dim(0));
    const auto u = static_cast<Eigen::Index>(weights.dim(1));
    Tensor<T> out(Shape{input.dim(0), weights.dim(1)});
    MatMap<T>(out.data(), n, u).noalias() = ConstMatMap<T>(input.data(), n, f) * ConstMatMap<T>(weights.data(), f, u);
    add_bias_rows(out.data(), input.dim(0), bias);
    return out;
}

template <class T>
Tensor<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                         Tensor<T>& grad_weights, Tensor<T>& grad_bias, bool need_input_grad = true) {
    using namespace detail;
    const auto n = static_cast<Eigen::Index>(input.dim(0));
    const auto f = static_cast<Eigen::Index>(weights.dim(0));
    const auto u = static_cast<Eigen::Index>(weights.dim(1));
    ConstMatMap<T> X(input.data(), n, f);
    ConstMatMap<T> dY(grad_out.data(), n, u);
    MatMap<T>(grad_weights.data(), f, u).noalias() += X.transpose() * dY;
    accumulate_bias_grad(grad_out.data(), input.dim(0), grad_bias);
    Tensor<T> grad_in;
    if (need_input_grad) {
        grad_in = Tensor<T>(input.shape());
        MatMap<T>(grad_in.data(), n, f).noalias() = dY * ConstMatMap<T>(weights.data(), f, u).transpose();
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// batch normalization (per last-axis channel)
// ---------------------------------------------------------------------------

struct BatchNormOptions {
    double epsilon = 1e-5;
    double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
};

template <class T>
struct BatchNormCache {
    Mode mode = Mode::eval;
    Tensor<T> normalized;         // x_hat
    std::vector<double> inv_std;  // per channel
};

/// Statistics are taken over every axis except the last. In train mode the
/// biased batch variance normalizes and the running estimates are updated.
template <class T>
Tensor<T> batchnorm(Tensor<T> input, const Tensor<T>& gamma, const Tensor<T>& beta, Mode mode,
                    Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt,
                    BatchNormCache<T>* cache = nullptr) {
    if (input.rank() < 2) throw ConfigError("batchnorm: input needs a batch axis");
    if (mode == Mode::calibrate) throw std::logic_error("batchnorm: calibration is a layer-level pass");
    const std::size_t c = input.shape().back();
    if (gamma.size() != c || beta.size() != c) throw ConfigError("batchnorm: gamma/beta length mismatch");
    const std::size_t m = input.size() / c;
    if (mode == Mode::train && m < 2) {
        throw ConfigError("batchnorm: train mode needs at least 2 values per channel");
    }

    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (mode == Mode::train) {
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) mean[j] += input[r * c + j];
        for (auto& v : mean) v /= static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double dlt = input[r * c + j] - mean[j];
                var[j] += dlt * dlt;
            }
        for (auto& v : var) v /= static_cast<double>(m);
        for (std::size_t j = 0; j < c; ++j) {
            running_mean[j] = static_cast<T>(opt.momentum * running_mean[j] + (1.0 - opt.momentum) * mean[j]);
            running_var[j] = static_cast<T>(opt.momentum * running_var[j] + (1.0 - opt.momentum) * var[j]);
        }
    } else {
        for (std::size_t j = 0; j < c; ++j) {
            mean[j] = running_mean[j];
            var[j] = running_var[j];
        }
    }

    std::vector<double> inv_std(c);
    std::vector<T> scale(c), shift(c), centre(c), inv(c);
    for (std::size_t j = 0; j < c; ++j) {
        inv_std[j] = 1.0 / std::sqrt(var[j] + opt.epsilon);
        scale[j] = static_cast<T>(gamma[j] * inv_std[j]);
        shift[j] = static_cast<T>(beta[j] - gamma[j] * inv_std[j] * mean[j]);
        centre[j] = static_cast<T>(mean[j]);
        inv[j] = static_cast<T>(inv_std[j]);
    }

    if (cache) {
        Tensor<T> xhat(input.shape());
        for (std::size_t r = 0; r < m; ++r) {
            const T* x = input.data() + r * c;
            T* h = xhat.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) h[j] = (x[j] - centre[j]) * inv[j];
        }
        cache->mode = mode;
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    for (std::size_t r = 0; r < m; ++r) {
        T* x = input.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) x[j] = x[j] * scale[j] + shift[j];
    }
    return input;
}

template <class T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                             Tensor<T>& grad_gamma, Tensor<T>& grad_beta) {
    const std::size_t c = gamma.size();
    const std::size_t m = grad_out.size() / c;
    const Tensor<T>& xhat = cache.normalized;
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            sum_dy[j] += grad_out[i];
            sum_dy_xhat[j] += static_cast<double>(grad_out[i]) * xhat[i];
        }
    for (std::size_t j = 0; j < c; ++j) {
        grad_beta[j] += static_cast<T>(sum_dy[j]);
        grad_gamma[j] += static_cast<T>(sum_dy_xhat[j]);
    }
    // grad_in = a * dy + b + c * x_hat per channel; eval mode keeps only a.
    const double inv_m = 1.0 / static_cast<double>(m);
    std::vector<T> ca(c), cb(c), cc(c);
    for (std::size_t j = 0; j < c; ++j) {
        const double scale = gamma[j] * cache.inv_std[j];
        const bool train = cache.mode == Mode::train;
        ca[j] = static_cast<T>(scale);
        cb[j] = train ? static_cast<T>(-scale * inv_m * sum_dy[j]) : T{};
        cc[j] = train ? static_cast<T>(-scale * inv_m * sum_dy_xhat[j]) : T{};
    }
    Tensor<T> grad_in(grad_out.shape());
    for (std::size_t r = 0; r < m; ++r) {
        const T* dy = grad_out.data() + r * c;
        const T* h = xhat.data() + r * c;
        T* dx = grad_in.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) dx[j] = ca[j] * dy[j] + cb[j] + cc[j] * h[j];
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

enum class ActivationKind { relu, leaky_relu, sigmoid, softmax };

inline std::string to_string(ActivationKind k) {
    switch (k) {
        case ActivationKind::relu: return "relu";
        case ActivationKind::leaky_relu: return "lrelu";
        case ActivationKind::sigmoid: return "sigmoid";
        case ActivationKind::softmax: return "softmax";
    }
    return "?";
}

inline constexpr double kLeakySlope = 0.2;

template <class T>
void activation_inplace(Tensor<T>& x, ActivationKind kind, double slope = kLeakySlope) {
    const std::size_t n = x.size();
    T* v = x.data();
    switch (kind) {
        case ActivationKind::relu:
            for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > T{} ? v[i] : T{};
            break;
        case ActivationKind::leaky_relu: {
            const T s = static_cast<T>(slope);
            for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > T{} ? v[i] : s * v[i];
            break;
        }
        case ActivationKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i) {
                const T z = v[i];
                // Branches keep exp() from overflowing for large |z|.
                v[i] = z >= T{} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
            }
            break;
        case ActivationKind::softmax: {
            const std::size_t c = x.shape().back();
            for (std::size_t r = 0; r < n / c; ++r) {
                T* y = v + r * c;
                const T mx = *std::max_element(y, y + c);
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    y[j] = std::exp(y[j] - mx);
                    sum += y[j];
                }
                for (std::size_t j = 0; j < c; ++j) y[j] = static_cast<T>(y[j] / sum);
            }
            break;
        }
    }
}

template <class T>
Tensor<T> activation(Tensor<T> input, ActivationKind kind, double slope = kLeakySlope) {
    activation_inplace(input, kind, slope);
    return input;
}

/// Turns `grad` (w.r.t. the output) into the gradient w.r.t. the input, using
/// only the activation output. Requires slope > 0 for leaky relu.
template <class T>
void activation_backward_inplace(const Tensor<T>& output, Tensor<T>& grad, ActivationKind kind,
                                 double slope = kLeakySlope) {
    const std::size_t n = output.size();
    const T* y = output.data();
    T* g = grad.data();
    switch (kind) {
        case ActivationKind::relu:
            for (std::size_t i = 0; i < n; ++i) g[i] = y[i] > T{} ? g[i] : T{};
            break;
        case ActivationKind::leaky_relu: {
            const T s = static_cast<T>(slope);
            for (std::size_t i = 0; i < n; ++i) g[i] = y[i] > T{} ? g[i] : s * g[i];
            break;
        }
        case ActivationKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i) g[i] = g[i] * y[i] * (T{1} - y[i]);
            break;
        case ActivationKind::softmax: {
            const std::size_t c = output.shape().back();
            for (std::size_t r = 0; r < n / c; ++r) {
                const T* yr = y + r * c;
                T* gr = g + r * c;
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += static_cast<double>(gr[j]) * yr[j];
                for (std::size_t j = 0; j < c; ++j) gr[j] = static_cast<T>(yr[j] * (gr[j] - s));
            }
            break;
        }
    }
}

/// Gradient w.r.t. the activation input, given the activation output.
template <class T>
Tensor<T> activation_backward(const Tensor<T>& output, Tensor<T> grad_out, ActivationKind kind,
                              double slope = kLeakySlope) {
    activation_backward_inplace(output, grad_out, kind, slope);
    return grad_out;
}

// ---------------------------------------------------------------------------
// dropout (inverted)
// ---------------------------------------------------------------------------

/// Returns the scaled keep-mask (0 or 1/(1-p)) for train mode. Each 64-bit
/// draw decides two elements: an element is dropped when its 32-bit half is
/// below p * 2^32.
template <class T>
Tensor<T> dropout_mask(const Shape& shape, double p, std::mt19937_64& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
    Tensor<T> mask(shape);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    const auto cut = static_cast<std::uint64_t>(std::ldexp(p, 32));
    T* m = mask.data();
    const std::size_t n = mask.size();
    for (std::size_t i = 0; i < n; i += 2) {
        const std::uint64_t r = rng();
        m[i] = (r & 0xffffffffu) < cut ? T{} : keep;
        if (i + 1 < n) m[i + 1] = (r >> 32) < cut ? T{} : keep;
    }
    return mask;
}

template <class T>
Tensor<T> dropout(Tensor<T> input, double p, Mode mode, std::mt19937_64& rng, Tensor<T>* mask_out = nullptr) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
    if (mode != Mode::train || p == 0.0) {
        if (mask_out) *mask_out = Tensor<T>();
        return input;
    }
    Tensor<T> mask = dropout_mask<T>(input.shape(), p, rng);
    for (std::size_t i = 0; i < input.size(); ++i) input[i] *= mask[i];
    if (mask_out) *mask_out = std::move(mask);
    return input;
}

}  // namespace hvad

#include "alterdetect/nnkernel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <cblas.h>

#include "alterdetect/random.hpp"

namespace alterdetect {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::size_t shape_volume(const Shape& shape) {
    std::size_t v = 1;
    for (std::size_t d : shape) v *= d;
    return v;
}

}  // namespace alterdetect

namespace alterdetect::nn {
namespace {

struct ConvGeometry {
    std::size_t n, h, w, c;     // input
    std::size_t oh, ow, d;      // output
    std::size_t offset;         // 1 for same padding, 0 for valid
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels, Padding padding) {
    const auto [n, h, w, c] = as_nhwc(input, "conv2d input");
    if (kernels.rank() != 4 || kernels.dim(0) != 3 || kernels.dim(1) != 3) {
        throw ShapeError("conv2d: kernels must be 3x3xCxD, got " + shape_str(kernels.shape()));
    }
    if (kernels.dim(2) != c) {
        throw ShapeError("conv2d: input " + shape_str(input.shape()) + " has " + std::to_string(c) +
                         " channels but kernels " + shape_str(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(2)));
    }
    ConvGeometry g{n, h, w, c, h, w, kernels.dim(3), 1};
    if (padding == Padding::kValid) {
        if (h < 3 || w < 3) {
            throw ShapeError("conv2d: valid padding needs spatial size >= 3, got " +
                             shape_str(input.shape()));
        }
        g.oh = h - 2;
        g.ow = w - 2;
        g.offset = 0;
    }
    return g;
}

template <typename T>
Shape conv_output_shape(const Tensor<T>& input, const ConvGeometry& g) {
    if (input.rank() == 3) return {g.oh, g.ow, g.d};
    return {g.n, g.oh, g.ow, g.d};
}

// Row-major C = alpha op(A) op(B) + beta C.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

// Fills col (oh*ow x 9c) for one sample; out-of-image taps are zero.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::vector<T>& col) {
    const std::size_t k = 9 * g.c;
    col.resize(g.oh * g.ow * k);
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
            T* row = col.data() + (oy * g.ow + ox) * k;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) -
                                          static_cast<std::ptrdiff_t>(g.offset);
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) -
                                              static_cast<std::ptrdiff_t>(g.offset);
                    T* dst = row + (ky * 3 + kx) * g.c;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix < 0 ||
                        ix >= static_cast<std::ptrdiff_t>(g.w)) {
                        std::fill(dst, dst + g.c, T{0});
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
                    std::copy(src, src + g.c, dst);
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const std::vector<T>& dcol, const ConvGeometry& g, T* dx) {
    const std::size_t k = 9 * g.c;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const T* row = dcol.data() + (oy * g.ow + ox) * k;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) -
                                          static_cast<std::ptrdiff_t>(g.offset);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) -
                                              static_cast<std::ptrdiff_t>(g.offset);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                    T* dst = dx + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
                    const T* src = row + (ky * 3 + kx) * g.c;
                    for (std::size_t ch = 0; ch < g.c; ++ch) dst[ch] += src[ch];
                }
            }
        }
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " does not match " +
                         shape_str(b.shape()));
    }
}

// Number of samples and per-sample feature count for dense layers.
template <typename T>
std::pair<std::size_t, std::size_t> dense_rows(const Tensor<T>& input) {
    if (input.rank() == 1) return {1, input.dim(0)};
    return {input.dim(0), input.size() / input.dim(0)};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Padding padding) {
    const ConvGeometry g = conv_geometry(input, kernels, padding);
    if (bias.rank() != 1 || bias.dim(0) != g.d) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.d) + " kernels");
    }
    Tensor<T> out(conv_output_shape(input, g));
    const std::size_t k = 9 * g.c;
    const std::size_t positions = g.oh * g.ow;
    const T* kern = kernels.raw();
    const T* b = bias.raw();
    std::vector<T> col;
    for (std::size_t s = 0; s < g.n; ++s) {
        im2col(input.raw() + s * g.h * g.w * g.c, g, col);
        T* y = out.raw() + s * positions * g.d;
        for (std::size_t p = 0; p < positions; ++p) std::copy(b, b + g.d, y + p * g.d);
        gemm(false, false, positions, g.d, k, T{1}, col.data(), k, kern, g.d, T{1}, y, g.d);
    }
    return out;
}

template <typename T>
LayerGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                  const Tensor<T>& output_grad, Padding padding) {
    const ConvGeometry g = conv_geometry(input, kernels, padding);
    const Shape expected = conv_output_shape(input, g);
    if (output_grad.shape() != expected) {
        throw ShapeError("conv2d_backward: output_grad " + shape_str(output_grad.shape()) +
                         " does not match conv output " + shape_str(expected));
    }
    const std::size_t k = 9 * g.c;
    const std::size_t positions = g.oh * g.ow;

    Tensor<T> dx(input.shape(), T{0});
    Tensor<T> dk(kernels.shape(), T{0});
    Tensor<T> db({g.d}, T{0});
    std::vector<T> col;
    std::vector<T> dcol(positions * k);
    for (std::size_t s = 0; s < g.n; ++s) {
        im2col(input.raw() + s * g.h * g.w * g.c, g, col);
        const T* dy = output_grad.raw() + s * positions * g.d;
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t d = 0; d < g.d; ++d) db[d] += dy[p * g.d + d];
        // dK += col^T dY and dcol = dY K^T.
        gemm(true, false, k, g.d, positions, T{1}, col.data(), k, dy, g.d, T{1}, dk.raw(), g.d);
        gemm(false, true, positions, k, g.d, T{1}, dy, g.d, kernels.raw(), g.d, T{0}, dcol.data(), k);
        col2im_add(dcol, g, dx.raw() + s * g.h * g.w * g.c);
    }
    LayerGradients<T> grads;
    grads.input_grad = std::move(dx);
    grads.param_grads.emplace("kernels", std::move(dk));
    grads.param_grads.emplace("bias", std::move(db));
    return grads;
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
    const auto [n, h, w, c] = as_nhwc(input, "maxpool2x2");
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2x2: spatial size must be even, got " + shape_str(input.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor<T> out(input.rank() == 3 ? Shape{oh, ow, c} : Shape{n, oh, ow, c});
    for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.raw() + s * h * w * c;
        T* y = out.raw() + s * oh * ow * c;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* a = x + ((2 * oy) * w + 2 * ox) * c;
                const T* b = a + c;
                const T* cc = a + w * c;
                const T* d = cc + c;
                T* dst = y + (oy * ow + ox) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    T m = a[ch];
                    if (b[ch] > m) m = b[ch];
                    if (cc[ch] > m) m = cc[ch];
                    if (d[ch] > m) m = d[ch];
                    dst[ch] = m;
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& input, const Tensor<T>& output_grad) {
    const auto [n, h, w, c] = as_nhwc(input, "maxpool2x2_backward");
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2x2_backward: spatial size must be even, got " +
                         shape_str(input.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    const Shape expected = input.rank() == 3 ? Shape{oh, ow, c} : Shape{n, oh, ow, c};
    if (output_grad.shape() != expected) {
        throw ShapeError("maxpool2x2_backward: output_grad " + shape_str(output_grad.shape()) +
                         " does not match pooled shape " + shape_str(expected));
    }
    Tensor<T> dx(input.shape(), T{0});
    for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.raw() + s * h * w * c;
        T* gx = dx.raw() + s * h * w * c;
        const T* gy = output_grad.raw() + s * oh * ow * c;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t base = ((2 * oy) * w + 2 * ox) * c;
                const std::size_t offsets[4] = {0, c, w * c, w * c + c};
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = base + ch;
                    for (std::size_t t = 1; t < 4; ++t) {
                        const std::size_t idx = base + offsets[t] + ch;
                        if (x[idx] > x[best]) best = idx;
                    }
                    gx[best] += gy[(oy * ow + ox) * c + ch];
                }
            }
        }
    }
    return dx;
}

namespace {

template <typename T>
std::size_t channel_count(const Tensor<T>& batch, const char* what) {
    if (batch.rank() < 2) {
        throw ShapeError(std::string(what) + ": expected at least rank 2, got " +
                         shape_str(batch.shape()));
    }
    return batch.shape().back();
}

template <typename T>
void check_channel_param(const Tensor<T>& p, std::size_t channels, const char* what) {
    if (p.rank() != 1 || p.dim(0) != channels) {
        throw ShapeError(std::string(what) + " " + shape_str(p.shape()) + " does not match " +
                         std::to_string(channels) + " channels");
    }
}

// Batch mean and biased variance per channel, accumulated in double.
template <typename T>
void channel_moments(const Tensor<T>& batch, std::size_t channels, std::vector<double>& mean,
                     std::vector<double>& var) {
    const std::size_t m = batch.size() / channels;
    mean.assign(channels, 0.0);
    var.assign(channels, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ch = 0; ch < channels; ++ch) mean[ch] += batch[i * channels + ch];
    for (double& v : mean) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double dlt = batch[i * channels + ch] - mean[ch];
            var[ch] += dlt * dlt;
        }
    }
    for (double& v : var) v /= static_cast<double>(m);
}

template <typename T>
void check_batch_size(const Tensor<T>& batch, NormMode mode) {
    if (mode == NormMode::kTrain && (batch.rank() < 2 || batch.dim(0) < 2)) {
        throw ShapeError("batchnorm: train mode needs a batch of at least 2 samples, got " +
                         shape_str(batch.shape()));
    }
}

}  // namespace

template <typename T>
BatchNormOutput<T> batchnorm(const Tensor<T>& batch, const Tensor<T>& scale, const Tensor<T>& shift,
                             NormMode mode, const RunningStats<T>& running) {
    const std::size_t channels = channel_count(batch, "batchnorm");
    check_channel_param(scale, channels, "batchnorm: scale");
    check_channel_param(shift, channels, "batchnorm: shift");
    check_channel_param(running.mean, channels, "batchnorm: running mean");
    check_channel_param(running.var, channels, "batchnorm: running var");
    check_batch_size(batch, mode);

    std::vector<double> mean, var;
    BatchNormOutput<T> result{Tensor<T>(batch.shape()), running};
    if (mode == NormMode::kTrain) {
        channel_moments(batch, channels, mean, var);
        for (std::size_t ch = 0; ch < channels; ++ch) {
            result.running.mean[ch] = static_cast<T>(kBatchNormMomentum * running.mean[ch] +
                                                     (1.0 - kBatchNormMomentum) * mean[ch]);
            result.running.var[ch] = static_cast<T>(kBatchNormMomentum * running.var[ch] +
                                                    (1.0 - kBatchNormMomentum) * var[ch]);
        }
    } else {
        mean.assign(running.mean.data().begin(), running.mean.data().end());
        var.assign(running.var.data().begin(), running.var.data().end());
    }
    std::vector<T> mul(channels), add(channels);
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const double inv_std = 1.0 / std::sqrt(var[ch] + kBatchNormEpsilon);
        mul[ch] = static_cast<T>(scale[ch] * inv_std);
        add[ch] = static_cast<T>(shift[ch] - scale[ch] * inv_std * mean[ch]);
    }
    const std::size_t m = batch.size() / channels;
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = batch.raw() + i * channels;
        T* y = result.output.raw() + i * channels;
        for (std::size_t ch = 0; ch < channels; ++ch) y[ch] = x[ch] * mul[ch] + add[ch];
    }
    return result;
}

template <typename T>
LayerGradients<T> batchnorm_backward(const Tensor<T>& batch, const Tensor<T>& scale,
                                     const Tensor<T>& output_grad, NormMode mode,
                                     const RunningStats<T>& running) {
    const std::size_t channels = channel_count(batch, "batchnorm_backward");
    check_channel_param(scale, channels, "batchnorm_backward: scale");
    require_same_shape(output_grad, batch, "batchnorm_backward: output_grad");
    check_batch_size(batch, mode);

    std::vector<double> mean, var;
    if (mode == NormMode::kTrain) {
        channel_moments(batch, channels, mean, var);
    } else {
        check_channel_param(running.mean, channels, "batchnorm_backward: running mean");
        check_channel_param(running.var, channels, "batchnorm_backward: running var");
        mean.assign(running.mean.data().begin(), running.mean.data().end());
        var.assign(running.var.data().begin(), running.var.data().end());
    }
    const std::size_t m = batch.size() / channels;
    std::vector<double> inv_std(channels), sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
    for (std::size_t ch = 0; ch < channels; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBatchNormEpsilon);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double dy = output_grad[i * channels + ch];
            const double xhat = (batch[i * channels + ch] - mean[ch]) * inv_std[ch];
            sum_dy[ch] += dy;
            sum_dy_xhat[ch] += dy * xhat;
        }
    }

    Tensor<T> dx(batch.shape());
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double dy = output_grad[i * channels + ch];
            double g;
            if (mode == NormMode::kTrain) {
                const double xhat = (batch[i * channels + ch] - mean[ch]) * inv_std[ch];
                g = scale[ch] * inv_std[ch] * (dy - inv_m * sum_dy[ch] - xhat * inv_m * sum_dy_xhat[ch]);
            } else {
                g = scale[ch] * inv_std[ch] * dy;
            }
            dx[i * channels + ch] = static_cast<T>(g);
        }
    }
    Tensor<T> dscale({channels}), dshift({channels});
    for (std::size_t ch = 0; ch < channels; ++ch) {
        dscale[ch] = static_cast<T>(sum_dy_xhat[ch]);
        dshift[ch] = static_cast<T>(sum_dy[ch]);
    }
    LayerGradients<T> grads;
    grads.input_grad = std::move(dx);
    grads.param_grads.emplace("scale", std::move(dscale));
    grads.param_grads.emplace("shift", std::move(dshift));
    return grads;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out = input;
    for (T& v : out.values()) v = v > T{0} ? v : T{0};
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& output_grad) {
    require_same_shape(output_grad, input, "relu_backward: output_grad");
    Tensor<T> dx(input.shape());
    const T* x = input.raw();
    const T* g = output_grad.raw();
    T* d = dx.raw();
    for (std::size_t i = 0, n = dx.size(); i < n; ++i) d[i] = x[i] > T{0} ? g[i] : T{0};
    return dx;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
    const auto [n, f] = dense_rows(input);
    if (weights.rank() != 2 || weights.dim(0) != f) {
        throw ShapeError("dense: input " + shape_str(input.shape()) + " has " + std::to_string(f) +
                         " features but weights are " + shape_str(weights.shape()));
    }
    const std::size_t o = weights.dim(1);
    if (bias.rank() != 1 || bias.dim(0) != o) {
        throw ShapeError("dense: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(o) + " outputs");
    }
    Tensor<T> out(input.rank() == 1 ? Shape{o} : Shape{n, o});
    for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.raw() + s * f;
        T* y = out.raw() + s * o;
        std::copy(bias.raw(), bias.raw() + o, y);
        for (std::size_t i = 0; i < f; ++i) {
            const T a = x[i];
            if (a == T{0}) continue;
            const T* wrow = weights.raw() + i * o;
            for (std::size_t j = 0; j < o; ++j) y[j] += a * wrow[j];
        }
    }
    return out;
}

template <typename T>
LayerGradients<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                 const Tensor<T>& output_grad) {
    const auto [n, f] = dense_rows(input);
    if (weights.rank() != 2 || weights.dim(0) != f) {
        throw ShapeError("dense_backward: input " + shape_str(input.shape()) +
                         " does not match weights " + shape_str(weights.shape()));
    }
    const std::size_t o = weights.dim(1);
    if (output_grad.size() != n * o) {
        throw ShapeError("dense_backward: output_grad " + shape_str(output_grad.shape()) +
                         " does not match " + std::to_string(n) + "x" + std::to_string(o));
    }
    Tensor<T> dx(input.shape(), T{0});
    Tensor<T> dw(weights.shape(), T{0});
    Tensor<T> db({o}, T{0});
    for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.raw() + s * f;
        const T* dy = output_grad.raw() + s * o;
        T* gx = dx.raw() + s * f;
        for (std::size_t j = 0; j < o; ++j) db[j] += dy[j];
        for (std::size_t i = 0; i < f; ++i) {
            const T* wrow = weights.raw() + i * o;
            T* dwrow = dw.raw() + i * o;
            const T a = x[i];
            T acc{0};
            for (std::size_t j = 0; j < o; ++j) {
                acc += wrow[j] * dy[j];
                dwrow[j] += a * dy[j];
            }
            gx[i] = acc;
        }
    }
    LayerGradients<T> grads;
    grads.input_grad = std::move(dx);
    grads.param_grads.emplace("weights", std::move(dw));
    grads.param_grads.emplace("bias", std::move(db));
    return grads;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (logits.rank() == 0 || logits.empty()) throw ShapeError("softmax: empty input");
    const std::size_t k = logits.shape().back();
    const std::size_t rows = logits.size() / k;
    Tensor<T> out(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = logits.raw() + r * k;
        T* p = out.raw() + r * k;
        const T mx = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = static_cast<T>(std::exp(static_cast<double>(z[j] - mx)));
            total += p[j];
        }
        for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<T>(p[j] / total);
    }
    return out;
}

void LossConfig::validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw std::invalid_argument("focal loss gamma must be a finite non-negative number");
    }
    if (alpha.size() != 2) {
        throw std::invalid_argument("focal loss alpha needs exactly one weight per class (2)");
    }
    for (double a : alpha) {
        if (!(a > 0.0) || !std::isfinite(a)) {
            throw std::invalid_argument("focal loss alpha weights must be positive");
        }
    }
}

double focal_loss_value(double p_t, double gamma, double alpha) {
    return -alpha * std::pow(1.0 - p_t, gamma) * std::log(p_t);
}

template <typename T>
FocalLossResult<T> focal_loss(std::span<const T> probs, int label, const LossConfig& cfg) {
    if (probs.size() != 2) {
        throw ShapeError("focal_loss: expected 2 class probabilities, got " + std::to_string(probs.size()));
    }
    if (label != 0 && label != 1) {
        throw std::invalid_argument("focal_loss: label " + std::to_string(label) +
                                    " outside class set {0, 1}");
    }
    const bool published = cfg.label_convention == LabelConvention::kAsPublished;
    const std::size_t p_class = published ? 0 : 1;
    const int direct_label = published ? 0 : 1;

    const double p = std::clamp(static_cast<double>(probs[p_class]), kProbabilityClamp,
                                1.0 - kProbabilityClamp);
    const bool direct = label == direct_label;
    const double p_t = direct ? p : 1.0 - p;
    const double alpha = cfg.alpha[static_cast<std::size_t>(label)];
    const double gamma = cfg.gamma;

    const double one_minus = 1.0 - p_t;
    const double log_pt = std::log(p_t);
    const double modulator = std::pow(one_minus, gamma);
    const double loss = -alpha * modulator * log_pt;

    // d/dp_t of -a (1-p_t)^g log p_t
    double dmod = 0.0;
    if (gamma != 0.0) dmod = gamma * std::pow(one_minus, gamma - 1.0);
    const double dloss_dpt = alpha * (dmod * log_pt - modulator / p_t);
    const double dloss_dp = direct ? dloss_dpt : -dloss_dpt;

    FocalLossResult<T> result;
    result.loss = static_cast<T>(loss);
    result.prob_grad.assign(2, T{0});
    result.prob_grad[p_class] = static_cast<T>(dloss_dp);

    // Softmax Jacobian: dp_i/dz_j = p_i (delta_ij - p_j).
    result.logit_grad.assign(2, T{0});
    const double pi = probs[p_class];
    for (std::size_t j = 0; j < 2; ++j) {
        const double jac = pi * ((j == p_class ? 1.0 : 0.0) - static_cast<double>(probs[j]));
        result.logit_grad[j] = static_cast<T>(dloss_dp * jac);
    }
    return result;
}

template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
    if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("xavier_init: fans must be positive");
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor<T> out(shape);
    Rng rng(seed);
    for (T& v : out.values()) {
        // Clamp guards against float rounding pushing a sample past the bound.
        v = std::clamp(static_cast<T>(rng.uniform(-bound, bound)), static_cast<T>(-bound),
                       static_cast<T>(bound));
    }
    return out;
}

template <typename T>
PenaltyResult<T> l1_penalty(const Tensor<T>& params, T lambda) {
    if (!(lambda >= T{0})) throw std::invalid_argument("l1_penalty: lambda must be non-negative");
    double total = 0.0;
    Tensor<T> sub(params.shape(), T{0});
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T w = params[i];
        total += std::abs(static_cast<double>(w));
        sub[i] = w > T{0} ? lambda : (w < T{0} ? -lambda : T{0});
    }
    return {static_cast<T>(static_cast<double>(lambda) * total), std::move(sub)};
}

template <typename T>
Tensor<T> sgd_step(Tensor<T> params, const Tensor<T>& grads, T learning_rate) {
    require_same_shape(grads, params, "sgd_step: grads");
    T* w = params.raw();
    const T* g = grads.raw();
    for (std::size_t i = 0; i < params.size(); ++i) w[i] -= learning_rate * g[i];
    return params;
}

#define ALTERDETECT_INSTANTIATE(T)                                                                  \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding);         \
    template LayerGradients<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                               Padding);                                           \
    template Tensor<T> maxpool2x2(const Tensor<T>&);                                               \
    template Tensor<T> maxpool2x2_backward(const Tensor<T>&, const Tensor<T>&);                    \
    template BatchNormOutput<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          NormMode, const RunningStats<T>&);                       \
    template LayerGradients<T> batchnorm_backward(const Tensor<T>&, const Tensor<T>&,              \
                                                  const Tensor<T>&, NormMode,                      \
                                                  const RunningStats<T>&);                         \
    template Tensor<T> relu(const Tensor<T>&);                                                     \
    template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
    template LayerGradients<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> softmax(const Tensor<T>&);                                                  \
    template FocalLossResult<T> focal_loss(std::span<const T>, int, const LossConfig&);            \
    template Tensor<T> xavier_init(const Shape&, std::size_t, std::size_t, std::uint64_t);         \
    template PenaltyResult<T> l1_penalty(const Tensor<T>&, T);                                     \
    template Tensor<T> sgd_step(Tensor<T>, const Tensor<T>&, T);

ALTERDETECT_INSTANTIATE(float)
ALTERDETECT_INSTANTIATE(double)

#undef ALTERDETECT_INSTANTIATE

}  // namespace alterdetect::nn

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alterdetect/tensor.hpp"

namespace alterdetect::nn {

enum class Padding { kSame, kValid };
enum class NormMode { kTrain, kInfer };

/// Backprop carrier: gradient w.r.t. the layer input plus one entry per
/// learnable parameter, keyed by the parameter's role ("kernels", "bias",
/// "scale", "shift", "weights").
template <typename T>
struct LayerGradients {
    Tensor<T> input_grad;
    std::map<std::string, Tensor<T>> param_grads;
};

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1. Kernels are laid out 3x3xCxD so that, flattened,
// they form the (9C)xD matrix multiplied against an im2col buffer.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Padding padding);

template <typename T>
LayerGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                  const Tensor<T>& output_grad, Padding padding);

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Odd spatial sizes are rejected. Ties resolve to
// the first maximum in row-major window order.

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& input, const Tensor<T>& output_grad);

// ---------------------------------------------------------------------------
// Per-channel batch normalization over N, H and W.

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;

    static RunningStats identity(std::size_t channels) {
        return {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})};
    }
};

template <typename T>
struct BatchNormOutput {
    Tensor<T> output;
    /// Running statistics after this call. Train mode blends in the batch
    /// statistics with momentum 0.9; infer mode returns them unchanged.
    RunningStats<T> running;
};

template <typename T>
BatchNormOutput<T> batchnorm(const Tensor<T>& batch, const Tensor<T>& scale, const Tensor<T>& shift,
                             NormMode mode, const RunningStats<T>& running);

template <typename T>
LayerGradients<T> batchnorm_backward(const Tensor<T>& batch, const Tensor<T>& scale,
                                     const Tensor<T>& output_grad, NormMode mode,
                                     const RunningStats<T>& running);

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Subgradient at zero is zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& output_grad);

/// Affine map. Input is F (single sample) or N x ... (batch, flattened per
/// sample); weights are FxO.
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
LayerGradients<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                 const Tensor<T>& output_grad);

/// Row-wise softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// ---------------------------------------------------------------------------
// Focal loss.

/// Which class the probability p refers to in the piecewise definition of
/// p_t. kAsPublished reads p as the probability of class 0 and takes
/// p_t = p when y = 0, 1 - p otherwise. kConventional reads p as the
/// probability of class 1 and takes p_t = p when y = 1. For two classes both
/// reduce to p_t = P(true class).
enum class LabelConvention { kAsPublished, kConventional };

struct LossConfig {
    double gamma = 5.0;
    std::vector<double> alpha{1.0, 1.0};
    LabelConvention label_convention = LabelConvention::kAsPublished;

    void validate() const;
};

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
struct FocalLossResult {
    T loss;
    std::vector<T> prob_grad;   ///< dLoss/dprobs
    std::vector<T> logit_grad;  ///< dLoss/dlogits through the softmax
};

/// probs must be a softmax output over two classes. The modulating factor
/// and the log term both contribute to the gradient; the clamp to
/// [1e-7, 1-1e-7] is applied to p before use and passes gradients straight
/// through.
template <typename T>
FocalLossResult<T> focal_loss(std::span<const T> probs, int label, const LossConfig& cfg);

/// Scalar form of the loss for a given p_t.
double focal_loss_value(double p_t, double gamma, double alpha);

// ---------------------------------------------------------------------------

/// Uniform Glorot initialization on +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out,
                      std::uint64_t seed);

template <typename T>
struct PenaltyResult {
    T value;
    Tensor<T> subgradient;
};

/// lambda * sum |w|, with subgradient lambda * sign(w) (0 at w = 0).
template <typename T>
PenaltyResult<T> l1_penalty(const Tensor<T>& params, T lambda);

/// w - lr * g, elementwise.
template <typename T>
Tensor<T> sgd_step(Tensor<T> params, const Tensor<T>& grads, T learning_rate);

}  // namespace alterdetect::nn

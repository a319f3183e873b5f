#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alterdetect/nnkernel.hpp"
#include "alterdetect/patchwork.hpp"

namespace alterdetect {

/// Where the shortcut's downsampling sits relative to its convolutional block.
enum class ShortcutPooling { kAfterBlock, kBeforeBlock };

struct ArchConfig {
    std::size_t patch_size = 64;
    std::array<std::size_t, 6> conv_channels{32, 32, 64, 64, 128, 128};
    std::size_t residual_block_depth = 15;
    std::size_t fc_width = 256;
    std::size_t num_classes = 2;
    bool enable_residual = true;
    ShortcutPooling shortcut_pooling = ShortcutPooling::kAfterBlock;

    /// Throws std::invalid_argument. Patch sizes must be a positive multiple
    /// of 8 (three 2x2 pooling stages); the command line narrows this to 64
    /// or 128.
    void validate() const;

    /// Width of the flattened feature vector entering fc1.
    std::size_t fc_input_width() const;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;
template <typename T>
using StatsMap = std::map<std::string, nn::RunningStats<T>>;

/// Intermediates of one conv -> batchnorm -> relu unit.
template <typename T>
struct UnitTrace {
    std::string name;
    Tensor<T> input;
    Tensor<T> conv_out;
    Tensor<T> norm_out;
    Tensor<T> output;
};

/// Everything backward() needs, plus the running statistics the pass would
/// commit in train mode.
template <typename T>
struct ForwardPass {
    nn::NormMode mode = nn::NormMode::kInfer;
    std::vector<UnitTrace<T>> units;         // conv1..conv6, then residual units
    std::vector<Tensor<T>> pool_inputs;      // main path pools, then shortcut pools
    Tensor<T> features;                      // flattened N x F
    Tensor<T> fc1_pre;
    Tensor<T> fc1_out;
    Tensor<T> logits;
    Tensor<T> probs;
    StatsMap<T> running;
};

/// The patch classifier: six 3x3 conv units with 2x2 max pooling after
/// conv2, conv4 and conv6, two dense layers and a softmax. The optional
/// shortcut takes conv2's output through a stack of conv units at conv5's
/// width, pools it down to conv5's resolution and adds it to conv5's output.
template <typename T>
class Network {
public:
    Network() = default;
    Network(ArchConfig arch, ParamMap<T> params, StatsMap<T> stats);

    /// Xavier-initialized network; deterministic for a fixed seed.
    static Network build(const ArchConfig& arch, std::uint64_t seed);

    const ArchConfig& arch() const noexcept { return arch_; }
    const ParamMap<T>& params() const noexcept { return params_; }
    ParamMap<T>& params() noexcept { return params_; }
    const StatsMap<T>& running_stats() const noexcept { return stats_; }
    StatsMap<T>& running_stats() noexcept { return stats_; }

    std::size_t parameter_count() const;

    /// batch is N x P x P x 3.
    ForwardPass<T> forward(const Tensor<T>& batch, nn::NormMode mode) const;

    /// Gradients of a scalar loss given dLoss/dlogits (N x K). The returned
    /// map holds one entry per parameter plus "input" for the batch.
    ParamMap<T> backward(const ForwardPass<T>& pass, const Tensor<T>& logit_grad) const;

    template <typename U>
    Network<U> cast() const {
        ParamMap<U> params;
        for (const auto& [name, t] : params_) params.emplace(name, t.template cast<U>());
        StatsMap<U> stats;
        for (const auto& [name, s] : stats_)
            stats.emplace(name, nn::RunningStats<U>{s.mean.template cast<U>(), s.var.template cast<U>()});
        return Network<U>(arch_, std::move(params), std::move(stats));
    }

    /// Names of the conv units in evaluation order.
    static std::vector<std::string> unit_names(const ArchConfig& arch);

private:
    void check_consistent() const;

    ArchConfig arch_;
    ParamMap<T> params_;
    StatsMap<T> stats_;
};

/// Closed-form parameter count of one conv unit (kernels, bias, scale, shift).
constexpr std::size_t conv_unit_parameters(std::size_t in_channels, std::size_t out_channels) {
    return 9 * in_channels * out_channels + 3 * out_channels;
}

struct TrainConfig {
    double learning_rate = 1e-3;
    double lambda_l1 = 1e-5;
    /// When false the L1 penalty covers conv kernels and dense weights only.
    bool l1_all_params = false;
    nn::LossConfig loss;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    std::uint64_t seed = 1;

    void validate() const;
    friend bool operator==(const TrainConfig& a, const TrainConfig& b);
};

struct DetectorModel {
    Network<float> net;
    TrainConfig train_config;
    std::uint64_t epoch_counter = 0;
};

DetectorModel build_model(const ArchConfig& arch, std::uint64_t seed);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    std::optional<double> validation_loss;

    /// One line-delimited JSON record.
    std::string to_json_line() const;
};

struct TrainOptions {
    /// Held-out patches; when present the parameters with the lowest
    /// validation loss are the ones returned.
    std::span<const LabeledPatch> validation;
    /// Stop once an epoch's training accuracy reaches this value.
    std::optional<double> stop_at_accuracy;
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const std::string&)> on_warning;
};

struct TrainResult {
    DetectorModel model;
    std::vector<EpochRecord> trace;
};

/// Mini-batch SGD on the mean focal loss plus the L1 penalty. Shuffling is
/// driven by config.seed, so identical inputs give bit-identical results.
TrainResult train(DetectorModel model, std::span<const LabeledPatch> patches,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Mean focal loss (without penalty) and accuracy in infer mode.
std::pair<double, double> evaluate_loss(const DetectorModel& model, std::span<const LabeledPatch> patches,
                                        std::size_t batch_size = 64);

struct PatchPrediction {
    Label label = Label::kAuthentic;
    float confidence = 0.0f;  ///< probability of the predicted class
    float tampered_probability = 0.0f;
};

/// Infer-mode batchnorm; argmax of the softmax output.
std::vector<PatchPrediction> predict_patches(const DetectorModel& model,
                                             std::span<const LabeledPatch> patches,
                                             std::size_t batch_size = 64);

/// Stacks patch pixels into an N x P x P x 3 batch.
Tensor<float> stack_patches(std::span<const LabeledPatch> patches, std::size_t begin, std::size_t end);

// ---------------------------------------------------------------------------
// Checkpoints: "ADETCKPT", format version, architecture, training config,
// epoch counter, named float32 tensors, running statistics, FNV-1a trailer.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize_checkpoint(const DetectorModel& model);
DetectorModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace alterdetect

#include "alterdetect/detectnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "alterdetect/random.hpp"

namespace alterdetect {

void ArchConfig::validate() const {
    if (patch_size == 0 || patch_size % 8 != 0) {
        throw std::invalid_argument("patch_size must be a positive multiple of 8, got " +
                                    std::to_string(patch_size));
    }
    for (std::size_t c : conv_channels) {
        if (c == 0) throw std::invalid_argument("conv channel widths must be positive");
    }
    if (residual_block_depth == 0) throw std::invalid_argument("residual_block_depth must be positive");
    if (fc_width == 0) throw std::invalid_argument("fc_width must be positive");
    if (num_classes != 2) throw std::invalid_argument("num_classes must be 2 (authentic/tampered)");
}

std::size_t ArchConfig::fc_input_width() const {
    const std::size_t s = patch_size / 8;
    return s * s * conv_channels[5];
}

namespace {

struct UnitSpec {
    std::string name;
    std::size_t in;
    std::size_t out;
};

std::vector<UnitSpec> unit_specs(const ArchConfig& arch) {
    const auto& c = arch.conv_channels;
    std::vector<UnitSpec> specs{{"conv1", 3, c[0]}, {"conv2", c[0], c[1]}, {"conv3", c[1], c[2]},
                                {"conv4", c[2], c[3]}, {"conv5", c[3], c[4]}, {"conv6", c[4], c[5]}};
    if (arch.enable_residual) {
        for (std::size_t i = 0; i < arch.residual_block_depth; ++i) {
            char name[16];
            std::snprintf(name, sizeof name, "res%02zu", i + 1);
            specs.push_back({name, i == 0 ? c[1] : c[4], c[4]});
        }
    }
    return specs;
}

bool is_weight_param(const std::string& name) {
    auto ends_with = [&](std::string_view suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".kernels") || ends_with(".weights");
}

template <typename T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::logic_error("missing parameter " + name);
    return it->second;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

}  // namespace

template <typename T>
std::vector<std::string> Network<T>::unit_names(const ArchConfig& arch) {
    std::vector<std::string> names;
    for (const auto& s : unit_specs(arch)) names.push_back(s.name);
    return names;
}

template <typename T>
Network<T>::Network(ArchConfig arch, ParamMap<T> params, StatsMap<T> stats)
    : arch_(std::move(arch)), params_(std::move(params)), stats_(std::move(stats)) {
    arch_.validate();
    check_consistent();
}

template <typename T>
void Network<T>::check_consistent() const {
    std::map<std::string, Shape> expected;
    for (const auto& s : unit_specs(arch_)) {
        expected[s.name + ".kernels"] = {3, 3, s.in, s.out};
        expected[s.name + ".bias"] = {s.out};
        expected[s.name + ".scale"] = {s.out};
        expected[s.name + ".shift"] = {s.out};
        auto it = stats_.find(s.name);
        if (it == stats_.end() || it->second.mean.shape() != Shape{s.out} ||
            it->second.var.shape() != Shape{s.out}) {
            throw std::invalid_argument("network: running statistics for " + s.name +
                                        " are missing or mis-shaped");
        }
    }
    expected["fc1.weights"] = {arch_.fc_input_width(), arch_.fc_width};
    expected["fc1.bias"] = {arch_.fc_width};
    expected["fc2.weights"] = {arch_.fc_width, arch_.num_classes};
    expected["fc2.bias"] = {arch_.num_classes};
    if (stats_.size() != unit_specs(arch_).size()) {
        throw std::invalid_argument("network: unexpected running statistics entries");
    }
    if (params_.size() != expected.size()) {
        throw std::invalid_argument("network: expected " + std::to_string(expected.size()) +
                                    " parameter tensors, got " + std::to_string(params_.size()));
    }
    for (const auto& [name, shape] : expected) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("network: missing parameter " + name);
        if (it->second.shape() != shape) {
            throw std::invalid_argument("network: parameter " + name + " has shape " +
                                        shape_str(it->second.shape()) + ", architecture requires " +
                                        shape_str(shape));
        }
    }
}

template <typename T>
Network<T> Network<T>::build(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    ParamMap<T> params;
    StatsMap<T> stats;
    std::uint64_t stream = 0;
    for (const auto& s : unit_specs(arch)) {
        params.emplace(s.name + ".kernels",
                       nn::xavier_init<T>({3, 3, s.in, s.out}, 9 * s.in, 9 * s.out, mix_seed(seed, stream++)));
        params.emplace(s.name + ".bias", Tensor<T>({s.out}, T{0}));
        params.emplace(s.name + ".scale", Tensor<T>({s.out}, T{1}));
        params.emplace(s.name + ".shift", Tensor<T>({s.out}, T{0}));
        stats.emplace(s.name, nn::RunningStats<T>::identity(s.out));
    }
    const std::size_t f = arch.fc_input_width();
    params.emplace("fc1.weights", nn::xavier_init<T>({f, arch.fc_width}, f, arch.fc_width, mix_seed(seed, stream++)));
    params.emplace("fc1.bias", Tensor<T>({arch.fc_width}, T{0}));
    params.emplace("fc2.weights", nn::xavier_init<T>({arch.fc_width, arch.num_classes}, arch.fc_width,
                                                     arch.num_classes, mix_seed(seed, stream++)));
    params.emplace("fc2.bias", Tensor<T>({arch.num_classes}, T{0}));
    return Network(arch, std::move(params), std::move(stats));
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : params_) total += t.size();
    return total;
}

template <typename T>
ForwardPass<T> Network<T>::forward(const Tensor<T>& batch, nn::NormMode mode) const {
    const std::size_t p = arch_.patch_size;
    if (batch.rank() != 4 || batch.dim(1) != p || batch.dim(2) != p || batch.dim(3) != 3) {
        throw ShapeError("forward: expected batch N x " + std::to_string(p) + " x " + std::to_string(p) +
                         " x 3, got " + shape_str(batch.shape()));
    }
    ForwardPass<T> pass;
    pass.mode = mode;
    pass.running = stats_;

    auto unit = [&](const std::string& name, const Tensor<T>& input) -> Tensor<T> {
        UnitTrace<T> u;
        u.name = name;
        u.input = input;
        u.conv_out = nn::conv2d(input, param(params_, name + ".kernels"), param(params_, name + ".bias"),
                                nn::Padding::kSame);
        auto bn = nn::batchnorm(u.conv_out, param(params_, name + ".scale"), param(params_, name + ".shift"),
                                mode, stats_.at(name));
        u.norm_out = std::move(bn.output);
        pass.running[name] = std::move(bn.running);
        u.output = nn::relu(u.norm_out);
        pass.units.push_back(std::move(u));
        return pass.units.back().output;
    };
    auto pool = [&](const Tensor<T>& input) {
        pass.pool_inputs.push_back(input);
        return nn::maxpool2x2(input);
    };

    pass.units.reserve(6 + (arch_.enable_residual ? arch_.residual_block_depth : 0));
    Tensor<T> a2 = unit("conv2", unit("conv1", batch));
    Tensor<T> a4 = unit("conv4", unit("conv3", pool(a2)));
    Tensor<T> s5 = unit("conv5", pool(a4));
    if (arch_.enable_residual) {
        Tensor<T> r = a2;
        if (arch_.shortcut_pooling == ShortcutPooling::kBeforeBlock) r = pool(pool(r));
        for (std::size_t i = 0; i < arch_.residual_block_depth; ++i) {
            char name[16];
            std::snprintf(name, sizeof name, "res%02zu", i + 1);
            r = unit(name, r);
        }
        if (arch_.shortcut_pooling == ShortcutPooling::kAfterBlock) r = pool(pool(r));
        s5 = add(s5, r);
    }
    Tensor<T> p6 = pool(unit("conv6", s5));
    const std::size_t n = batch.dim(0);
    pass.features = p6.reshaped({n, p6.size() / n});
    pass.fc1_pre = nn::dense(pass.features, param(params_, "fc1.weights"), param(params_, "fc1.bias"));
    pass.fc1_out = nn::relu(pass.fc1_pre);
    pass.logits = nn::dense(pass.fc1_out, param(params_, "fc2.weights"), param(params_, "fc2.bias"));
    pass.probs = nn::softmax(pass.logits);
    return pass;
}

template <typename T>
ParamMap<T> Network<T>::backward(const ForwardPass<T>& pass, const Tensor<T>& logit_grad) const {
    if (logit_grad.shape() != pass.logits.shape()) {
        throw ShapeError("backward: logit gradient " + shape_str(logit_grad.shape()) +
                         " does not match logits " + shape_str(pass.logits.shape()));
    }
    ParamMap<T> grads;
    auto take = [&](const std::string& prefix, nn::LayerGradients<T>& g) {
        for (auto& [role, t] : g.param_grads) grads[prefix + "." + role] = std::move(t);
        return std::move(g.input_grad);
    };
    auto find_unit = [&](const std::string& name) -> const UnitTrace<T>& {
        for (const auto& u : pass.units)
            if (u.name == name) return u;
        throw std::logic_error("backward: no trace for unit " + name);
    };
    auto unit_back = [&](const std::string& name, const Tensor<T>& dout) {
        const UnitTrace<T>& u = find_unit(name);
        Tensor<T> dnorm = nn::relu_backward(u.norm_out, dout);
        auto bn = nn::batchnorm_backward(u.conv_out, param(params_, name + ".scale"), dnorm, pass.mode,
                                         stats_.at(name));
        Tensor<T> dconv = take(name, bn);
        auto conv = nn::conv2d_backward(u.input, param(params_, name + ".kernels"), dconv, nn::Padding::kSame);
        return take(name, conv);
    };
    // pool_inputs: [a2, a4, (shortcut pools...), a6] in the order pooled.
    std::size_t next_pool = pass.pool_inputs.size();
    auto pool_back = [&](const Tensor<T>& dout) {
        return nn::maxpool2x2_backward(pass.pool_inputs.at(--next_pool), dout);
    };

    auto fc2 = nn::dense_backward(pass.fc1_out, param(params_, "fc2.weights"), logit_grad);
    Tensor<T> dh = take("fc2", fc2);
    Tensor<T> dpre = nn::relu_backward(pass.fc1_pre, dh);
    auto fc1 = nn::dense_backward(pass.features, param(params_, "fc1.weights"), dpre);
    Tensor<T> df = take("fc1", fc1);

    const Tensor<T>& a6_in = pass.pool_inputs.back();
    Shape pooled = a6_in.shape();
    pooled[1] /= 2;
    pooled[2] /= 2;
    df.reshape(pooled);
    Tensor<T> ds5 = unit_back("conv6", pool_back(df));

    Tensor<T> da2_short;
    if (arch_.enable_residual) {
        Tensor<T> dr = ds5;
        if (arch_.shortcut_pooling == ShortcutPooling::kAfterBlock) dr = pool_back(pool_back(dr));
        for (std::size_t i = arch_.residual_block_depth; i-- > 0;) {
            char name[16];
            std::snprintf(name, sizeof name, "res%02zu", i + 1);
            dr = unit_back(name, dr);
        }
        if (arch_.shortcut_pooling == ShortcutPooling::kBeforeBlock) dr = pool_back(pool_back(dr));
        da2_short = std::move(dr);
    }
    Tensor<T> da4 = pool_back(unit_back("conv5", ds5));
    Tensor<T> da2 = pool_back(unit_back("conv3", unit_back("conv4", da4)));
    if (arch_.enable_residual) da2 = add(da2, da2_short);
    grads["input"] = unit_back("conv1", unit_back("conv2", da2));
    return grads;
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning rate must be a finite non-negative number");
    }
    if (!(lambda_l1 >= 0.0)) throw std::invalid_argument("lambda_l1 must be non-negative");
    if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2 (batch normalization)");
    loss.validate();
}

bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.learning_rate == b.learning_rate && a.lambda_l1 == b.lambda_l1 &&
           a.l1_all_params == b.l1_all_params && a.loss.gamma == b.loss.gamma && a.loss.alpha == b.loss.alpha &&
           a.loss.label_convention == b.loss.label_convention && a.batch_size == b.batch_size &&
           a.epochs == b.epochs && a.seed == b.seed;
}

DetectorModel build_model(const ArchConfig& arch, std::uint64_t seed) {
    DetectorModel model;
    model.net = Network<float>::build(arch, seed);
    model.train_config.seed = seed;
    return model;
}

std::string EpochRecord::to_json_line() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["accuracy"] = accuracy;
    if (validation_loss) j["validation_loss"] = *validation_loss;
    return j.dump();
}

Tensor<float> stack_patches(std::span<const LabeledPatch> patches, std::size_t begin, std::size_t end) {
    if (begin >= end || end > patches.size()) throw std::invalid_argument("stack_patches: empty range");
    const Shape& s = patches[begin].pixels.shape();
    if (s.size() != 3) throw ShapeError("stack_patches: patch is not HxWxC: " + shape_str(s));
    Tensor<float> batch({end - begin, s[0], s[1], s[2]});
    const std::size_t stride = patches[begin].pixels.size();
    for (std::size_t i = begin; i < end; ++i) {
        if (patches[i].pixels.shape() != s) {
            throw ShapeError("stack_patches: patch " + shape_str(patches[i].pixels.shape()) +
                             " differs from " + shape_str(s));
        }
        std::copy(patches[i].pixels.raw(), patches[i].pixels.raw() + stride, batch.raw() + (i - begin) * stride);
    }
    return batch;
}

namespace {

Tensor<float> stack_indexed(std::span<const LabeledPatch> patches, std::span<const std::size_t> order) {
    const Shape& s = patches[order[0]].pixels.shape();
    Tensor<float> batch({order.size(), s[0], s[1], s[2]});
    const std::size_t stride = patches[order[0]].pixels.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& px = patches[order[i]].pixels;
        if (px.shape() != s) throw ShapeError("train: patches of differing shape " + shape_str(px.shape()));
        std::copy(px.raw(), px.raw() + stride, batch.raw() + i * stride);
    }
    return batch;
}

// Batch boundaries over n samples; a trailing batch of one sample is folded
// into its predecessor because train-mode batchnorm needs two.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t b = 0; b < n; b += batch) ranges.emplace_back(b, std::min(n, b + batch));
    if (ranges.size() > 1 && ranges.back().second - ranges.back().first == 1) {
        ranges.pop_back();
        ranges.back().second = n;
    }
    return ranges;
}

}  // namespace

std::pair<double, double> evaluate_loss(const DetectorModel& model, std::span<const LabeledPatch> patches,
                                        std::size_t batch_size) {
    if (patches.empty()) throw std::invalid_argument("evaluate_loss: no patches");
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < patches.size(); b += batch_size) {
        const std::size_t e = std::min(patches.size(), b + batch_size);
        auto pass = model.net.forward(stack_patches(patches, b, e), nn::NormMode::kInfer);
        for (std::size_t i = b; i < e; ++i) {
            std::span<const float> row(pass.probs.raw() + (i - b) * 2, 2);
            const int y = label_index(patches[i].label);
            loss += nn::focal_loss(row, y, model.train_config.loss).loss;
            const int pred = row[1] > row[0] ? 1 : 0;
            correct += pred == y ? 1 : 0;
        }
    }
    const double n = static_cast<double>(patches.size());
    return {loss / n, static_cast<double>(correct) / n};
}

TrainResult train(DetectorModel model, std::span<const LabeledPatch> patches, const TrainConfig& config,
                  const TrainOptions& options) {
    config.validate();
    if (patches.size() < 2) throw std::invalid_argument("train: need at least 2 patches");
    const std::size_t p = model.net.arch().patch_size;
    std::size_t tampered = 0;
    for (const auto& patch : patches) {
        if (patch.pixels.shape() != Shape{p, p, 3}) {
            throw ShapeError("train: patch " + shape_str(patch.pixels.shape()) + " does not match patch size " +
                             std::to_string(p));
        }
        tampered += patch.label == Label::kTampered ? 1 : 0;
    }
    if ((tampered == 0 || tampered == patches.size()) && options.on_warning) {
        options.on_warning("training set contains a single class; proceeding");
    }
    model.train_config = config;

    const float lr = static_cast<float>(config.learning_rate);
    const float lambda = static_cast<float>(config.lambda_l1);
    TrainResult result;
    std::optional<double> best_val;
    std::optional<Network<float>> best_net;

    std::vector<std::size_t> order(patches.size());
    for (std::size_t e = 0; e < config.epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(config.seed, 0x5eed0000ULL + model.epoch_counter));
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (const auto& [b, end] : batch_ranges(order.size(), config.batch_size)) {
            std::span<const std::size_t> idx(order.data() + b, end - b);
            const std::size_t n = idx.size();
            auto pass = model.net.forward(stack_indexed(patches, idx), nn::NormMode::kTrain);
            Tensor<float> logit_grad({n, 2});
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                std::span<const float> row(pass.probs.raw() + i * 2, 2);
                const int y = label_index(patches[idx[i]].label);
                auto fl = nn::focal_loss(row, y, config.loss);
                batch_loss += fl.loss;
                logit_grad[i * 2] = fl.logit_grad[0] / static_cast<float>(n);
                logit_grad[i * 2 + 1] = fl.logit_grad[1] / static_cast<float>(n);
                correct += ((row[1] > row[0]) ? 1 : 0) == y ? 1 : 0;
            }
            auto grads = model.net.backward(pass, logit_grad);
            double penalty = 0.0;
            for (auto& [name, w] : model.net.params()) {
                Tensor<float>& g = grads.at(name);
                if (lambda > 0.0f && (config.l1_all_params || is_weight_param(name))) {
                    auto l1 = nn::l1_penalty(w, lambda);
                    penalty += l1.value;
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += l1.subgradient[i];
                }
                w = nn::sgd_step(std::move(w), g, lr);
            }
            model.net.running_stats() = std::move(pass.running);
            loss_sum += batch_loss + penalty * static_cast<double>(n);
        }
        ++model.epoch_counter;

        EpochRecord rec;
        rec.epoch = static_cast<std::size_t>(model.epoch_counter);
        rec.loss = loss_sum / static_cast<double>(patches.size());
        rec.accuracy = static_cast<double>(correct) / static_cast<double>(patches.size());
        if (!options.validation.empty()) {
            rec.validation_loss = evaluate_loss(model, options.validation).first;
            if (!best_val || *rec.validation_loss < *best_val) {
                best_val = rec.validation_loss;
                best_net = model.net;
            }
        }
        if (!std::isfinite(rec.loss)) throw std::runtime_error("train: loss diverged at epoch " + std::to_string(rec.epoch));
        if (options.on_epoch) options.on_epoch(rec);
        result.trace.push_back(rec);
        if (options.stop_at_accuracy && rec.accuracy >= *options.stop_at_accuracy) break;
    }
    if (best_net) model.net = std::move(*best_net);
    result.model = std::move(model);
    return result;
}

std::vector<PatchPrediction> predict_patches(const DetectorModel& model, std::span<const LabeledPatch> patches,
                                             std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("predict_patches: batch size must be positive");
    const std::size_t p = model.net.arch().patch_size;
    std::vector<PatchPrediction> out;
    out.reserve(patches.size());
    for (std::size_t b = 0; b < patches.size(); b += batch_size) {
        const std::size_t e = std::min(patches.size(), b + batch_size);
        for (std::size_t i = b; i < e; ++i) {
            if (patches[i].pixels.shape() != Shape{p, p, 3}) {
                throw ShapeError("predict_patches: patch " + shape_str(patches[i].pixels.shape()) +
                                 " does not match model patch size " + std::to_string(p));
            }
        }
        auto pass = model.net.forward(stack_patches(patches, b, e), nn::NormMode::kInfer);
        for (std::size_t i = 0; i < e - b; ++i) {
            const float p0 = pass.probs[i * 2], p1 = pass.probs[i * 2 + 1];
            PatchPrediction pred;
            pred.label = p1 > p0 ? Label::kTampered : Label::kAuthentic;
            pred.confidence = std::max(p0, p1);
            pred.tampered_probability = p1;
            out.push_back(pred);
        }
    }
    return out;
}

}  // namespace alterdetect

#pragma once

// Whole-network finite-difference check at reduced scale, shared by the unit
// and acceptance suites.

#include <cstdint>
#include <vector>

#include "alterdetect/detectnet.hpp"
#include "gradcheck.hpp"

namespace alterdetect::testing {

inline ArchConfig reduced_arch(bool residual = true) {
    ArchConfig a;
    a.patch_size = 16;
    a.conv_channels = {4, 4, 8, 8, 8, 8};
    a.residual_block_depth = 3;
    a.fc_width = 16;
    a.enable_residual = residual;
    return a;
}

/// Fingerprint of every ReLU on/off decision and every pooling argmax in a
/// forward pass, computed from the recorded intermediates.
inline std::uint64_t activation_pattern(const ForwardPass<double>& pass) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
    for (const auto& u : pass.units)
        for (double v : u.norm_out.data()) mix(v > 0.0);
    for (double v : pass.fc1_pre.data()) mix(v > 0.0);
    for (const auto& x : pass.pool_inputs) {
        const std::size_t n = x.dim(0), hh = x.dim(1), w = x.dim(2), c = x.dim(3);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t oy = 0; oy < hh / 2; ++oy)
                for (std::size_t ox = 0; ox < w / 2; ++ox)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        std::size_t best = 0;
                        double bv = x[((s * hh + 2 * oy) * w + 2 * ox) * c + ch];
                        for (std::size_t t = 1; t < 4; ++t) {
                            const double v = x[((s * hh + 2 * oy + t / 2) * w + 2 * ox + t % 2) * c + ch];
                            if (v > bv) bv = v, best = t;
                        }
                        mix(best);
                    }
    }
    return h;
}

struct NetworkCheck {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

struct NetworkCheckOptions {
    nn::NormMode mode = nn::NormMode::kTrain;
    std::size_t batch = 2;
    double gamma = 2.0;
    std::size_t per_tensor = 12;
    double step = kFdStep;
};

/// Mean focal loss over a random batch of patches; every parameter tensor
/// and the input are probed at `per_tensor` sampled entries.
inline NetworkCheck check_network_gradients(const ArchConfig& arch, std::uint64_t seed,
                                            const NetworkCheckOptions& opt = {}) {
    const std::size_t per_tensor = opt.per_tensor;
    const std::size_t nb = opt.batch;
    Rng rng(seed);
    Network<double> net = Network<double>::build(arch, seed);
    // Randomize the affine batchnorm terms so their gradients are exercised
    // away from the initial values.
    for (auto& [name, t] : net.params()) {
        if (name.ends_with(".scale")) t = random_tensor(t.shape(), rng, 0.5, 1.5);
        if (name.ends_with(".shift") || name.ends_with(".bias")) t = random_tensor(t.shape(), rng, -0.2, 0.2);
    }
    const std::size_t p = arch.patch_size;
    Tensor<double> input = random_tensor({nb, p, p, 3}, rng, 0.0, 1.0);
    std::vector<int> labels(nb);
    for (int& y : labels) y = static_cast<int>(rng.below(2));
    nn::LossConfig cfg;
    cfg.gamma = opt.gamma;
    // Infer mode needs non-trivial running statistics to be meaningful.
    if (opt.mode == nn::NormMode::kInfer) {
        for (auto& [name, st] : net.running_stats()) {
            st.mean = random_tensor(st.mean.shape(), rng, -0.5, 0.5);
            st.var = random_tensor(st.var.shape(), rng, 0.5, 2.0);
        }
    }

    auto loss_of = [&](const ForwardPass<double>& pass) {
        double s = 0.0;
        for (std::size_t i = 0; i < nb; ++i) {
            std::span<const double> row(pass.probs.raw() + i * 2, 2);
            s += nn::focal_loss(row, labels[i], cfg).loss;
        }
        return s / static_cast<double>(nb);
    };

    auto pass = net.forward(input, opt.mode);
    Tensor<double> logit_grad({nb, 2});
    for (std::size_t i = 0; i < nb; ++i) {
        std::span<const double> row(pass.probs.raw() + i * 2, 2);
        auto fl = nn::focal_loss(row, labels[i], cfg);
        logit_grad[i * 2] = fl.logit_grad[0] / static_cast<double>(nb);
        logit_grad[i * 2 + 1] = fl.logit_grad[1] / static_cast<double>(nb);
    }
    auto grads = net.backward(pass, logit_grad);

    std::uint64_t last_pattern = 0;
    auto loss = [&] {
        auto f = net.forward(input, opt.mode);
        last_pattern = activation_pattern(f);
        return loss_of(f);
    };
    // check_gradient reads the pattern before perturbing and after each
    // evaluation, so priming with an unperturbed evaluation sets the base.
    auto pattern = [&] { return last_pattern; };

    NetworkCheck out;
    auto absorb = [&](const CheckResult& r) {
        out.max_relative_error = std::max(out.max_relative_error, r.max_relative_error);
        out.checked += r.checked;
        out.skipped += r.skipped;
    };
    for (auto& [name, t] : net.params()) {
        loss();
        absorb(check_gradient(t, grads.at(name), loss, sample_entries(t.size(), per_tensor, rng), pattern,
                              opt.step));
    }
    loss();
    absorb(check_gradient(input, grads.at("input"), loss, sample_entries(input.size(), per_tensor * 4, rng),
                          pattern, opt.step));
    return out;
}

}  // namespace alterdetect::testing

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "alterdetect/detectnet.hpp"
#include "netcheck.hpp"

namespace alterdetect {
namespace {

using testing::reduced_arch;

// Hand count for the default architecture: each conv unit carries 9*in*out
// kernel weights plus bias, scale and shift per output channel.
std::size_t hand_count_default(std::size_t patch, bool residual) {
    std::size_t total = 0;
    total += 9 * 3 * 32 + 3 * 32;      // conv1
    total += 9 * 32 * 32 + 3 * 32;     // conv2
    total += 9 * 32 * 64 + 3 * 64;     // conv3
    total += 9 * 64 * 64 + 3 * 64;     // conv4
    total += 9 * 64 * 128 + 3 * 128;   // conv5
    total += 9 * 128 * 128 + 3 * 128;  // conv6
    const std::size_t flat = (patch / 8) * (patch / 8) * 128;
    total += flat * 256 + 256;          // fc1
    total += 256 * 2 + 2;               // fc2
    if (residual) {
        total += 9 * 32 * 128 + 3 * 128;         // first shortcut unit widens 32 -> 128
        total += 14 * (9 * 128 * 128 + 3 * 128);  // remaining 14
    }
    return total;
}

Tensor<float> random_batch(std::size_t n, std::size_t p, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t({n, p, p, 3});
    for (float& v : t.values()) v = static_cast<float>(rng.uniform());
    return t;
}

std::vector<LabeledPatch> separable_set(std::size_t count, std::size_t p, std::uint64_t seed) {
    // Authentic patches carry fine-grained noise; tampered ones are smooth.
    Rng rng(seed);
    std::vector<LabeledPatch> out;
    for (std::size_t i = 0; i < count; ++i) {
        LabeledPatch patch;
        patch.label = i % 2 ? Label::kTampered : Label::kAuthentic;
        patch.pixels = Tensor<float>({p, p, 3});
        const double base = rng.uniform(0.2, 0.8);
        for (float& v : patch.pixels.values()) {
            const double noise = patch.label == Label::kAuthentic ? rng.uniform(-0.2, 0.2) : 0.0;
            v = static_cast<float>(base + noise);
        }
        out.push_back(std::move(patch));
    }
    return out;
}

TEST(ArchConfig, Validation) {
    ArchConfig a;
    EXPECT_NO_THROW(a.validate());
    a.patch_size = 60;
    EXPECT_THROW(a.validate(), std::invalid_argument);
    a = {};
    a.conv_channels[3] = 0;
    EXPECT_THROW(a.validate(), std::invalid_argument);
    a = {};
    a.residual_block_depth = 0;
    EXPECT_THROW(a.validate(), std::invalid_argument);
    a = {};
    a.num_classes = 3;
    EXPECT_THROW(a.validate(), std::invalid_argument);
}

TEST(BuildModel, DeterministicForSeed) {
    auto a = build_model(reduced_arch(), 9);
    auto b = build_model(reduced_arch(), 9);
    EXPECT_EQ(a.net.params(), b.net.params());
    auto c = build_model(reduced_arch(), 10);
    EXPECT_NE(a.net.params(), c.net.params());
}

TEST(BuildModel, ParameterCountMatchesHandCount) {
    ArchConfig arch;
    for (std::size_t patch : {64u, 128u}) {
        arch.patch_size = patch;
        arch.enable_residual = true;
        EXPECT_EQ(Network<float>::build(arch, 1).parameter_count(), hand_count_default(patch, true));
        arch.enable_residual = false;
        EXPECT_EQ(Network<float>::build(arch, 1).parameter_count(), hand_count_default(patch, false));
    }
}

TEST(BuildModel, PatchSizeOnlyChangesFcInput) {
    ArchConfig a64, a128;
    a128.patch_size = 128;
    auto n64 = Network<float>::build(a64, 3);
    auto n128 = Network<float>::build(a128, 3);
    for (const auto& [name, t] : n64.params()) {
        if (name == "fc1.weights") {
            EXPECT_EQ(t.dim(0) * 4, n128.params().at(name).dim(0));
        } else {
            EXPECT_EQ(t.shape(), n128.params().at(name).shape()) << name;
        }
    }
}

TEST(BuildModel, AblationDeltaIsShortcutCount) {
    ArchConfig on, off;
    off.enable_residual = false;
    const std::size_t delta = Network<float>::build(on, 1).parameter_count() -
                              Network<float>::build(off, 1).parameter_count();
    EXPECT_EQ(delta, conv_unit_parameters(32, 128) + 14 * conv_unit_parameters(128, 128));
    auto names = Network<float>::unit_names(off);
    EXPECT_EQ(names.size(), 6u);
}

TEST(Forward, RowsAreDistributions) {
    auto net = Network<float>::build(reduced_arch(), 4);
    auto pass = net.forward(random_batch(5, 16, 1), nn::NormMode::kTrain);
    ASSERT_EQ(pass.probs.shape(), (Shape{5, 2}));
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(pass.probs[2 * i] + pass.probs[2 * i + 1], 1.0, 1e-6);
        EXPECT_GE(pass.probs[2 * i], 0.0f);
    }
    EXPECT_THROW(net.forward(random_batch(2, 32, 1), nn::NormMode::kInfer), ShapeError);
}

TEST(Forward, ZeroShortcutEqualsAblatedNetwork) {
    for (ShortcutPooling pooling : {ShortcutPooling::kAfterBlock, ShortcutPooling::kBeforeBlock}) {
        ArchConfig arch = reduced_arch(true);
        arch.shortcut_pooling = pooling;
        auto with = Network<double>::build(arch, 12);
        for (auto& [name, t] : with.params())
            if (name.starts_with("res") && !name.ends_with(".scale")) t.fill(0.0);
        ParamMap<double> plain_params;
        StatsMap<double> plain_stats;
        for (const auto& [name, t] : with.params())
            if (!name.starts_with("res")) plain_params.emplace(name, t);
        for (const auto& [name, s] : with.running_stats())
            if (!name.starts_with("res")) plain_stats.emplace(name, s);
        Network<double> without(reduced_arch(false), plain_params, plain_stats);
        auto batch = random_batch(3, 16, 2).cast<double>();
        for (auto mode : {nn::NormMode::kTrain, nn::NormMode::kInfer}) {
            auto a = with.forward(batch, mode).probs;
            auto b = without.forward(batch, mode).probs;
            for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
        }
    }
}

TEST(Backward, FullNetworkMatchesFiniteDifferences) {
    testing::NetworkCheckOptions opt;
    opt.mode = nn::NormMode::kInfer;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        for (bool residual : {true, false}) {
            auto r = testing::check_network_gradients(reduced_arch(residual), seed, opt);
            EXPECT_LE(r.max_relative_error, testing::kFdTolerance) << "seed " << seed;
            // Probes that cross a ReLU or pooling kink are skipped; most must remain.
            EXPECT_GE(r.checked, 200u) << "too many non-differentiable probes";
        }
    }
    ArchConfig before = reduced_arch();
    before.shortcut_pooling = ShortcutPooling::kBeforeBlock;
    EXPECT_LE(testing::check_network_gradients(before, 77, opt).max_relative_error, testing::kFdTolerance);
}

// With batch statistics the loss has enough curvature that the step-1e-3
// central difference carries O(h^2) truncation error; a smaller step
// shows the analytic gradient converging.
TEST(Backward, TrainModeNetworkConvergesWithStep) {
    testing::NetworkCheckOptions opt;
    opt.per_tensor = 6;
    opt.step = 1e-4;
    auto r = testing::check_network_gradients(reduced_arch(true), 3, opt);
    EXPECT_LE(r.max_relative_error, testing::kFdTolerance);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
    auto model = build_model(reduced_arch(), 5);
    auto data = separable_set(12, 16, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    auto result = train(model, data, cfg);
    EXPECT_EQ(result.model.net.params(), model.net.params());
    EXPECT_EQ(result.trace.size(), 1u);
    EXPECT_TRUE(std::isfinite(result.trace[0].loss));
}

TEST(Train, DeterministicAndLearnsSeparableSet) {
    auto data = separable_set(40, 16, 8);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.seed = 21;
    auto a = train(build_model(reduced_arch(), 21), data, cfg);
    auto b = train(build_model(reduced_arch(), 21), data, cfg);
    EXPECT_EQ(a.model.net.params(), b.model.net.params());
    EXPECT_EQ(a.trace.back().loss, b.trace.back().loss);

    auto preds = predict_patches(a.model, data);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += preds[i].label == data[i].label;
    EXPECT_EQ(correct, data.size());
}

TEST(Train, GammaZeroMatchesCrossEntropyStepForStep) {
    // Cross entropy through the softmax has logit gradient p - onehot(y).
    auto data = separable_set(8, 16, 4);
    auto model = build_model(reduced_arch(), 6);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.lambda_l1 = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.loss.gamma = 0.0;
    auto focal = train(model, data, cfg).model;

    Network<float> net = model.net;
    for (int e = 0; e < 3; ++e) {
        std::vector<std::size_t> order(8);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(cfg.seed, 0x5eed0000ULL + e));
        rng.shuffle(order);
        Tensor<float> batch({8, 16, 16, 3});
        for (std::size_t i = 0; i < 8; ++i)
            std::copy(data[order[i]].pixels.raw(), data[order[i]].pixels.raw() + 768, batch.raw() + i * 768);
        auto pass = net.forward(batch, nn::NormMode::kTrain);
        Tensor<float> g({8, 2});
        for (std::size_t i = 0; i < 8; ++i) {
            const int y = label_index(data[order[i]].label);
            for (int j = 0; j < 2; ++j) g[i * 2 + j] = (pass.probs[i * 2 + j] - (j == y ? 1.0f : 0.0f)) / 8.0f;
        }
        auto grads = net.backward(pass, g);
        for (auto& [name, w] : net.params()) w = nn::sgd_step(std::move(w), grads.at(name), 0.05f);
        net.running_stats() = pass.running;
    }
    for (const auto& [name, w] : net.params()) {
        const auto& v = focal.net.params().at(name);
        for (std::size_t i = 0; i < w.size(); ++i) ASSERT_NEAR(w[i], v[i], 1e-5) << name;
    }
}

TEST(Train, SingleClassWarnsAndProceeds) {
    auto data = separable_set(6, 16, 1);
    for (auto& p : data) p.label = Label::kTampered;
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    std::string warning;
    TrainOptions opts;
    opts.on_warning = [&](const std::string& w) { warning = w; };
    auto r = train(build_model(reduced_arch(), 1), data, cfg, opts);
    EXPECT_NE(warning.find("single class"), std::string::npos);
    EXPECT_EQ(r.trace.size(), 1u);
    EXPECT_THROW(train(build_model(reduced_arch(), 1), std::span(data).first(1), cfg), std::invalid_argument);
}

TEST(Train, EpochRecordsAreJsonLines) {
    EpochRecord rec{3, 0.25, 0.5, 0.125};
    EXPECT_EQ(rec.to_json_line(), R"({"epoch":3,"loss":0.25,"accuracy":0.5,"validation_loss":0.125})");
}

TEST(Predict, InvariantToBatchPartitioning) {
    auto model = build_model(reduced_arch(), 2);
    // Move running stats off identity so infer mode is non-trivial.
    auto data = separable_set(10, 16, 5);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 5;
    model = train(model, data, cfg).model;
    auto together = predict_patches(model, data, 10);
    auto single = predict_patches(model, data, 1);
    for (std::size_t i = 0; i < data.size(); ++i) {
        EXPECT_EQ(together[i].label, single[i].label);
        EXPECT_NEAR(together[i].confidence, single[i].confidence, 1e-6);
    }
    std::vector<LabeledPatch> wrong(1);
    wrong[0].pixels = Tensor<float>({8, 8, 3});
    EXPECT_THROW(predict_patches(model, wrong), ShapeError);
}

TEST(Predict, ArgmaxInvariantUnderMonotoneLogitRescaling) {
    auto net = Network<double>::build(reduced_arch(), 3);
    auto pass = net.forward(random_batch(6, 16, 9).cast<double>(), nn::NormMode::kInfer);
    for (std::size_t i = 0; i < 6; ++i) {
        const double z0 = pass.logits[2 * i], z1 = pass.logits[2 * i + 1];
        const bool argmax = z1 > z0;
        auto f = [](double z) { return 3.0 * z * z * z + 2.0 * z + 1.0; };  // strictly increasing
        EXPECT_EQ(f(z1) > f(z0), argmax);
        EXPECT_EQ(pass.probs[2 * i + 1] > pass.probs[2 * i], argmax);
    }
}

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = std::filesystem::temp_directory_path() / ("adet_ckpt_" + std::to_string(::getpid()));
        std::filesystem::create_directories(dir_);
    }
    void TearDown() override { std::filesystem::remove_all(dir_); }
    std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsByteIdentical) {
    auto model = build_model(reduced_arch(), 31);
    auto data = separable_set(6, 16, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.loss.alpha = {0.75, 1.25};
    model = train(model, data, cfg).model;

    save_checkpoint(model, dir_ / "a.ckpt");
    auto loaded = load_checkpoint(dir_ / "a.ckpt");
    save_checkpoint(loaded, dir_ / "b.ckpt");
    auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(read(dir_ / "a.ckpt"), read(dir_ / "b.ckpt"));
    EXPECT_EQ(loaded.net.params(), model.net.params());
    EXPECT_EQ(loaded.net.arch(), model.net.arch());
    EXPECT_TRUE(loaded.train_config == model.train_config);
    EXPECT_EQ(loaded.epoch_counter, 2u);

    auto p1 = predict_patches(model, data);
    auto p2 = predict_patches(loaded, data);
    for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(p1[i].confidence, p2[i].confidence);
}

TEST_F(CheckpointTest, RejectsCorruption) {
    auto bytes = serialize_checkpoint(build_model(reduced_arch(), 1));
    auto truncated = std::span<const std::uint8_t>(bytes).first(bytes.size() / 2);
    try {
        deserialize_checkpoint(truncated);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x40;
    EXPECT_THROW(deserialize_checkpoint(flipped), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointError);
    auto bad_version = bytes;
    bad_version[8] = 99;
    try {
        deserialize_checkpoint(bad_version);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(deserialize_checkpoint(trailing), CheckpointError);
    EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), CheckpointError);
}

}  // namespace
}  // namespace alterdetect

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "alterdetect/evalharness.hpp"

using namespace alterdetect;
namespace fs = std::filesystem;

namespace {

constexpr Label A = Label::kAuthentic;
constexpr Label T = Label::kTampered;

CachedImage cached(const std::string& id, Label truth, std::vector<Label> predicted, std::optional<int> probe = {}) {
    CachedImage c;
    c.image_id = id;
    c.truth = truth;
    c.probe = probe;
    c.patch_truth.assign(predicted.size(), truth);
    c.patch_predicted = std::move(predicted);
    c.score = tamper_ratio(c.patch_predicted, id);
    return c;
}

ExperimentConfig tiny_config(const std::string& name) {
    ExperimentConfig cfg;
    const fs::path dir = fs::temp_directory_path() / ("alterdetect_eval_" + name);
    fs::remove_all(dir);
    cfg.work_dir = dir.string();
    cfg.synth_subjects = 6;
    cfg.synth_height = 64;
    cfg.synth_width = 128;
    cfg.arch.conv_channels = {2, 2, 2, 2, 2, 2};
    cfg.arch.residual_block_depth = 1;
    cfg.arch.fc_width = 4;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.val_fraction = 0.0;
    cfg.calibration_fraction = 0.3;
    return cfg;
}

}  // namespace

TEST(Confusion, NormalizedRows) {
    ConfusionMatrix cm;
    cm.counts = {{{99, 1}, {1, 99}}};
    const auto n = cm.normalized();
    EXPECT_DOUBLE_EQ(n[0][0], 0.99);
    EXPECT_DOUBLE_EQ(n[0][1], 0.01);
    EXPECT_DOUBLE_EQ(n[1][0], 0.01);
    EXPECT_DOUBLE_EQ(n[1][1], 0.99);
    EXPECT_DOUBLE_EQ(cm.accuracy(), 0.99);
    EXPECT_DOUBLE_EQ(cm.balanced_accuracy(), 0.99);
    EXPECT_DOUBLE_EQ(cm.false_positive_rate(), 0.01);
}

TEST(Confusion, PerfectPredictionsGiveIdentity) {
    ConfusionMatrix cm;
    for (int i = 0; i < 5; ++i) cm.add(A, A);
    for (int i = 0; i < 7; ++i) cm.add(T, T);
    const auto n = cm.normalized();
    EXPECT_EQ(n[0][0], 1.0);
    EXPECT_EQ(n[0][1], 0.0);
    EXPECT_EQ(n[1][0], 0.0);
    EXPECT_EQ(n[1][1], 1.0);
    EXPECT_EQ(cm.total(), 12u);
}

TEST(Confusion, EmptyRowsStayZero) {
    ConfusionMatrix cm;
    cm.add(T, A);
    const auto n = cm.normalized();
    EXPECT_EQ(n[0][0], 0.0);
    EXPECT_EQ(n[1][0], 1.0);
    EXPECT_EQ(cm.false_positive_rate(), 0.0);
    EXPECT_EQ(cm.balanced_accuracy(), 0.0);
}

TEST(EvaluateImages, ThreeImageOracle) {
    const std::vector<CachedImage> images = {
        cached("a", A, {A, A, A, A}, 1),
        cached("b", T, {T, T, A, A}, 1),
        cached("c", A, {T, A, A, A}, 2),
    };
    Aggregator agg;
    agg.threshold = ThresholdModel{30.0};
    std::vector<LabeledScore> fit = {{images[0].score, A}, {images[1].score, T}, {images[2].score, A}};
    agg.svm = train_svm(fit, {.c = 10.0, .rbf_gamma = 5.0});

    const EvalReport rep = evaluate_images(images, agg);
    // Scores are 0, 50, 25; threshold 30 flags only "b".
    ASSERT_TRUE(rep.threshold);
    EXPECT_EQ(rep.threshold->counts[0][0], 2u);
    EXPECT_EQ(rep.threshold->counts[1][1], 1u);
    EXPECT_EQ(rep.threshold->accuracy(), 1.0);
    EXPECT_EQ(rep.patch_confusion.counts[0][0], 7u);
    EXPECT_EQ(rep.patch_confusion.counts[0][1], 1u);
    EXPECT_EQ(rep.patch_confusion.counts[1][0], 2u);
    EXPECT_EQ(rep.patch_confusion.counts[1][1], 2u);
    ASSERT_EQ(rep.decisions.size(), 3u);
    for (std::size_t i = 0; i < images.size(); ++i) {
        EXPECT_EQ(*rep.decisions[i].by_threshold, classify_by_threshold(images[i].score, *agg.threshold));
        const SvmDecision s = svm_predict(*agg.svm, images[i].score);
        EXPECT_EQ(*rep.decisions[i].by_svm, s.label);
        EXPECT_EQ(rep.decisions[i].margin, s.margin);
        EXPECT_EQ(*rep.decisions[i].truth, images[i].truth);
    }
    ASSERT_EQ(rep.per_probe.size(), 4u);
    EXPECT_EQ(rep.per_probe[0].probe, 1);
    EXPECT_EQ(rep.per_probe[0].method, "threshold");
    EXPECT_EQ(rep.per_probe[0].confusion.total(), 2u);
    EXPECT_EQ(rep.per_probe[2].probe, 2);
    EXPECT_EQ(rep.per_probe[2].confusion.total(), 1u);
}

TEST(EvaluateImages, SingleAuthenticImage) {
    Aggregator agg;
    agg.threshold = ThresholdModel{};
    const EvalReport rep = evaluate_images({cached("x", A, {A, A, A, A})}, agg, Aggregation::kThreshold);
    EXPECT_EQ(rep.threshold->accuracy(), 1.0);
    EXPECT_EQ(rep.threshold->false_positive_rate(), 0.0);
    EXPECT_FALSE(rep.svm);
}

TEST(EvaluateImages, RejectsUnfittedAggregator) {
    const std::vector<CachedImage> images = {cached("x", A, {A})};
    EXPECT_THROW(evaluate_images(images, Aggregator{}), std::invalid_argument);
    Aggregator thr_only;
    thr_only.threshold = ThresholdModel{};
    EXPECT_THROW(evaluate_images(images, thr_only, Aggregation::kSvm), std::invalid_argument);
    EXPECT_NO_THROW(evaluate_images(images, thr_only, Aggregation::kThreshold));
    EXPECT_THROW(evaluate_images({}, thr_only, Aggregation::kThreshold), std::invalid_argument);
}

TEST(Config, EntriesRoundTripThroughSet) {
    ExperimentConfig a;
    a.set("learning_rate", "0.05");
    a.set("channels", "4, 4, 8, 8, 16, 16");
    a.set("threshold", "12.5");
    a.set("alpha", "0.25,0.75");
    a.set("labeling", "region");
    ExperimentConfig b;
    for (const auto& [k, v] : a.entries()) b.set(k, v);
    EXPECT_EQ(a.entries(), b.entries());
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    EXPECT_NE(a.fingerprint(), ExperimentConfig{}.fingerprint());
    EXPECT_EQ(b.arch.conv_channels[5], 16u);
    EXPECT_EQ(*b.threshold, 12.5);
    EXPECT_EQ(config_keys().size(), a.entries().size());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    ExperimentConfig c;
    EXPECT_THROW(c.set("learnin_rate", "1"), ConfigError);
    EXPECT_THROW(c.set("epochs", "-3"), ConfigError);
    EXPECT_THROW(c.set("epochs", "3x"), ConfigError);
    EXPECT_THROW(c.set("residual", "maybe"), ConfigError);
    EXPECT_THROW(c.set("channels", "1,2,3"), ConfigError);
    c.set("jpeg_quality", "0");
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, TextParsingReportsLineNumbers) {
    const auto kv = parse_config_text("# comment\nseed = 7\n\nepochs=3 # trailing\n");
    ASSERT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"seed", "7"}));
    EXPECT_EQ(kv[1].second, "3");
    try {
        parse_config_text("seed = 1\nbogus line\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Pipeline, CalibrationSplitIsSubjectDisjoint) {
    ExperimentConfig cfg = tiny_config("calib");
    cfg.synth_subjects = 20;
    const Manifest m = prepare_manifest(cfg);
    const auto [cnn, calib] = calibration_split(m, 0.2, 9);
    EXPECT_EQ(cnn.size() + calib.size(), m.with_split(Split::kTrain).size());
    std::set<std::string> cnn_subjects, calib_subjects;
    std::set<Label> calib_labels;
    for (auto* r : cnn) cnn_subjects.insert(*r->subject);
    for (auto* r : calib) {
        calib_subjects.insert(*r->subject);
        calib_labels.insert(r->label);
    }
    for (const auto& s : calib_subjects) EXPECT_FALSE(cnn_subjects.count(s));
    EXPECT_EQ(calib_subjects.size(), 2u);
    EXPECT_EQ(calib_labels.size(), 2u);
    const auto [all, same] = calibration_split(m, 0.0, 9);
    EXPECT_EQ(all, same);
}

TEST(Pipeline, RegionLabellingNeedsMasks) {
    Manifest m;
    m.base_dir = fs::temp_directory_path().string();
    ImageRecord r;
    r.path = "does_not_matter.png";
    r.label = T;
    LabelingConfig lc{LabelingPolicy::kRegionMask, 0.0};
    EXPECT_THROW(record_patches(m, r, 64, lc), std::exception);
}

TEST(Pipeline, MissingManifestIsStageTagged) {
    ExperimentConfig cfg = tiny_config("missing");
    cfg.manifest = "/nonexistent/manifest.tsv";
    try {
        run_experiment(cfg);
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "prepare");
        EXPECT_EQ(std::string(e.what()).rfind("stage 'prepare' failed", 0), 0u);
    }
}

TEST(Pipeline, StandardRunIsDeterministic) {
    const ExperimentConfig cfg = tiny_config("determinism");
    const ExperimentResult a = run_experiment(cfg);
    const ExperimentResult b = run_experiment(cfg);
    EXPECT_EQ(a.to_jsonl(), b.to_jsonl());
    EXPECT_EQ(a.to_text(), b.to_text());
    ASSERT_EQ(a.reports.size(), 1u);
    EXPECT_EQ(a.reports[0].decisions.size(), 6u);
    EXPECT_NE(a.to_jsonl().find(cfg.fingerprint()), std::string::npos);
    EXPECT_NE(a.to_text().find(cfg.fingerprint()), std::string::npos);
}

TEST(Pipeline, AblationReportsBothVariants) {
    ExperimentConfig cfg = tiny_config("ablation");
    cfg.kind = ExperimentKind::kAblation;
    const ExperimentResult r = run_experiment(cfg);
    ASSERT_EQ(r.reports.size(), 2u);
    EXPECT_EQ(r.reports[0].variant, "residual");
    EXPECT_EQ(r.reports[1].variant, "no-residual");
    ASSERT_TRUE(r.comparison);
    EXPECT_GT(r.comparison->parameter_delta, 0);
    EXPECT_EQ(static_cast<std::size_t>(r.comparison->parameter_delta),
              r.reports[0].parameter_count - r.reports[1].parameter_count);
    EXPECT_NE(r.to_jsonl().find("\"record\":\"comparison\""), std::string::npos);
}

TEST(Pipeline, CompressionEvaluatesBothFormats) {
    ExperimentConfig cfg = tiny_config("compression");
    cfg.kind = ExperimentKind::kCompression;
    const ExperimentResult r = run_experiment(cfg);
    ASSERT_EQ(r.reports.size(), 2u);
    EXPECT_EQ(r.reports[0].variant, "png");
    EXPECT_EQ(r.reports[1].variant, "jpeg-q50");
    EXPECT_EQ(r.reports[0].decisions.size(), r.reports[1].decisions.size());
    const std::string text = r.to_text();
    EXPECT_NE(text.find("Compression"), std::string::npos);
    EXPECT_NE(text.find("Thresholding"), std::string::npos);
}

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alterdetect/aggregate.hpp"
#include "alterdetect/datasets.hpp"
#include "alterdetect/detectnet.hpp"

namespace alterdetect {

/// counts[truth][predicted], index 0 = authentic.
struct ConfusionMatrix {
    std::array<std::array<std::size_t, 2>, 2> counts{};

    void add(Label truth, Label predicted) { ++counts[label_index(truth)][label_index(predicted)]; }
    std::size_t total() const;
    std::size_t correct() const { return counts[0][0] + counts[1][1]; }
    double accuracy() const;
    /// Mean of the two per-class recalls (classes with no examples skipped).
    double balanced_accuracy() const;
    double false_positive_rate() const;
    /// Row-normalized; an empty row stays zero.
    std::array<std::array<double, 2>, 2> normalized() const;
};

ConfusionMatrix evaluate_patches(const DetectorModel& model, std::span<const LabeledPatch> patches,
                                 std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Patch labelling of manifest images

enum class LabelingPolicy { kWholeImage, kRegionMask };

struct LabelingConfig {
    LabelingPolicy policy = LabelingPolicy::kWholeImage;
    double coverage_threshold = 0.0;
};

/// Extracts and labels the patches of one manifest record.
PatchGrid record_patches(const Manifest& m, const ImageRecord& r, std::size_t patch_size,
                         const LabelingConfig& labeling);

std::vector<LabeledPatch> collect_patches(const Manifest& m, const std::vector<const ImageRecord*>& records,
                                          std::size_t patch_size, const LabelingConfig& labeling);

/// Patch predictions of one image, computed once and reused by every
/// aggregation method.
struct CachedImage {
    std::string image_id;
    Label truth = Label::kAuthentic;
    std::optional<int> probe;
    std::vector<Label> patch_truth;
    std::vector<Label> patch_predicted;
    ImageScore score;
};

std::vector<CachedImage> predict_images(const DetectorModel& model, const Manifest& m,
                                        const std::vector<const ImageRecord*>& records,
                                        const LabelingConfig& labeling);

// ---------------------------------------------------------------------------
// Reports

enum class Aggregation { kThreshold, kSvm, kBoth };

struct ProbeRow {
    int probe = 0;
    std::string method;  ///< "threshold" or "svm"
    ConfusionMatrix confusion;
};

struct EvalReport {
    std::string variant;
    ConfusionMatrix patch_confusion;
    std::optional<ConfusionMatrix> threshold;
    std::optional<ConfusionMatrix> svm;
    std::vector<ProbeRow> per_probe;
    std::vector<ImageDecision> decisions;
    std::vector<std::optional<int>> decision_probes;
    std::size_t parameter_count = 0;
    std::vector<EpochRecord> trace;
    std::vector<ThresholdSweepRow> threshold_sweep;
    std::optional<double> tau;
};

/// Image-level evaluation from cached patch predictions. Throws when the
/// aggregator lacks a method the aggregation asks for.
EvalReport evaluate_images(const std::vector<CachedImage>& images, const Aggregator& agg,
                           Aggregation aggregation = Aggregation::kBoth);

/// Convenience wrapper: predicts the records, then evaluates.
EvalReport evaluate_images(const DetectorModel& model, const Manifest& m,
                           const std::vector<const ImageRecord*>& records, const LabelingConfig& labeling,
                           const Aggregator& agg, Aggregation aggregation = Aggregation::kBoth);

// ---------------------------------------------------------------------------
// Experiment configuration

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ExperimentKind { kStandard, kAblation, kCompression };

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::kStandard;
    std::string manifest;
    std::string work_dir = "alterdetect_work";
    int protocol = 1;
    std::uint64_t seed = 1;
    double val_fraction = 0.1;
    double calibration_fraction = 0.2;
    LabelingConfig labeling;
    ArchConfig arch;
    TrainConfig train;
    Aggregation aggregation = Aggregation::kBoth;
    SvmParams svm;
    /// When set, the threshold is fixed instead of grid-searched.
    std::optional<double> threshold;
    int jpeg_quality = 50;
    /// Compression runs retrain on the recompressed images instead of
    /// only evaluating the PNG-trained model on them.
    bool compress_retrain = false;
    SynthAlterConfig synth_alter;
    std::size_t synth_subjects = 100;
    std::size_t synth_height = 128;
    std::size_t synth_width = 128;
    int synth_probes = 0;

    /// Applies one key=value setting; unknown keys and malformed values
    /// raise ConfigError.
    void set(const std::string& key, const std::string& value);
    /// Every key with its current value, in a fixed order.
    std::vector<std::pair<std::string, std::string>> entries() const;
    /// Hex FNV-1a 64 of the canonical key=value listing.
    std::string fingerprint() const;
    void validate() const;
};

std::vector<std::string> config_keys();

/// Parses "key = value" lines; '#' starts a comment. Errors carry the line
/// number.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);
void apply_config_file(ExperimentConfig& cfg, const std::string& path);
/// The effective configuration as a config file, headed by its fingerprint.
std::string format_config(const ExperimentConfig& cfg);
/// Corpus settings used when no manifest is named.
CorpusConfig corpus_config(const ExperimentConfig& cfg);

/// Raised when a pipeline stage fails; what() starts with the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& message)
        : std::runtime_error("stage '" + stage + "' failed: " + message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct Comparison {
    std::string kind;  ///< "ablation" or "compression"
    std::string first;
    std::string second;
    double patch_accuracy_first = 0.0, patch_accuracy_second = 0.0;
    std::optional<double> threshold_first, threshold_second;
    std::optional<double> svm_first, svm_second;
    long long parameter_delta = 0;
};

struct ExperimentResult {
    std::string fingerprint;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<EvalReport> reports;
    std::optional<Comparison> comparison;

    std::string to_jsonl() const;
    std::string to_text() const;
};

struct ExperimentHooks {
    std::function<void(const std::string& variant, const EpochRecord&)> on_epoch;
    std::function<void(const std::string&)> on_log;
};

/// Fitted artifacts of one train -> calibrate run.
struct TrainedPipeline {
    DetectorModel model;
    Aggregator aggregator;
    std::vector<EpochRecord> trace;
    std::vector<ThresholdSweepRow> threshold_sweep;
};

/// Loads the manifest (or synthesizes a corpus when none is named) and
/// assigns the protocol split.
Manifest prepare_manifest(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {});

/// Trains on the train split (minus the calibration carve-out), keeping the
/// best validation-loss parameters, then fits the aggregator on the
/// calibration images.
TrainedPipeline train_pipeline(const ExperimentConfig& cfg, const Manifest& split_manifest,
                               const std::string& variant, const ExperimentHooks& hooks = {});

/// Splits training records into (cnn_train, calibration) by subject.
std::pair<std::vector<const ImageRecord*>, std::vector<const ImageRecord*>> calibration_split(
    const Manifest& m, double fraction, std::uint64_t seed);

/// Trains the CNN on the train split minus the calibration carve-out.
TrainResult train_detector(const ExperimentConfig& cfg, const Manifest& split_manifest, const std::string& variant,
                           const ExperimentHooks& hooks = {});

/// Fits the aggregator on the calibration carve-out (the whole train split
/// when calibration_fraction is 0).
Aggregator calibrate_detector(const ExperimentConfig& cfg, const DetectorModel& model, const Manifest& split_manifest,
                              const std::string& variant, const ExperimentHooks& hooks = {},
                              std::vector<ThresholdSweepRow>* sweep = nullptr);

EvalReport evaluate_split(const ExperimentConfig& cfg, const DetectorModel& model, const Aggregator& agg,
                          const Manifest& split_manifest, Split split, const std::string& variant,
                          const ExperimentHooks& hooks = {});

Aggregator fit_aggregator(const std::vector<CachedImage>& calibration, const ExperimentConfig& cfg,
                          std::vector<ThresholdSweepRow>* sweep = nullptr);

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {});

}  // namespace alterdetect

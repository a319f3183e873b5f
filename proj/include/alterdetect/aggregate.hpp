#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alterdetect/patchwork.hpp"

namespace alterdetect {

/// Image-level summary of patch predictions: the percentage of patches
/// predicted tampered. Normalizing by the patch count lets one threshold
/// serve images of any size.
struct ImageScore {
    std::string image_id;
    std::size_t total_patches = 0;
    std::size_t tampered_patches = 0;
    double output = 0.0;  ///< 100 * tampered / total
};

ImageScore tamper_ratio(std::span<const Label> patch_predictions, std::string image_id = {});

struct LabeledScore {
    ImageScore score;
    Label label = Label::kAuthentic;
};

// ---------------------------------------------------------------------------
// Thresholding

struct ThresholdModel {
    double tau = 4.0;
};

/// Tampered iff output > tau (strictly more tampered patches than the
/// threshold).
Label classify_by_threshold(const ImageScore& score, const ThresholdModel& model);

struct ThresholdSweepRow {
    double tau = 0.0;
    double accuracy = 0.0;
    std::size_t correct = 0;
};

struct ThresholdSearchResult {
    ThresholdModel model;
    std::vector<ThresholdSweepRow> table;
};

/// Integer grid 1..10 by default.
std::vector<double> default_threshold_grid();

/// Accuracy-maximizing tau on the grid; ties go to the smaller tau.
ThresholdSearchResult grid_search_threshold(std::span<const LabeledScore> scores,
                                            std::span<const double> grid);
ThresholdSearchResult grid_search_threshold(std::span<const LabeledScore> scores);

// ---------------------------------------------------------------------------
// RBF support vector machine over the single ratio feature. Scores are
// divided by 100 before entering the kernel exp(-gamma (a - b)^2).

struct SvmParams {
    double c = 1.0;
    double rbf_gamma = 1.0;
    /// Stopping tolerance on the maximal KKT violation.
    double tolerance = 1e-3;
    std::size_t max_iterations = 1'000'000;
};

struct SvmModel {
    std::vector<double> support;       ///< scaled feature of each support vector
    std::vector<double> dual_coef;     ///< alpha_i * y_i, |.| <= C
    double bias = 0.0;
    double rbf_gamma = 1.0;
    double c = 1.0;
    double training_accuracy = 0.0;
    /// False when the training set cannot be separated (for instance equal
    /// scores carrying both labels).
    bool separable = true;
    std::size_t iterations = 0;

    double decision(double score) const;
};

struct SvmTrainingReport {
    SvmModel model;
    /// Per training point, in solver order (sorted by score then label).
    std::vector<double> features;
    std::vector<int> signs;
    std::vector<double> alphas;
    /// max over points of the KKT violation measured on y f(x).
    double max_kkt_violation = 0.0;
};

SvmTrainingReport train_svm_report(std::span<const LabeledScore> scores, const SvmParams& params = {});
SvmModel train_svm(std::span<const LabeledScore> scores, const SvmParams& params = {});

struct SvmDecision {
    Label label = Label::kAuthentic;
    double margin = 0.0;  ///< decision function value; > 0 means tampered
};

SvmDecision svm_predict(const SvmModel& model, const ImageScore& score);
SvmDecision svm_predict(const SvmModel& model, double output);

/// Largest KKT violation of the given dual solution, in units of y f(x).
double kkt_violation(const SvmTrainingReport& report);

// ---------------------------------------------------------------------------
// Persistence and reporting

struct Aggregator {
    std::optional<ThresholdModel> threshold;
    std::optional<SvmModel> svm;
};

std::string aggregator_to_json(const Aggregator& agg);
Aggregator aggregator_from_json(const std::string& text);
void save_aggregator(const Aggregator& agg, const std::string& path);
Aggregator load_aggregator(const std::string& path);

struct ImageDecision {
    ImageScore score;
    std::optional<Label> truth;
    std::optional<Label> by_threshold;
    std::optional<Label> by_svm;
    double margin = 0.0;

    /// {"image_id","total","tampered","output","label_threshold","label_svm","margin"}
    std::string to_json_line() const;
};

ImageDecision decide(const ImageScore& score, const Aggregator& agg);

}  // namespace alterdetect

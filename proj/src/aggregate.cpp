#include "alterdetect/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace alterdetect {

ImageScore tamper_ratio(std::span<const Label> patch_predictions, std::string image_id) {
    if (patch_predictions.empty()) throw std::invalid_argument("tamper_ratio: no patch predictions");
    ImageScore s;
    s.image_id = std::move(image_id);
    s.total_patches = patch_predictions.size();
    s.tampered_patches = static_cast<std::size_t>(
        std::count(patch_predictions.begin(), patch_predictions.end(), Label::kTampered));
    s.output = 100.0 * static_cast<double>(s.tampered_patches) / static_cast<double>(s.total_patches);
    return s;
}

Label classify_by_threshold(const ImageScore& score, const ThresholdModel& model) {
    return score.output > model.tau ? Label::kTampered : Label::kAuthentic;
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid(10);
    std::iota(grid.begin(), grid.end(), 1.0);
    return grid;
}

namespace {

void require_both_classes(std::span<const LabeledScore> scores, const char* what) {
    bool authentic = false, tampered = false;
    for (const auto& s : scores) {
        authentic |= s.label == Label::kAuthentic;
        tampered |= s.label == Label::kTampered;
    }
    if (!authentic || !tampered) {
        throw std::invalid_argument(std::string(what) + ": both authentic and tampered examples are required");
    }
}

}  // namespace

ThresholdSearchResult grid_search_threshold(std::span<const LabeledScore> scores, std::span<const double> grid) {
    require_both_classes(scores, "grid_search_threshold");
    if (grid.empty()) throw std::invalid_argument("grid_search_threshold: empty grid");
    ThresholdSearchResult result;
    std::vector<double> sorted(grid.begin(), grid.end());
    std::sort(sorted.begin(), sorted.end());
    std::size_t best_correct = 0;
    bool have_best = false;
    for (double tau : sorted) {
        ThresholdModel m{tau};
        std::size_t correct = 0;
        for (const auto& s : scores) correct += classify_by_threshold(s.score, m) == s.label ? 1 : 0;
        result.table.push_back({tau, static_cast<double>(correct) / static_cast<double>(scores.size()), correct});
        if (!have_best || correct > best_correct) {
            best_correct = correct;
            result.model = m;
            have_best = true;
        }
    }
    return result;
}

ThresholdSearchResult grid_search_threshold(std::span<const LabeledScore> scores) {
    const auto grid = default_threshold_grid();
    return grid_search_threshold(scores, grid);
}

// ---------------------------------------------------------------------------
// SMO with second-order working-set selection.

namespace {

double rbf(double a, double b, double gamma) {
    const double d = a - b;
    return std::exp(-gamma * d * d);
}

struct Problem {
    std::vector<double> x;
    std::vector<int> y;  // +1 tampered, -1 authentic
};

Problem normalized_problem(std::span<const LabeledScore> scores) {
    std::vector<std::pair<double, int>> pts;
    pts.reserve(scores.size());
    for (const auto& s : scores) {
        if (!std::isfinite(s.score.output)) throw std::invalid_argument("train_svm: non-finite score");
        pts.emplace_back(s.score.output / 100.0, s.label == Label::kTampered ? 1 : -1);
    }
    std::sort(pts.begin(), pts.end());
    Problem p;
    for (const auto& [x, y] : pts) {
        p.x.push_back(x);
        p.y.push_back(y);
    }
    return p;
}

bool in_up(int y, double a, double c) { return (y > 0 && a < c) || (y < 0 && a > 0); }
bool in_low(int y, double a, double c) { return (y > 0 && a > 0) || (y < 0 && a < c); }

}  // namespace

double SvmModel::decision(double score) const {
    const double x = score / 100.0;
    double f = bias;
    for (std::size_t i = 0; i < support.size(); ++i) f += dual_coef[i] * rbf(support[i], x, rbf_gamma);
    return f;
}

SvmTrainingReport train_svm_report(std::span<const LabeledScore> scores, const SvmParams& params) {
    require_both_classes(scores, "train_svm");
    if (!(params.c > 0.0) || !(params.rbf_gamma > 0.0) || !(params.tolerance > 0.0)) {
        throw std::invalid_argument("train_svm: C, rbf_gamma and tolerance must be positive");
    }
    const Problem prob = normalized_problem(scores);
    const std::size_t n = prob.x.size();
    const double c = params.c;

    std::vector<double> q(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            q[i * n + j] = prob.y[i] * prob.y[j] * rbf(prob.x[i], prob.x[j], params.rbf_gamma);

    std::vector<double> alpha(n, 0.0);
    std::vector<double> grad(n, -1.0);  // Q alpha - e
    constexpr double kTau = 1e-12;
    std::size_t iter = 0;
    for (; iter < params.max_iterations; ++iter) {
        // i: maximal -y grad over I_up.
        double gmax = -std::numeric_limits<double>::infinity();
        std::ptrdiff_t i = -1;
        for (std::size_t t = 0; t < n; ++t) {
            if (in_up(prob.y[t], alpha[t], c) && -prob.y[t] * grad[t] > gmax) {
                gmax = -prob.y[t] * grad[t];
                i = static_cast<std::ptrdiff_t>(t);
            }
        }
        double gmin = std::numeric_limits<double>::infinity();
        std::ptrdiff_t j = -1;
        double best_obj = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < n; ++t) {
            if (!in_low(prob.y[t], alpha[t], c)) continue;
            const double v = -prob.y[t] * grad[t];
            gmin = std::min(gmin, v);
            if (i < 0) continue;
            const double b = gmax - v;
            if (b > 0) {
                const std::size_t ii = static_cast<std::size_t>(i);
                double a = q[ii * n + ii] + q[t * n + t] - 2.0 * prob.y[ii] * prob.y[t] * q[ii * n + t];
                if (a <= 0) a = kTau;
                const double obj = -(b * b) / a;
                if (obj < best_obj) {
                    best_obj = obj;
                    j = static_cast<std::ptrdiff_t>(t);
                }
            }
        }
        if (i < 0 || j < 0 || gmax - gmin < params.tolerance) break;

        const std::size_t a_i = static_cast<std::size_t>(i), a_j = static_cast<std::size_t>(j);
        const int yi = prob.y[a_i], yj = prob.y[a_j];
        double quad = q[a_i * n + a_i] + q[a_j * n + a_j] - 2.0 * yi * yj * q[a_i * n + a_j];
        if (quad <= 0) quad = kTau;
        // Step along the feasible direction (y_i, -y_j) on alpha_i, alpha_j.
        const double step = (-yi * grad[a_i] + yj * grad[a_j]) / quad;
        const double old_i = alpha[a_i], old_j = alpha[a_j];
        // alpha_i += y_i * step, alpha_j -= y_j * step, clipped to the box.
        double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
        auto bound = [&](double a, int sign) {
            // a + sign * s in [0, c]
            if (sign > 0) {
                lo = std::max(lo, -a);
                hi = std::min(hi, c - a);
            } else {
                lo = std::max(lo, a - c);
                hi = std::min(hi, a);
            }
        };
        bound(old_i, yi);
        bound(old_j, -yj);
        const double s = std::clamp(step, lo, hi);
        alpha[a_i] = std::clamp(old_i + yi * s, 0.0, c);
        alpha[a_j] = std::clamp(old_j - yj * s, 0.0, c);
        const double di = alpha[a_i] - old_i, dj = alpha[a_j] - old_j;
        for (std::size_t t = 0; t < n; ++t) grad[t] += q[t * n + a_i] * di + q[t * n + a_j] * dj;
    }

    // Bias: average over free vectors, else midpoint of the feasible range.
    double sum = 0.0;
    std::size_t free = 0;
    double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
        const double yg = prob.y[t] * grad[t];
        if (alpha[t] > 0.0 && alpha[t] < c) {
            sum += yg;
            ++free;
        } else if ((prob.y[t] > 0 && alpha[t] <= 0.0) || (prob.y[t] < 0 && alpha[t] >= c)) {
            ub = std::min(ub, yg);
        } else {
            lb = std::max(lb, yg);
        }
    }
    const double rho = free > 0 ? sum / static_cast<double>(free) : (ub + lb) / 2.0;

    SvmTrainingReport report;
    SvmModel& m = report.model;
    m.bias = -rho;
    m.rbf_gamma = params.rbf_gamma;
    m.c = c;
    m.iterations = iter;
    for (std::size_t t = 0; t < n; ++t) {
        if (alpha[t] > 0.0) {
            m.support.push_back(prob.x[t]);
            m.dual_coef.push_back(alpha[t] * prob.y[t]);
        }
    }
    std::size_t correct = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const double f = m.decision(prob.x[t] * 100.0);
        correct += ((f > 0) ? 1 : -1) == prob.y[t] ? 1 : 0;
    }
    m.training_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    m.separable = correct == n;
    report.features = prob.x;
    report.signs = prob.y;
    report.alphas = std::move(alpha);
    report.max_kkt_violation = kkt_violation(report);
    return report;
}

SvmModel train_svm(std::span<const LabeledScore> scores, const SvmParams& params) {
    return train_svm_report(scores, params).model;
}

double kkt_violation(const SvmTrainingReport& report) {
    const SvmModel& m = report.model;
    // Bound tolerance for deciding whether alpha sits at 0 or C.
    const double eps = 1e-12 * std::max(1.0, m.c);
    double worst = 0.0;
    for (std::size_t t = 0; t < report.features.size(); ++t) {
        const double yf = report.signs[t] * m.decision(report.features[t] * 100.0);
        const double a = report.alphas[t];
        double v;
        if (a <= eps) {
            v = std::max(0.0, 1.0 - yf);
        } else if (a >= m.c - eps) {
            v = std::max(0.0, yf - 1.0);
        } else {
            v = std::abs(yf - 1.0);
        }
        worst = std::max(worst, v);
    }
    return worst;
}

SvmDecision svm_predict(const SvmModel& model, double output) {
    SvmDecision d;
    d.margin = model.decision(output);
    d.label = d.margin > 0.0 ? Label::kTampered : Label::kAuthentic;
    return d;
}

SvmDecision svm_predict(const SvmModel& model, const ImageScore& score) { return svm_predict(model, score.output); }

// ---------------------------------------------------------------------------

std::string aggregator_to_json(const Aggregator& agg) {
    nlohmann::ordered_json j;
    j["format"] = "alterdetect-aggregator";
    j["version"] = 1;
    if (agg.threshold) j["threshold"] = {{"tau", agg.threshold->tau}};
    if (agg.svm) {
        const SvmModel& m = *agg.svm;
        j["svm"] = {{"support", m.support},         {"dual_coef", m.dual_coef},
                    {"bias", m.bias},               {"rbf_gamma", m.rbf_gamma},
                    {"c", m.c},                     {"training_accuracy", m.training_accuracy},
                    {"separable", m.separable},     {"iterations", m.iterations}};
    }
    return j.dump(2);
}

Aggregator aggregator_from_json(const std::string& text) {
    Aggregator agg;
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.value("format", "") != "alterdetect-aggregator" || j.value("version", 0) != 1) {
            throw std::runtime_error("not an aggregator file (format/version mismatch)");
        }
        if (j.contains("threshold")) agg.threshold = ThresholdModel{j["threshold"].at("tau").get<double>()};
        if (j.contains("svm")) {
            const auto& s = j["svm"];
            SvmModel m;
            m.support = s.at("support").get<std::vector<double>>();
            m.dual_coef = s.at("dual_coef").get<std::vector<double>>();
            m.bias = s.at("bias").get<double>();
            m.rbf_gamma = s.at("rbf_gamma").get<double>();
            m.c = s.at("c").get<double>();
            m.training_accuracy = s.value("training_accuracy", 0.0);
            m.separable = s.value("separable", true);
            m.iterations = s.value("iterations", std::size_t{0});
            if (m.support.size() != m.dual_coef.size()) throw std::runtime_error("svm support/coef length mismatch");
            agg.svm = std::move(m);
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("malformed aggregator file: ") + e.what());
    }
    return agg;
}

void save_aggregator(const Aggregator& agg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << aggregator_to_json(agg) << '\n';
}

Aggregator load_aggregator(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open aggregator file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return aggregator_from_json(ss.str());
}

std::string ImageDecision::to_json_line() const {
    nlohmann::ordered_json j;
    j["image_id"] = score.image_id;
    j["total"] = score.total_patches;
    j["tampered"] = score.tampered_patches;
    j["output"] = score.output;
    j["label_threshold"] = by_threshold ? nlohmann::json(std::string(label_name(*by_threshold))) : nlohmann::json();
    j["label_svm"] = by_svm ? nlohmann::json(std::string(label_name(*by_svm))) : nlohmann::json();
    j["margin"] = by_svm ? nlohmann::json(margin) : nlohmann::json();
    if (truth) j["truth"] = std::string(label_name(*truth));
    return j.dump();
}

ImageDecision decide(const ImageScore& score, const Aggregator& agg) {
    if (!agg.threshold && !agg.svm) throw std::invalid_argument("decide: aggregator has no fitted method");
    ImageDecision d;
    d.score = score;
    if (agg.threshold) d.by_threshold = classify_by_threshold(score, *agg.threshold);
    if (agg.svm) {
        const auto s = svm_predict(*agg.svm, score);
        d.by_svm = s.label;
        d.margin = s.margin;
    }
    return d;
}

}  // namespace alterdetect

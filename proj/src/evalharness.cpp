#include "alterdetect/evalharness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "alterdetect/random.hpp"
#include "json.hpp"

namespace alterdetect {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::size_t ConfusionMatrix::total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }

double ConfusionMatrix::accuracy() const {
    const std::size_t n = total();
    return n == 0 ? 0.0 : static_cast<double>(correct()) / static_cast<double>(n);
}

double ConfusionMatrix::balanced_accuracy() const {
    double sum = 0.0;
    int classes = 0;
    for (int t = 0; t < 2; ++t) {
        const std::size_t row = counts[t][0] + counts[t][1];
        if (row == 0) continue;
        sum += static_cast<double>(counts[t][t]) / static_cast<double>(row);
        ++classes;
    }
    return classes == 0 ? 0.0 : sum / classes;
}

double ConfusionMatrix::false_positive_rate() const {
    const std::size_t negatives = counts[0][0] + counts[0][1];
    return negatives == 0 ? 0.0 : static_cast<double>(counts[0][1]) / static_cast<double>(negatives);
}

std::array<std::array<double, 2>, 2> ConfusionMatrix::normalized() const {
    std::array<std::array<double, 2>, 2> out{};
    for (int t = 0; t < 2; ++t) {
        const std::size_t row = counts[t][0] + counts[t][1];
        if (row == 0) continue;
        for (int p = 0; p < 2; ++p) out[t][p] = static_cast<double>(counts[t][p]) / static_cast<double>(row);
    }
    return out;
}

ConfusionMatrix evaluate_patches(const DetectorModel& model, std::span<const LabeledPatch> patches,
                                 std::size_t batch_size) {
    if (patches.empty()) throw std::invalid_argument("evaluate_patches: no patches");
    const auto preds = predict_patches(model, patches, batch_size);
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < patches.size(); ++i) cm.add(patches[i].label, preds[i].label);
    return cm;
}

// ---------------------------------------------------------------------------

PatchGrid record_patches(const Manifest& m, const ImageRecord& r, std::size_t patch_size,
                         const LabelingConfig& labeling) {
    PatchGrid grid = extract_patches(load_image(m, r), patch_size, r.path);
    if (labeling.policy == LabelingPolicy::kWholeImage || r.label == Label::kAuthentic) {
        return label_patches(std::move(grid), WholeImagePolicy{r.label});
    }
    const auto mask = load_record_mask(m, r);
    if (!mask) throw std::invalid_argument(r.path + ": region labelling needs a mask for tampered images");
    return label_patches(std::move(grid), RegionMaskPolicy{&*mask, labeling.coverage_threshold});
}

std::vector<LabeledPatch> collect_patches(const Manifest& m, const std::vector<const ImageRecord*>& records,
                                          std::size_t patch_size, const LabelingConfig& labeling) {
    std::vector<LabeledPatch> out;
    for (const ImageRecord* r : records) {
        PatchGrid g = record_patches(m, *r, patch_size, labeling);
        std::move(g.patches.begin(), g.patches.end(), std::back_inserter(out));
    }
    return out;
}

std::vector<CachedImage> predict_images(const DetectorModel& model, const Manifest& m,
                                        const std::vector<const ImageRecord*>& records,
                                        const LabelingConfig& labeling) {
    std::vector<CachedImage> out;
    out.reserve(records.size());
    for (const ImageRecord* r : records) {
        const PatchGrid g = record_patches(m, *r, model.net.arch().patch_size, labeling);
        const auto preds = predict_patches(model, g.patches);
        CachedImage c;
        c.image_id = r->path;
        c.truth = r->label;
        c.probe = r->probe;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            c.patch_truth.push_back(g.patches[i].label);
            c.patch_predicted.push_back(preds[i].label);
        }
        c.score = tamper_ratio(c.patch_predicted, r->path);
        out.push_back(std::move(c));
    }
    return out;
}

EvalReport evaluate_images(const std::vector<CachedImage>& images, const Aggregator& agg, Aggregation aggregation) {
    const bool want_thr = aggregation != Aggregation::kSvm;
    const bool want_svm = aggregation != Aggregation::kThreshold;
    if (want_thr && !agg.threshold) throw std::invalid_argument("evaluate_images: aggregator has no fitted threshold");
    if (want_svm && !agg.svm) throw std::invalid_argument("evaluate_images: aggregator has no fitted SVM");
    if (images.empty()) throw std::invalid_argument("evaluate_images: no images");
    Aggregator used;
    if (want_thr) used.threshold = agg.threshold;
    if (want_svm) used.svm = agg.svm;

    EvalReport rep;
    if (want_thr) rep.threshold.emplace();
    if (want_svm) rep.svm.emplace();
    if (agg.threshold) rep.tau = agg.threshold->tau;
    std::map<int, std::pair<ConfusionMatrix, ConfusionMatrix>> probes;
    for (const auto& img : images) {
        for (std::size_t i = 0; i < img.patch_truth.size(); ++i) rep.patch_confusion.add(img.patch_truth[i], img.patch_predicted[i]);
        ImageDecision d = decide(img.score, used);
        d.truth = img.truth;
        if (d.by_threshold) rep.threshold->add(img.truth, *d.by_threshold);
        if (d.by_svm) rep.svm->add(img.truth, *d.by_svm);
        if (img.probe) {
            auto& [thr, svm] = probes[*img.probe];
            if (d.by_threshold) thr.add(img.truth, *d.by_threshold);
            if (d.by_svm) svm.add(img.truth, *d.by_svm);
        }
        rep.decisions.push_back(std::move(d));
        rep.decision_probes.push_back(img.probe);
    }
    for (const auto& [probe, pair] : probes) {
        if (want_thr) rep.per_probe.push_back({probe, "threshold", pair.first});
        if (want_svm) rep.per_probe.push_back({probe, "svm", pair.second});
    }
    return rep;
}

EvalReport evaluate_images(const DetectorModel& model, const Manifest& m,
                           const std::vector<const ImageRecord*>& records, const LabelingConfig& labeling,
                           const Aggregator& agg, Aggregation aggregation) {
    return evaluate_images(predict_images(model, m, records, labeling), agg, aggregation);
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

const char* kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::kAblation: return "ablation";
        case ExperimentKind::kCompression: return "compression";
        case ExperimentKind::kStandard: break;
    }
    return "standard";
}

const char* aggregation_name(Aggregation a) {
    switch (a) {
        case Aggregation::kThreshold: return "threshold";
        case Aggregation::kSvm: return "svm";
        case Aggregation::kBoth: break;
    }
    return "both";
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
    std::string channels;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        if (i) channels += ',';
        channels += std::to_string(arch.conv_channels[i]);
    }
    return {
        {"kind", kind_name(kind)},
        {"manifest", manifest},
        {"work_dir", work_dir},
        {"protocol", std::to_string(protocol)},
        {"seed", std::to_string(seed)},
        {"val_fraction", fmt_double(val_fraction)},
        {"calibration_fraction", fmt_double(calibration_fraction)},
        {"labeling", labeling.policy == LabelingPolicy::kWholeImage ? "whole" : "region"},
        {"coverage_threshold", fmt_double(labeling.coverage_threshold)},
        {"patch_size", std::to_string(arch.patch_size)},
        {"channels", channels},
        {"residual_depth", std::to_string(arch.residual_block_depth)},
        {"fc_width", std::to_string(arch.fc_width)},
        {"residual", arch.enable_residual ? "true" : "false"},
        {"shortcut_pooling", arch.shortcut_pooling == ShortcutPooling::kAfterBlock ? "after" : "before"},
        {"learning_rate", fmt_double(train.learning_rate)},
        {"batch_size", std::to_string(train.batch_size)},
        {"epochs", std::to_string(train.epochs)},
        {"gamma", fmt_double(train.loss.gamma)},
        {"alpha", fmt_double(train.loss.alpha[0]) + "," + fmt_double(train.loss.alpha[1])},
        {"label_convention", train.loss.label_convention == nn::LabelConvention::kAsPublished ? "published" : "conventional"},
        {"lambda_l1", fmt_double(train.lambda_l1)},
        {"l1_all_params", train.l1_all_params ? "true" : "false"},
        {"aggregation", aggregation_name(aggregation)},
        {"svm_c", fmt_double(svm.c)},
        {"svm_gamma", fmt_double(svm.rbf_gamma)},
        {"svm_tolerance", fmt_double(svm.tolerance)},
        {"threshold", threshold ? fmt_double(*threshold) : "grid"},
        {"jpeg_quality", std::to_string(jpeg_quality)},
        {"compress_retrain", compress_retrain ? "true" : "false"},
        {"synth_subjects", std::to_string(synth_subjects)},
        {"synth_height", std::to_string(synth_height)},
        {"synth_width", std::to_string(synth_width)},
        {"synth_probes", std::to_string(synth_probes)},
        {"synth_radius", std::to_string(synth_alter.radius)},
        {"synth_region_fraction", fmt_double(synth_alter.region_fraction)},
        {"synth_amplitude", fmt_double(synth_alter.amplitude)},
        {"synth_seed", std::to_string(synth_alter.seed)},
    };
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, v] : ExperimentConfig{}.entries()) keys.push_back(k);
    return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    auto size = [&] { return static_cast<std::size_t>(parse_uint(key, v)); };
    if (key == "kind") {
        if (v == "standard") kind = ExperimentKind::kStandard;
        else if (v == "ablation") kind = ExperimentKind::kAblation;
        else if (v == "compression") kind = ExperimentKind::kCompression;
        else throw ConfigError("config key 'kind': expected standard, ablation or compression, got '" + v + "'");
    } else if (key == "manifest") {
        manifest = v;
    } else if (key == "work_dir") {
        work_dir = v;
    } else if (key == "protocol") {
        protocol = static_cast<int>(parse_uint(key, v));
    } else if (key == "seed") {
        seed = parse_uint(key, v);
    } else if (key == "val_fraction") {
        val_fraction = parse_double(key, v);
    } else if (key == "calibration_fraction") {
        calibration_fraction = parse_double(key, v);
    } else if (key == "labeling") {
        if (v == "whole") labeling.policy = LabelingPolicy::kWholeImage;
        else if (v == "region") labeling.policy = LabelingPolicy::kRegionMask;
        else throw ConfigError("config key 'labeling': expected whole or region, got '" + v + "'");
    } else if (key == "coverage_threshold") {
        labeling.coverage_threshold = parse_double(key, v);
    } else if (key == "patch_size") {
        arch.patch_size = size();
    } else if (key == "channels") {
        const auto parts = split_commas(v);
        if (parts.size() != 6) throw ConfigError("config key 'channels': expected 6 comma-separated widths");
        for (std::size_t i = 0; i < 6; ++i) arch.conv_channels[i] = static_cast<std::size_t>(parse_uint(key, trim(parts[i])));
    } else if (key == "residual_depth") {
        arch.residual_block_depth = size();
    } else if (key == "fc_width") {
        arch.fc_width = size();
    } else if (key == "residual") {
        arch.enable_residual = parse_bool(key, v);
    } else if (key == "shortcut_pooling") {
        if (v == "after") arch.shortcut_pooling = ShortcutPooling::kAfterBlock;
        else if (v == "before") arch.shortcut_pooling = ShortcutPooling::kBeforeBlock;
        else throw ConfigError("config key 'shortcut_pooling': expected after or before, got '" + v + "'");
    } else if (key == "learning_rate") {
        train.learning_rate = parse_double(key, v);
    } else if (key == "batch_size") {
        train.batch_size = size();
    } else if (key == "epochs") {
        train.epochs = size();
    } else if (key == "gamma") {
        train.loss.gamma = parse_double(key, v);
    } else if (key == "alpha") {
        const auto parts = split_commas(v);
        if (parts.size() != 2) throw ConfigError("config key 'alpha': expected two comma-separated weights");
        train.loss.alpha = {parse_double(key, trim(parts[0])), parse_double(key, trim(parts[1]))};
    } else if (key == "label_convention") {
        if (v == "published") train.loss.label_convention = nn::LabelConvention::kAsPublished;
        else if (v == "conventional") train.loss.label_convention = nn::LabelConvention::kConventional;
        else throw ConfigError("config key 'label_convention': expected published or conventional, got '" + v + "'");
    } else if (key == "lambda_l1") {
        train.lambda_l1 = parse_double(key, v);
    } else if (key == "l1_all_params") {
        train.l1_all_params = parse_bool(key, v);
    } else if (key == "aggregation") {
        if (v == "both") aggregation = Aggregation::kBoth;
        else if (v == "threshold") aggregation = Aggregation::kThreshold;
        else if (v == "svm") aggregation = Aggregation::kSvm;
        else throw ConfigError("config key 'aggregation': expected both, threshold or svm, got '" + v + "'");
    } else if (key == "svm_c") {
        svm.c = parse_double(key, v);
    } else if (key == "svm_gamma") {
        svm.rbf_gamma = parse_double(key, v);
    } else if (key == "svm_tolerance") {
        svm.tolerance = parse_double(key, v);
    } else if (key == "threshold") {
        if (v == "grid") threshold.reset();
        else threshold = parse_double(key, v);
    } else if (key == "jpeg_quality") {
        jpeg_quality = static_cast<int>(parse_uint(key, v));
    } else if (key == "compress_retrain") {
        compress_retrain = parse_bool(key, v);
    } else if (key == "synth_subjects") {
        synth_subjects = size();
    } else if (key == "synth_height") {
        synth_height = size();
    } else if (key == "synth_width") {
        synth_width = size();
    } else if (key == "synth_probes") {
        synth_probes = static_cast<int>(parse_uint(key, v));
    } else if (key == "synth_radius") {
        synth_alter.radius = static_cast<int>(parse_uint(key, v));
    } else if (key == "synth_region_fraction") {
        synth_alter.region_fraction = parse_double(key, v);
    } else if (key == "synth_amplitude") {
        synth_alter.amplitude = parse_double(key, v);
    } else if (key == "synth_seed") {
        synth_alter.seed = parse_uint(key, v);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

std::string ExperimentConfig::fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : entries()) {
        for (char c : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void ExperimentConfig::validate() const {
    try {
        arch.validate();
        train.validate();
        synth_alter.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (protocol < 0 || protocol > 3) throw ConfigError("protocol must be 0 (use manifest splits), 1, 2 or 3");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
    if (!(calibration_fraction >= 0.0 && calibration_fraction < 1.0)) {
        throw ConfigError("calibration_fraction must be in [0, 1)");
    }
    if (!(labeling.coverage_threshold >= 0.0 && labeling.coverage_threshold <= 1.0)) {
        throw ConfigError("coverage_threshold must be in [0, 1]");
    }
    if (!(svm.c > 0.0 && svm.rbf_gamma > 0.0 && svm.tolerance > 0.0)) {
        throw ConfigError("svm_c, svm_gamma and svm_tolerance must be positive");
    }
    if (threshold && !(*threshold >= 0.0 && *threshold <= 100.0)) throw ConfigError("threshold must be in [0, 100]");
    if (jpeg_quality < 1 || jpeg_quality > 100) throw ConfigError("jpeg_quality must be in 1..100");
    if (synth_probes < 0 || synth_probes > 7) throw ConfigError("synth_probes must be in 0..7");
    if (synth_subjects == 0) throw ConfigError("synth_subjects must be positive");
    if (synth_height < arch.patch_size || synth_width < arch.patch_size) {
        throw ConfigError("synthetic images must be at least one patch in each dimension");
    }
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::stringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
    }
    return out;
}

void apply_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        for (const auto& [k, v] : parse_config_text(ss.str())) cfg.set(k, v);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string format_config(const ExperimentConfig& cfg) {
    std::string out = "# alterdetect config, fingerprint " + cfg.fingerprint() + "\n";
    for (const auto& [k, v] : cfg.entries()) out += k + " = " + v + "\n";
    return out;
}

CorpusConfig corpus_config(const ExperimentConfig& cfg) {
    CorpusConfig cc;
    cc.subjects = cfg.synth_subjects;
    cc.height = cfg.synth_height;
    cc.width = cfg.synth_width;
    cc.probes = cfg.synth_probes;
    cc.alter = cfg.synth_alter;
    cc.seed = cfg.synth_alter.seed;
    return cc;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

void log(const ExperimentHooks& hooks, const std::string& msg) {
    if (hooks.on_log) hooks.on_log(msg);
}

std::vector<const ImageRecord*> records_of(const Manifest& m, Split s) { return m.with_split(s); }

}  // namespace

Manifest prepare_manifest(const ExperimentConfig& cfg, const ExperimentHooks& hooks) {
    Manifest m = in_stage("prepare", [&] {
        if (!cfg.manifest.empty()) return read_manifest(cfg.manifest);
        const CorpusConfig cc = corpus_config(cfg);
        const std::string dir = (fs::path(cfg.work_dir) / "synth").string();
        log(hooks, "synthesizing " + std::to_string(2 * cc.subjects) + " images under " + dir);
        return generate_corpus(dir, cc);
    });
    if (cfg.protocol == 0) {
        if (m.with_split(Split::kTrain).empty() || m.with_split(Split::kTest).empty()) {
            throw StageError("split", "protocol 0 uses the manifest's splits, but train or test is empty");
        }
        return m;
    }
    return in_stage("split", [&] {
        return split_protocol(std::move(m), {cfg.protocol, mix_seed(cfg.seed, 3), cfg.val_fraction});
    });
}

std::pair<std::vector<const ImageRecord*>, std::vector<const ImageRecord*>> calibration_split(const Manifest& m,
                                                                                             double fraction,
                                                                                             std::uint64_t seed) {
    const auto train = m.with_split(Split::kTrain);
    if (fraction <= 0.0) return {train, train};
    // Units are subjects (or single images); they are grouped by which
    // labels they contain so the carve-out keeps both classes.
    std::map<std::string, std::vector<const ImageRecord*>> units;
    for (const ImageRecord* r : train) units[r->subject.value_or(r->path)].push_back(r);
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& [key, recs] : units) {
        std::string sig = "..";
        for (const ImageRecord* r : recs) sig[label_index(r->label)] = 'x';
        groups[sig].push_back(key);
    }
    Rng rng(seed);
    std::set<std::string> calib;
    for (auto& [sig, keys] : groups) {
        rng.shuffle(keys);
        std::size_t n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(keys.size())));
        if (n == 0 && keys.size() >= 2) n = 1;
        if (n >= keys.size() && groups.size() == 1) n = keys.size() - 1;
        for (std::size_t i = 0; i < n; ++i) calib.insert(keys[i]);
    }
    std::pair<std::vector<const ImageRecord*>, std::vector<const ImageRecord*>> out;
    for (const ImageRecord* r : train) (calib.count(r->subject.value_or(r->path)) ? out.second : out.first).push_back(r);
    return out;
}

Aggregator fit_aggregator(const std::vector<CachedImage>& calibration, const ExperimentConfig& cfg,
                          std::vector<ThresholdSweepRow>* sweep) {
    std::vector<LabeledScore> scores;
    for (const auto& c : calibration) scores.push_back({c.score, c.truth});
    Aggregator agg;
    if (cfg.aggregation != Aggregation::kSvm) {
        if (cfg.threshold) {
            agg.threshold = ThresholdModel{*cfg.threshold};
        } else {
            auto res = grid_search_threshold(scores);
            agg.threshold = res.model;
            if (sweep) *sweep = std::move(res.table);
        }
    }
    if (cfg.aggregation != Aggregation::kThreshold) agg.svm = train_svm(scores, cfg.svm);
    return agg;
}

TrainResult train_detector(const ExperimentConfig& cfg, const Manifest& m, const std::string& variant,
                           const ExperimentHooks& hooks) {
    return in_stage("train", [&] {
        const auto cnn_train = calibration_split(m, cfg.calibration_fraction, mix_seed(cfg.seed, 4)).first;
        if (cnn_train.empty()) throw std::invalid_argument("no training images (the train split is empty)");
        const auto patches = collect_patches(m, cnn_train, cfg.arch.patch_size, cfg.labeling);
        const auto val = collect_patches(m, records_of(m, Split::kVal), cfg.arch.patch_size, cfg.labeling);
        log(hooks, variant + ": training on " + std::to_string(patches.size()) + " patches from " +
                       std::to_string(cnn_train.size()) + " images, " + std::to_string(val.size()) +
                       " validation patches");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.seed, 2);
        TrainOptions opt;
        opt.validation = val;
        opt.on_epoch = [&](const EpochRecord& r) {
            if (hooks.on_epoch) hooks.on_epoch(variant, r);
        };
        opt.on_warning = [&](const std::string& w) { log(hooks, variant + ": warning: " + w); };
        return train(build_model(cfg.arch, mix_seed(cfg.seed, 1)), patches, tc, opt);
    });
}

Aggregator calibrate_detector(const ExperimentConfig& cfg, const DetectorModel& model, const Manifest& m,
                              const std::string& variant, const ExperimentHooks& hooks,
                              std::vector<ThresholdSweepRow>* sweep) {
    return in_stage("calibrate", [&] {
        const auto calibration = calibration_split(m, cfg.calibration_fraction, mix_seed(cfg.seed, 4)).second;
        if (calibration.empty()) throw std::invalid_argument("no calibration images (the train split is empty)");
        log(hooks, variant + ": calibrating aggregator on " + std::to_string(calibration.size()) + " images");
        return fit_aggregator(predict_images(model, m, calibration, cfg.labeling), cfg, sweep);
    });
}

TrainedPipeline train_pipeline(const ExperimentConfig& cfg, const Manifest& m, const std::string& variant,
                               const ExperimentHooks& hooks) {
    TrainedPipeline out;
    TrainResult tr = train_detector(cfg, m, variant, hooks);
    out.model = std::move(tr.model);
    out.trace = std::move(tr.trace);
    out.aggregator = calibrate_detector(cfg, out.model, m, variant, hooks, &out.threshold_sweep);
    return out;
}

EvalReport evaluate_split(const ExperimentConfig& cfg, const DetectorModel& model, const Aggregator& agg,
                          const Manifest& m, Split split, const std::string& variant, const ExperimentHooks& hooks) {
    return in_stage("evaluate", [&] {
        const auto records = records_of(m, split);
        if (records.empty()) throw std::invalid_argument("the " + std::string(split_name(split)) + " split is empty");
        log(hooks, variant + ": evaluating " + std::to_string(records.size()) + " " + std::string(split_name(split)) +
                       " images");
        EvalReport rep = evaluate_images(predict_images(model, m, records, cfg.labeling), agg, cfg.aggregation);
        rep.variant = variant;
        rep.parameter_count = model.net.parameter_count();
        return rep;
    });
}

namespace {

EvalReport evaluate_pipeline(const ExperimentConfig& cfg, const TrainedPipeline& tp, const Manifest& m,
                             const std::string& variant, const ExperimentHooks& hooks) {
    EvalReport rep = evaluate_split(cfg, tp.model, tp.aggregator, m, Split::kTest, variant, hooks);
    rep.trace = tp.trace;
    rep.threshold_sweep = tp.threshold_sweep;
    return rep;
}

EvalReport run_single(const ExperimentConfig& cfg, const Manifest& m, const std::string& variant,
                      const ExperimentHooks& hooks) {
    const TrainedPipeline tp = train_pipeline(cfg, m, variant, hooks);
    return evaluate_pipeline(cfg, tp, m, variant, hooks);
}

// Protocol 2 trains one model per probe and merges the per-probe results.
std::vector<EvalReport> run_per_probe(const ExperimentConfig& cfg, const Manifest& m, const std::string& variant,
                                      const ExperimentHooks& hooks) {
    std::set<int> probes;
    for (const auto& r : m.records) probes.insert(*r.probe);
    std::vector<EvalReport> reports;
    EvalReport merged;
    merged.variant = variant;
    for (int p : probes) {
        Manifest sub;
        sub.base_dir = m.base_dir;
        for (const auto& r : m.records)
            if (*r.probe == p) sub.records.push_back(r);
        EvalReport rep = run_single(cfg, sub, variant + "/probe-" + std::to_string(p), hooks);
        auto merge = [](std::optional<ConfusionMatrix>& into, const std::optional<ConfusionMatrix>& from) {
            if (!from) return;
            if (!into) into.emplace();
            for (int t = 0; t < 2; ++t)
                for (int q = 0; q < 2; ++q) into->counts[t][q] += from->counts[t][q];
        };
        std::optional<ConfusionMatrix> pc = merged.patch_confusion;
        merge(pc, rep.patch_confusion);
        merged.patch_confusion = *pc;
        merge(merged.threshold, rep.threshold);
        merge(merged.svm, rep.svm);
        merged.per_probe.insert(merged.per_probe.end(), rep.per_probe.begin(), rep.per_probe.end());
        merged.parameter_count = rep.parameter_count;
        reports.push_back(std::move(rep));
    }
    reports.push_back(std::move(merged));
    return reports;
}

std::vector<EvalReport> run_protocol(const ExperimentConfig& cfg, const Manifest& m, const std::string& variant,
                                     const ExperimentHooks& hooks) {
    if (cfg.protocol == 2) return run_per_probe(cfg, m, variant, hooks);
    return {run_single(cfg, m, variant, hooks)};
}

Comparison compare(const std::string& kind, const EvalReport& a, const EvalReport& b) {
    Comparison c;
    c.kind = kind;
    c.first = a.variant;
    c.second = b.variant;
    c.patch_accuracy_first = a.patch_confusion.accuracy();
    c.patch_accuracy_second = b.patch_confusion.accuracy();
    if (a.threshold) c.threshold_first = a.threshold->accuracy();
    if (b.threshold) c.threshold_second = b.threshold->accuracy();
    if (a.svm) c.svm_first = a.svm->accuracy();
    if (b.svm) c.svm_second = b.svm->accuracy();
    c.parameter_delta = static_cast<long long>(a.parameter_count) - static_cast<long long>(b.parameter_count);
    return c;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks) {
    in_stage("config", [&] {
        cfg.validate();
        if (cfg.protocol >= 2 && cfg.manifest.empty() && cfg.synth_probes == 0) {
            throw ConfigError("protocols 2 and 3 need probe ids; set synth_probes or use a probe manifest");
        }
        return 0;
    });
    ExperimentResult result;
    result.fingerprint = cfg.fingerprint();
    result.config = cfg.entries();
    const Manifest m = prepare_manifest(cfg, hooks);

    switch (cfg.kind) {
        case ExperimentKind::kStandard: {
            result.reports = run_protocol(cfg, m, cfg.arch.enable_residual ? "residual" : "no-residual", hooks);
            break;
        }
        case ExperimentKind::kAblation: {
            ExperimentConfig with = cfg, without = cfg;
            with.arch.enable_residual = true;
            without.arch.enable_residual = false;
            auto a = run_protocol(with, m, "residual", hooks);
            auto b = run_protocol(without, m, "no-residual", hooks);
            result.comparison = compare("ablation", a.back(), b.back());
            result.reports = std::move(a);
            result.reports.insert(result.reports.end(), b.begin(), b.end());
            break;
        }
        case ExperimentKind::kCompression: {
            const std::string qname = "jpeg-q" + std::to_string(cfg.jpeg_quality);
            const Manifest jpeg = in_stage("compress", [&] {
                const std::string dir = (fs::path(cfg.work_dir) / qname).string();
                log(hooks, "recompressing " + std::to_string(m.records.size()) + " images to " + dir);
                return recompress_manifest(m, dir, cfg.jpeg_quality);
            });
            if (cfg.protocol == 2) throw StageError("config", "the compression experiment supports protocols 0, 1 and 3");
            const TrainedPipeline base = train_pipeline(cfg, m, "png", hooks);
            EvalReport png_rep = evaluate_pipeline(cfg, base, m, "png", hooks);
            EvalReport jpg_rep = cfg.compress_retrain ? run_single(cfg, jpeg, qname, hooks)
                                                      : evaluate_pipeline(cfg, base, jpeg, qname, hooks);
            result.comparison = compare("compression", png_rep, jpg_rep);
            result.reports = {std::move(png_rep), std::move(jpg_rep)};
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Output

namespace {

ojson matrix_json(const ConfusionMatrix& cm) {
    ojson j;
    j["counts"] = {{cm.counts[0][0], cm.counts[0][1]}, {cm.counts[1][0], cm.counts[1][1]}};
    const auto n = cm.normalized();
    j["normalized"] = {{n[0][0], n[0][1]}, {n[1][0], n[1][1]}};
    return j;
}

ojson method_json(const std::string& variant, const char* method, const ConfusionMatrix& cm) {
    ojson j;
    j["record"] = "image_accuracy";
    j["variant"] = variant;
    j["method"] = method;
    j["accuracy"] = cm.accuracy();
    j["balanced_accuracy"] = cm.balanced_accuracy();
    j["false_positive_rate"] = cm.false_positive_rate();
    j["correct"] = cm.correct();
    j["total"] = cm.total();
    j["confusion"] = matrix_json(cm);
    return j;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * v);
    return buf;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string ExperimentResult::to_jsonl() const {
    std::ostringstream out;
    {
        ojson j;
        j["record"] = "config";
        j["fingerprint"] = fingerprint;
        ojson c = ojson::object();
        for (const auto& [k, v] : config) c[k] = v;
        j["config"] = c;
        out << j.dump() << '\n';
    }
    for (const auto& rep : reports) {
        for (const auto& e : rep.trace) {
            ojson j = ojson::parse(e.to_json_line());
            j["record"] = "epoch";
            j["variant"] = rep.variant;
            out << j.dump() << '\n';
        }
        for (const auto& row : rep.threshold_sweep) {
            out << ojson{{"record", "threshold_sweep"}, {"variant", rep.variant}, {"tau", row.tau},
                         {"accuracy", row.accuracy}, {"correct", row.correct}}
                       .dump()
                << '\n';
        }
        {
            ojson j;
            j["record"] = "patch_confusion";
            j["variant"] = rep.variant;
            j["parameters"] = rep.parameter_count;
            j["accuracy"] = rep.patch_confusion.accuracy();
            j["balanced_accuracy"] = rep.patch_confusion.balanced_accuracy();
            const auto m = matrix_json(rep.patch_confusion);
            j["counts"] = m["counts"];
            j["normalized"] = m["normalized"];
            out << j.dump() << '\n';
        }
        if (rep.threshold) {
            ojson j = method_json(rep.variant, "threshold", *rep.threshold);
            if (rep.tau) j["tau"] = *rep.tau;
            out << j.dump() << '\n';
        }
        if (rep.svm) out << method_json(rep.variant, "svm", *rep.svm).dump() << '\n';
        for (const auto& row : rep.per_probe) {
            const auto n = row.confusion.normalized();
            out << ojson{{"record", "probe"},
                         {"variant", rep.variant},
                         {"probe", row.probe},
                         {"method", row.method},
                         {"accuracy", row.confusion.accuracy()},
                         {"authentic_accuracy", n[0][0]},
                         {"tampered_accuracy", n[1][1]},
                         {"images", row.confusion.total()}}
                       .dump()
                << '\n';
        }
        for (std::size_t i = 0; i < rep.decisions.size(); ++i) {
            ojson j;
            j["record"] = "decision";
            j["variant"] = rep.variant;
            const ojson d = ojson::parse(rep.decisions[i].to_json_line());
            for (const auto& [k, v] : d.items()) j[k] = v;
            if (rep.decision_probes[i]) j["probe"] = *rep.decision_probes[i];
            out << j.dump() << '\n';
        }
    }
    if (comparison) {
        const Comparison& c = *comparison;
        ojson j;
        j["record"] = "comparison";
        j["kind"] = c.kind;
        j["first"] = c.first;
        j["second"] = c.second;
        j["patch_accuracy"] = {c.patch_accuracy_first, c.patch_accuracy_second};
        j["threshold_accuracy"] = {c.threshold_first ? ojson(*c.threshold_first) : ojson(),
                                   c.threshold_second ? ojson(*c.threshold_second) : ojson()};
        j["svm_accuracy"] = {c.svm_first ? ojson(*c.svm_first) : ojson(), c.svm_second ? ojson(*c.svm_second) : ojson()};
        j["parameter_delta"] = c.parameter_delta;
        out << j.dump() << '\n';
    }
    return out.str();
}

std::string ExperimentResult::to_text() const {
    std::ostringstream out;
    out << "alterdetect report, config fingerprint " << fingerprint << "\n";
    for (const auto& rep : reports) {
        out << "\n== " << rep.variant << " (" << rep.parameter_count << " parameters)\n";
        const auto n = rep.patch_confusion.normalized();
        out << "patch confusion, rows = true label      pred authentic  pred tampered\n";
        out << "  authentic                              " << num(n[0][0]) << "          " << num(n[0][1]) << "\n";
        out << "  tampered                               " << num(n[1][0]) << "          " << num(n[1][1]) << "\n";
        out << "  patch accuracy " << pct(rep.patch_confusion.accuracy()) << " over " << rep.patch_confusion.total()
            << " patches\n";
        out << "image accuracy   method      overall  balanced       FPR  images\n";
        auto line = [&](const char* name, const ConfusionMatrix& cm) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "                 %-10s %s  %s  %s  %6zu\n", name, pct(cm.accuracy()).c_str(),
                          pct(cm.balanced_accuracy()).c_str(), pct(cm.false_positive_rate()).c_str(), cm.total());
            out << buf;
        };
        if (rep.threshold) line("threshold", *rep.threshold);
        if (rep.svm) line("svm", *rep.svm);
        if (rep.tau) out << "  threshold tau = " << fmt_double(*rep.tau) << "\n";
        if (!rep.per_probe.empty()) {
            out << "per probe        probe  method      overall  authentic  tampered  images\n";
            for (const auto& row : rep.per_probe) {
                const auto pn = row.confusion.normalized();
                char buf[160];
                std::snprintf(buf, sizeof buf, "                 %5d  %-10s %s   %s  %s  %6zu\n", row.probe,
                              row.method.c_str(), pct(row.confusion.accuracy()).c_str(), pct(pn[0][0]).c_str(),
                              pct(pn[1][1]).c_str(), row.confusion.total());
                out << buf;
            }
        }
    }
    if (comparison) {
        const Comparison& c = *comparison;
        auto opt = [](const std::optional<double>& v) { return v ? pct(*v) : std::string("      -"); };
        if (c.kind == "compression") {
            out << "\n== compression (rows mirror the format comparison table)\n";
            out << "  Compression        SVM  Thresholding    Patch\n";
            out << "  " << std::left;
            char buf[160];
            std::snprintf(buf, sizeof buf, "  %-12s %s       %s  %s\n", c.first.c_str(), opt(c.svm_first).c_str(),
                          opt(c.threshold_first).c_str(), pct(c.patch_accuracy_first).c_str());
            out << buf;
            std::snprintf(buf, sizeof buf, "  %-12s %s       %s  %s\n", c.second.c_str(), opt(c.svm_second).c_str(),
                          opt(c.threshold_second).c_str(), pct(c.patch_accuracy_second).c_str());
            out << buf;
        } else {
            out << "\n== ablation: " << c.first << " vs " << c.second << "\n";
            out << "  patch accuracy      " << pct(c.patch_accuracy_first) << "  " << pct(c.patch_accuracy_second) << "\n";
            out << "  threshold accuracy  " << opt(c.threshold_first) << "  " << opt(c.threshold_second) << "\n";
            out << "  svm accuracy        " << opt(c.svm_first) << "  " << opt(c.svm_second) << "\n";
            out << "  parameter delta     " << c.parameter_delta << "\n";
        }
        const double gap = c.patch_accuracy_first - c.patch_accuracy_second;
        out << "  patch accuracy gap (first - second): " << (gap >= 0 ? "+" : "") << num(100.0 * gap)
            << " points\n";
    }
    return out.str();
}

}  // namespace alterdetect

#include "alterdetect/cli.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "alterdetect/evalharness.hpp"
#include "alterdetect/random.hpp"
#include "json.hpp"

namespace alterdetect {

namespace {

using ojson = nlohmann::ordered_json;

struct Invocation {
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> flags;
    std::string out;
    std::string checkpoint;
    std::string aggregator;
    std::string svm_model;
    std::string jsonl;
    std::string trace;
    std::string eval_split;
    std::string grid_split;
    std::string grid;
    std::vector<std::string> images;
    bool quiet = false;
};

void map_option(CLI::App* sub, Invocation& inv, const std::string& flag, const std::string& key,
                const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&inv, key](const std::string& v) { inv.flags.emplace_back(key, v); }, help);
}

void add_common(CLI::App* sub, Invocation& inv) {
    sub->add_option("--config", inv.config_file, "key = value config file; flags override its values");
    sub->add_option("--set", inv.sets, "extra key=value override (repeatable)");
    map_option(sub, inv, "--seed", "seed", "experiment seed");
    map_option(sub, inv, "--work-dir", "work_dir", "directory for generated data");
    sub->add_flag("--quiet,-q", inv.quiet, "suppress progress messages");
}

void add_data(CLI::App* sub, Invocation& inv) {
    map_option(sub, inv, "--manifest", "manifest", "image manifest (a synthetic corpus is generated when omitted)");
    map_option(sub, inv, "--protocol", "protocol", "0 (manifest splits), 1, 2 or 3");
    map_option(sub, inv, "--labeling", "labeling", "patch labels: whole or region");
    map_option(sub, inv, "--coverage-threshold", "coverage_threshold", "tampered fraction a patch needs");
    map_option(sub, inv, "--val-fraction", "val_fraction", "share of training subjects used for validation");
    map_option(sub, inv, "--calibration-fraction", "calibration_fraction",
               "share of training subjects held out to fit the aggregators");
}

void add_arch(CLI::App* sub, Invocation& inv) {
    sub->add_option_function<std::string>(
           "--patch-size", [&inv](const std::string& v) { inv.flags.emplace_back("patch_size", v); },
           "patch side in pixels")
        ->check(CLI::IsMember({"64", "128"}));
    sub->add_flag_callback(
        "--no-residual", [&inv] { inv.flags.emplace_back("residual", "false"); }, "drop the residual shortcut");
    map_option(sub, inv, "--channels", "channels", "six comma-separated conv widths");
    map_option(sub, inv, "--residual-depth", "residual_depth", "conv units inside the residual block");
    map_option(sub, inv, "--fc-width", "fc_width", "hidden fully connected width");
}

void add_training(CLI::App* sub, Invocation& inv) {
    map_option(sub, inv, "--epochs", "epochs", "epoch budget");
    map_option(sub, inv, "--lr", "learning_rate", "SGD learning rate");
    map_option(sub, inv, "--batch-size", "batch_size", "mini-batch size");
    map_option(sub, inv, "--gamma", "gamma", "focal loss focusing parameter");
    map_option(sub, inv, "--lambda-l1", "lambda_l1", "L1 penalty weight");
}

void add_aggregation(CLI::App* sub, Invocation& inv) {
    map_option(sub, inv, "--aggregation", "aggregation", "threshold, svm or both");
    map_option(sub, inv, "--threshold", "threshold", "fixed threshold on the tampered percentage");
    map_option(sub, inv, "--svm-c", "svm_c", "SVM box constraint");
    map_option(sub, inv, "--svm-gamma", "svm_gamma", "RBF kernel width");
}

void add_synth(CLI::App* sub, Invocation& inv, const std::string& count_flag) {
    map_option(sub, inv, count_flag, "synth_subjects", "synthetic subjects (one authentic + one altered image each)");
    map_option(sub, inv, "--height", "synth_height", "synthetic image height");
    map_option(sub, inv, "--width", "synth_width", "synthetic image width");
    map_option(sub, inv, "--probes", "synth_probes", "spread subjects over this many probes (0 = flat)");
    map_option(sub, inv, "--radius", "synth_radius", "smoothing radius of the synthetic retouch");
    map_option(sub, inv, "--region-fraction", "synth_region_fraction", "retouched share of each altered image");
    map_option(sub, inv, "--amplitude", "synth_amplitude", "texture amplitude of the synthetic retouch");
}

void add_aggregator_inputs(CLI::App* sub, Invocation& inv) {
    sub->add_option("--aggregator", inv.aggregator, "aggregator written by calibrate");
    sub->add_option("--svm-model", inv.svm_model, "aggregator file whose SVM replaces the calibrated one");
}

struct Context {
    Invocation inv;
    ExperimentConfig cfg;
    std::set<std::string> explicit_keys;
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;

    void build() {
        if (!inv.config_file.empty()) {
            apply_config_file(cfg, inv.config_file);
            std::ifstream in(inv.config_file);
            std::stringstream ss;
            ss << in.rdbuf();
            for (const auto& [k, v] : parse_config_text(ss.str())) explicit_keys.insert(k);
        }
        for (const auto& s : inv.sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            cfg.set(s.substr(0, eq), s.substr(eq + 1));
            explicit_keys.insert(s.substr(0, eq));
        }
        for (const auto& [k, v] : inv.flags) {
            cfg.set(k, v);
            explicit_keys.insert(k);
        }
        cfg.validate();
    }

    ExperimentHooks hooks() const {
        ExperimentHooks h;
        if (!inv.quiet) h.on_log = [e = err](const std::string& msg) { *e << msg << '\n'; };
        return h;
    }

    void write_text(const std::string& path, const std::string& text) const {
        std::ofstream f(path, std::ios::binary);
        if (!f || !(f << text)) throw std::runtime_error("cannot write " + path);
    }

    void echo_fingerprint() const { *out << "config fingerprint " << cfg.fingerprint() << '\n'; }

    /// Rejects explicitly configured architecture keys that disagree with the
    /// checkpoint, then adopts the checkpoint's architecture and training
    /// settings so the fingerprint matches the training run.
    void adopt_architecture(const DetectorModel& model) {
        ExperimentConfig ck = cfg;
        ck.arch = model.net.arch();
        const auto want = cfg.entries();
        const auto have = ck.entries();
        for (std::size_t i = 0; i < want.size(); ++i) {
            if (want[i].second != have[i].second && explicit_keys.count(want[i].first)) {
                throw ConfigError("checkpoint/arch mismatch: the checkpoint has " + have[i].first + "=" +
                                  have[i].second + " but the configuration asks for " + want[i].second);
            }
        }
        cfg.arch = ck.arch;
        cfg.train = model.train_config;
    }

    Aggregator assemble_aggregator() {
        Aggregator agg;
        if (!inv.aggregator.empty()) agg = load_aggregator(inv.aggregator);
        if (!inv.svm_model.empty()) {
            const Aggregator s = load_aggregator(inv.svm_model);
            if (!s.svm) throw ConfigError(inv.svm_model + " holds no SVM model");
            agg.svm = s.svm;
        }
        if (cfg.threshold) agg.threshold = ThresholdModel{*cfg.threshold};
        if (!agg.threshold && !agg.svm) {
            throw ConfigError("no aggregator: pass --aggregator, --threshold or --svm-model");
        }
        if (!explicit_keys.count("aggregation")) {
            cfg.aggregation = agg.threshold && agg.svm ? Aggregation::kBoth
                              : agg.threshold          ? Aggregation::kThreshold
                                                       : Aggregation::kSvm;
        }
        return agg;
    }

    Manifest manifest() const { return prepare_manifest(cfg, hooks()); }
};

int cmd_synth(Context& c) {
    const Manifest m = generate_corpus(c.inv.out, corpus_config(c.cfg));
    c.write_text((std::filesystem::path(c.inv.out) / "alterdetect.config").string(), format_config(c.cfg));
    c.echo_fingerprint();
    std::size_t altered = 0;
    for (const auto& r : m.records) altered += r.label == Label::kTampered;
    *c.out << "wrote " << m.records.size() - altered << " authentic and " << altered << " altered images to "
           << (std::filesystem::path(c.inv.out) / "manifest.tsv").string() << '\n';
    return kExitOk;
}

int cmd_train(Context& c) {
    const Manifest m = c.manifest();
    const std::string fp = c.cfg.fingerprint();
    std::ofstream trace;
    if (!c.inv.trace.empty()) {
        trace.open(c.inv.trace);
        if (!trace) throw std::runtime_error("cannot write " + c.inv.trace);
    }
    const std::string header = ojson{{"record", "config"}, {"fingerprint", fp}}.dump();
    *c.out << header << '\n';
    if (trace) trace << header << '\n';
    ExperimentHooks h = c.hooks();
    h.on_epoch = [&](const std::string&, const EpochRecord& r) {
        ojson j = ojson::parse(r.to_json_line());
        j["record"] = "epoch";
        j["fingerprint"] = fp;
        *c.out << j.dump() << std::endl;
        if (trace) trace << j.dump() << '\n';
    };
    const TrainResult tr = train_detector(c.cfg, m, "train", h);
    save_checkpoint(tr.model, c.inv.out);
    c.write_text(c.inv.out + ".config", format_config(c.cfg));
    *c.out << ojson{{"record", "checkpoint"}, {"fingerprint", fp}, {"path", c.inv.out},
                    {"parameters", tr.model.net.parameter_count()}}
                  .dump()
           << '\n';
    return kExitOk;
}

void print_sweep(std::ostream& out, const std::vector<ThresholdSweepRow>& sweep) {
    out << "threshold sweep\n     tau  accuracy  correct\n";
    for (const auto& row : sweep) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "  %6.2f  %8.4f  %7zu\n", row.tau, row.accuracy, row.correct);
        out << buf;
    }
}

int cmd_calibrate(Context& c) {
    const DetectorModel model = load_checkpoint(c.inv.checkpoint);
    c.adopt_architecture(model);
    const Manifest m = c.manifest();
    std::vector<ThresholdSweepRow> sweep;
    const Aggregator agg = calibrate_detector(c.cfg, model, m, "calibrate", c.hooks(), &sweep);
    save_aggregator(agg, c.inv.out);
    c.write_text(c.inv.out + ".config", format_config(c.cfg));
    c.echo_fingerprint();
    if (!sweep.empty()) print_sweep(*c.out, sweep);
    if (agg.threshold) *c.out << "threshold tau = " << agg.threshold->tau << '\n';
    if (agg.svm) {
        *c.out << "svm: " << agg.svm->support.size() << " support vectors, training accuracy "
               << agg.svm->training_accuracy << (agg.svm->separable ? "" : " (classes overlap)") << '\n';
    }
    *c.out << "aggregator written to " << c.inv.out << '\n';
    return kExitOk;
}

Split parse_split_flag(const std::string& text) {
    const Split s = parse_split(text);
    if (s == Split::kNone) throw ConfigError("--split must be train, val or test");
    return s;
}

int cmd_eval(Context& c) {
    const DetectorModel model = load_checkpoint(c.inv.checkpoint);
    c.adopt_architecture(model);
    const Aggregator agg = c.assemble_aggregator();
    const Manifest m = c.manifest();
    const Split split = parse_split_flag(c.inv.eval_split);
    ExperimentResult res;
    res.fingerprint = c.cfg.fingerprint();
    res.config = c.cfg.entries();
    res.reports.push_back(evaluate_split(c.cfg, model, agg, m, split, std::string(split_name(split)), c.hooks()));
    if (!c.inv.jsonl.empty()) c.write_text(c.inv.jsonl, res.to_jsonl());
    *c.out << res.to_text();
    return kExitOk;
}

int cmd_predict(Context& c) {
    const DetectorModel model = load_checkpoint(c.inv.checkpoint);
    c.adopt_architecture(model);
    const Aggregator agg = c.assemble_aggregator();
    Aggregator used;
    if (c.cfg.aggregation != Aggregation::kSvm) used.threshold = agg.threshold;
    if (c.cfg.aggregation != Aggregation::kThreshold) used.svm = agg.svm;
    if (!used.threshold && !used.svm) throw ConfigError("the requested aggregation has no fitted model");
    const std::string fp = c.cfg.fingerprint();
    c.echo_fingerprint();
    std::ostringstream lines;
    for (const auto& path : c.inv.images) {
        const PatchGrid grid = extract_patches(decode_image(path), model.net.arch().patch_size, path);
        std::vector<Label> labels;
        for (const auto& p : predict_patches(model, grid.patches)) labels.push_back(p.label);
        const ImageDecision d = decide(tamper_ratio(labels, path), used);
        // The SVM decides when it is available; otherwise the threshold does.
        const Label final_label = d.by_svm ? *d.by_svm : *d.by_threshold;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.2f", d.score.output);
        *c.out << path << '\t' << label_name(final_label) << "\toutput=" << buf;
        if (d.by_threshold) *c.out << "\tthreshold=" << label_name(*d.by_threshold);
        if (d.by_svm) {
            std::snprintf(buf, sizeof buf, "%.4f", d.margin);
            *c.out << "\tsvm=" << label_name(*d.by_svm) << "\tmargin=" << buf;
        }
        *c.out << '\n';
        ojson j = ojson::parse(d.to_json_line());
        j["label"] = label_name(final_label);
        j["fingerprint"] = fp;
        lines << j.dump() << '\n';
    }
    if (!c.inv.jsonl.empty()) c.write_text(c.inv.jsonl, lines.str());
    return kExitOk;
}

int cmd_gridsearch(Context& c) {
    const DetectorModel model = load_checkpoint(c.inv.checkpoint);
    c.adopt_architecture(model);
    const Manifest m = c.manifest();
    std::vector<const ImageRecord*> records;
    if (c.inv.grid_split == "calibration") {
        records = calibration_split(m, c.cfg.calibration_fraction, mix_seed(c.cfg.seed, 4)).second;
    } else {
        records = m.with_split(parse_split_flag(c.inv.grid_split));
    }
    if (records.empty()) throw std::runtime_error("no images in the " + c.inv.grid_split + " split");
    std::vector<double> grid = default_threshold_grid();
    if (!c.inv.grid.empty()) {
        grid.clear();
        std::stringstream ss(c.inv.grid);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                std::size_t used = 0;
                grid.push_back(std::stod(item, &used));
                if (used != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw ConfigError("--grid expects comma-separated numbers, got '" + item + "'");
            }
        }
    }
    std::vector<LabeledScore> scores;
    for (const auto& img : predict_images(model, m, records, c.cfg.labeling)) scores.push_back({img.score, img.truth});
    const ThresholdSearchResult res = grid_search_threshold(scores, grid);
    c.echo_fingerprint();
    print_sweep(*c.out, res.table);
    *c.out << "best tau = " << res.model.tau << '\n';
    if (!c.inv.out.empty()) {
        Aggregator agg;
        if (!c.inv.aggregator.empty()) agg = load_aggregator(c.inv.aggregator);
        agg.threshold = res.model;
        save_aggregator(agg, c.inv.out);
        *c.out << "aggregator written to " << c.inv.out << '\n';
    }
    return kExitOk;
}

int cmd_experiment(Context& c, ExperimentKind kind) {
    c.cfg.kind = kind;
    ExperimentHooks h = c.hooks();
    if (!c.inv.quiet) {
        h.on_epoch = [e = c.err](const std::string& variant, const EpochRecord& r) {
            *e << variant << ' ' << r.to_json_line() << '\n';
        };
    }
    const ExperimentResult res = run_experiment(c.cfg, h);
    if (!c.inv.jsonl.empty()) c.write_text(c.inv.jsonl, res.to_jsonl());
    *c.out << res.to_text();
    return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"alterdetect: patch-based detector for retouched and generated face images"};
    app.require_subcommand(1);
    Context c;
    c.out = &out;
    c.err = &err;
    Invocation& inv = c.inv;

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus of paired authentic/altered images");
    add_common(synth, inv);
    add_synth(synth, inv, "--count");
    synth->add_option("--out", inv.out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train the patch CNN and write a checkpoint");
    add_common(train, inv);
    add_data(train, inv);
    add_arch(train, inv);
    add_training(train, inv);
    add_synth(train, inv, "--subjects");
    train->add_option("--out", inv.out, "checkpoint path")->required();
    train->add_option("--trace", inv.trace, "also write the epoch trace (JSON lines) here");

    auto* calibrate = app.add_subcommand("calibrate", "fit the threshold and SVM aggregators");
    add_common(calibrate, inv);
    add_data(calibrate, inv);
    add_arch(calibrate, inv);
    add_aggregation(calibrate, inv);
    add_synth(calibrate, inv, "--subjects");
    calibrate->add_option("--checkpoint", inv.checkpoint, "trained checkpoint")->required();
    calibrate->add_option("--out", inv.out, "aggregator path (JSON)")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and aggregator on a split");
    add_common(eval, inv);
    add_data(eval, inv);
    add_arch(eval, inv);
    add_aggregation(eval, inv);
    add_synth(eval, inv, "--subjects");
    add_aggregator_inputs(eval, inv);
    eval->add_option("--checkpoint", inv.checkpoint, "trained checkpoint")->required();
    eval->add_option("--split", inv.eval_split, "split to evaluate")->default_val("test");
    eval->add_option("--jsonl", inv.jsonl, "write the structured report here");

    auto* predict = app.add_subcommand("predict", "classify individual images");
    add_common(predict, inv);
    add_arch(predict, inv);
    add_aggregation(predict, inv);
    add_aggregator_inputs(predict, inv);
    predict->add_option("--checkpoint", inv.checkpoint, "trained checkpoint")->required();
    predict->add_option("--jsonl", inv.jsonl, "write decision records here");
    predict->add_option("images", inv.images, "PNG or JPEG images")->required();

    auto* gridsearch = app.add_subcommand("gridsearch", "sweep the aggregation threshold");
    add_common(gridsearch, inv);
    add_data(gridsearch, inv);
    add_arch(gridsearch, inv);
    add_synth(gridsearch, inv, "--subjects");
    gridsearch->add_option("--checkpoint", inv.checkpoint, "trained checkpoint")->required();
    gridsearch->add_option("--split", inv.grid_split, "calibration, train, val or test")->default_val("calibration");
    gridsearch->add_option("--grid", inv.grid, "comma-separated candidate thresholds (default 1..10)");
    gridsearch->add_option("--aggregator", inv.aggregator, "aggregator to update with the best threshold");
    gridsearch->add_option("--out", inv.out, "write the updated aggregator here");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate with and without the residual shortcut");
    auto* compress = app.add_subcommand("compress", "compare PNG and JPEG-recompressed test images");
    for (auto* sub : {ablate, compress}) {
        add_common(sub, inv);
        add_data(sub, inv);
        add_arch(sub, inv);
        add_training(sub, inv);
        add_aggregation(sub, inv);
        add_synth(sub, inv, "--subjects");
        sub->add_option("--jsonl", inv.jsonl, "write the structured report here");
    }
    map_option(compress, inv, "--quality", "jpeg_quality", "JPEG quality factor");
    compress->add_flag_callback(
        "--retrain", [&inv] { inv.flags.emplace_back("compress_retrain", "true"); },
        "also retrain on the recompressed images");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitConfigError;
    }

    try {
        c.build();
        if (synth->parsed()) return cmd_synth(c);
        if (train->parsed()) return cmd_train(c);
        if (calibrate->parsed()) return cmd_calibrate(c);
        if (eval->parsed()) return cmd_eval(c);
        if (predict->parsed()) return cmd_predict(c);
        if (gridsearch->parsed()) return cmd_gridsearch(c);
        if (ablate->parsed()) return cmd_experiment(c, ExperimentKind::kAblation);
        return cmd_experiment(c, ExperimentKind::kCompression);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfigError;
    } catch (const StageError& e) {
        err << "error: " << e.what() << '\n';
        return e.stage() == "config" ? kExitConfigError : kExitRuntimeError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntimeError;
    }
}

}  // namespace alterdetect

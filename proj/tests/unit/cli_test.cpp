#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "alterdetect/cli.hpp"
#include "alterdetect/datasets.hpp"
#include "alterdetect/detectnet.hpp"

using namespace alterdetect;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = 0;
    std::string out;
    std::string err;
};

CliRun run(std::vector<std::string> args) {
    args.insert(args.begin(), "alterdetect");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliRun r;
    r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("alterdetect_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::vector<std::string> kTinyArch = {"--channels", "2,2,2,2,2,2", "--residual-depth", "1", "--fc-width", "4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

std::size_t count_lines_with(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) n += line.find(needle) != std::string::npos;
    return n;
}

}  // namespace

TEST(Cli, HelpAndBadUsage) {
    EXPECT_EQ(run({"--help"}).code, kExitOk);
    EXPECT_EQ(run({}).code, kExitConfigError);
    EXPECT_EQ(run({"frobnicate"}).code, kExitConfigError);
}

TEST(Cli, SynthWritesPairedRecords) {
    const fs::path dir = scratch("synth");
    const CliRun r = run({"synth", "--out", (dir / "a").string(), "--count", "10", "--height", "64", "--width", "64"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("config fingerprint"), std::string::npos);
    const Manifest m = read_manifest((dir / "a" / "manifest.tsv").string());
    EXPECT_NO_THROW(m.validate());
    std::size_t altered = 0;
    for (const auto& rec : m.records) altered += rec.label == Label::kTampered;
    EXPECT_EQ(m.records.size(), 20u);
    EXPECT_EQ(altered, 10u);

    ASSERT_EQ(run({"synth", "--out", (dir / "b").string(), "--count", "10", "--height", "64", "--width", "64"}).code,
              kExitOk);
    EXPECT_EQ(slurp(dir / "a" / "manifest.tsv"), slurp(dir / "b" / "manifest.tsv"));
    for (const auto& rec : m.records) EXPECT_EQ(slurp(dir / "a" / rec.path), slurp(dir / "b" / rec.path));
}

TEST(Cli, SynthReportsUnwritablePath) {
    const fs::path dir = scratch("unwritable");
    std::ofstream(dir / "file") << "x";
    const CliRun r = run({"synth", "--out", (dir / "file" / "sub").string(), "--count", "2", "--height", "64", "--width",
                       "64"});
    EXPECT_EQ(r.code, kExitRuntimeError);
    EXPECT_FALSE(r.err.empty());
}

TEST(Cli, ConfigErrorsUseTheirOwnExitCode) {
    const fs::path dir = scratch("config");
    EXPECT_EQ(run({"train", "--patch-size", "96", "--out", "x"}).code, kExitConfigError);
    EXPECT_EQ(run({"train", "--set", "bogus=1", "--out", "x"}).code, kExitConfigError);
    std::ofstream(dir / "bad.cfg") << "seed = 1\nepochs\n";
    const CliRun r = run({"train", "--config", (dir / "bad.cfg").string(), "--out", "x"});
    EXPECT_EQ(r.code, kExitConfigError);
    EXPECT_NE(r.err.find("line 2"), std::string::npos);
}

TEST(Cli, ManifestSchemaViolationNamesTheLine) {
    const fs::path dir = scratch("schema");
    std::ofstream(dir / "manifest.tsv") << "path\tformat\tlabel\tprobe\tmask_path\tsplit\n"
                                        << "a.png\tpng\tauthentic\t-\t-\ttrain\n"
                                        << "b.png\tgif\tauthentic\t-\t-\ttest\n";
    const CliRun r = run({"train", "--manifest", (dir / "manifest.tsv").string(), "--out", (dir / "m.ckpt").string()});
    EXPECT_EQ(r.code, kExitRuntimeError);
    EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
}

TEST(Cli, MissingTrainSplitIsExplicit) {
    const fs::path dir = scratch("nosplit");
    ASSERT_EQ(run({"synth", "--out", (dir / "c").string(), "--count", "2", "--height", "64", "--width", "64"}).code,
              kExitOk);
    const CliRun r = run(with({"train", "--manifest", (dir / "c" / "manifest.tsv").string(), "--protocol", "0", "--out",
                            (dir / "m.ckpt").string(), "-q"},
                           kTinyArch));
    EXPECT_NE(r.code, kExitOk);
    EXPECT_NE(r.err.find("train"), std::string::npos) << r.err;
}

TEST(Cli, FullPipelineIsDeterministic) {
    const fs::path dir = scratch("pipeline");
    const std::string manifest = (dir / "c" / "manifest.tsv").string();
    ASSERT_EQ(run({"synth", "--out", (dir / "c").string(), "--count", "6", "--height", "64", "--width", "128",
                   "--probes", "2"})
                  .code,
              kExitOk);
    std::ofstream(dir / "run.cfg") << "epochs = 5\nbatch_size = 4\ncalibration_fraction = 0.3\n";
    const std::vector<std::string> common =
        with({"--manifest", manifest, "--config", (dir / "run.cfg").string(), "-q"}, kTinyArch);

    // Flags override the config file: one epoch line, not five.
    const CliRun t1 = run(with(with({"train", "--out", (dir / "a.ckpt").string(), "--epochs", "1"}, common), {}));
    ASSERT_EQ(t1.code, kExitOk) << t1.err;
    EXPECT_EQ(count_lines_with(t1.out, "\"record\":\"epoch\""), 1u);
    ASSERT_EQ(run(with({"train", "--out", (dir / "b.ckpt").string(), "--epochs", "1"}, common)).code, kExitOk);
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));

    const std::vector<std::string> from_ckpt = {"--manifest", manifest, "--config", (dir / "run.cfg").string(), "-q",
                                                "--checkpoint", (dir / "a.ckpt").string()};
    const CliRun cal = run(with({"calibrate", "--out", (dir / "agg.json").string()}, from_ckpt));
    ASSERT_EQ(cal.code, kExitOk) << cal.err;

    const CliRun ev = run(with({"eval", "--aggregator", (dir / "agg.json").string(), "--jsonl",
                             (dir / "report.jsonl").string()},
                            from_ckpt));
    ASSERT_EQ(ev.code, kExitOk) << ev.err;
    EXPECT_NE(ev.out.find("per probe"), std::string::npos);
    const std::string fp = ev.out.substr(ev.out.find("fingerprint ") + 12, 16);
    EXPECT_NE(t1.out.find(fp), std::string::npos);
    EXPECT_NE(cal.out.find(fp), std::string::npos);
    EXPECT_NE(slurp(dir / "report.jsonl").find(fp), std::string::npos);
    EXPECT_EQ(run(with({"eval", "--aggregator", (dir / "agg.json").string()}, from_ckpt)).out, ev.out);

    const CliRun pr = run({"predict", "--checkpoint", (dir / "a.ckpt").string(), "--aggregator",
                        (dir / "agg.json").string(), (dir / "c" / "images" / "s0000_a.png").string(),
                        (dir / "c" / "images" / "s0000_r.png").string()});
    ASSERT_EQ(pr.code, kExitOk) << pr.err;
    EXPECT_EQ(count_lines_with(pr.out, "output="), 2u);
    EXPECT_EQ(count_lines_with(pr.out, "threshold="), 2u);
    EXPECT_EQ(count_lines_with(pr.out, "svm="), 2u);

    const CliRun thr_only = run({"predict", "--checkpoint", (dir / "a.ckpt").string(), "--threshold", "50",
                              (dir / "c" / "images" / "s0000_a.png").string()});
    ASSERT_EQ(thr_only.code, kExitOk) << thr_only.err;
    EXPECT_EQ(count_lines_with(thr_only.out, "svm="), 0u);

    EXPECT_EQ(run({"predict", "--checkpoint", (dir / "a.ckpt").string(),
                   (dir / "c" / "images" / "s0000_a.png").string()})
                  .code,
              kExitConfigError);
    EXPECT_EQ(run({"predict", "--checkpoint", (dir / "a.ckpt").string(), "--threshold", "5", "--patch-size", "128",
                   (dir / "c" / "images" / "s0000_a.png").string()})
                  .code,
              kExitConfigError);

    const CliRun gs = run(with({"gridsearch", "--grid", "5,10,50"}, from_ckpt));
    ASSERT_EQ(gs.code, kExitOk) << gs.err;
    EXPECT_NE(gs.out.find("best tau"), std::string::npos);
}

TEST(Cli, NoResidualFlagDropsTheShortcut) {
    const fs::path dir = scratch("noresidual");
    ASSERT_EQ(run({"synth", "--out", (dir / "c").string(), "--count", "4", "--height", "64", "--width", "64"}).code,
              kExitOk);
    const CliRun r = run(with({"train", "--manifest", (dir / "c" / "manifest.tsv").string(), "--no-residual", "--epochs",
                            "1", "--batch-size", "2", "--out", (dir / "m.ckpt").string(), "-q"},
                           kTinyArch));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_FALSE(load_checkpoint(dir / "m.ckpt").net.arch().enable_residual);
}

TEST(Cli, AblateAndCompressEmitPairedReports) {
    const fs::path dir = scratch("experiments");
    const std::vector<std::string> common = with({"--work-dir", dir.string(), "--subjects", "6", "--height", "64",
                                                  "--width", "128", "--epochs", "1", "--batch-size", "4",
                                                  "--calibration-fraction", "0.3", "-q"},
                                                 kTinyArch);
    const CliRun ab = run(with({"ablate"}, common));
    ASSERT_EQ(ab.code, kExitOk) << ab.err;
    EXPECT_NE(ab.out.find("== residual"), std::string::npos);
    EXPECT_NE(ab.out.find("== no-residual"), std::string::npos);
    EXPECT_NE(ab.out.find("parameter delta"), std::string::npos);

    const CliRun cp = run(with({"compress", "--jsonl", (dir / "c.jsonl").string()}, common));
    ASSERT_EQ(cp.code, kExitOk) << cp.err;
    EXPECT_NE(cp.out.find("Thresholding"), std::string::npos);
    EXPECT_NE(cp.out.find("jpeg-q50"), std::string::npos);
    EXPECT_NE(slurp(dir / "c.jsonl").find("\"kind\":\"compression\""), std::string::npos);
}

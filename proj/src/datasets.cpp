#include "alterdetect/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "alterdetect/random.hpp"

namespace alterdetect {

namespace fs = std::filesystem;

std::string_view split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
        case Split::kNone: break;
    }
    return "-";
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::kTrain;
    if (text == "val") return Split::kVal;
    if (text == "test") return Split::kTest;
    if (text == "-" || text.empty()) return Split::kNone;
    throw std::invalid_argument("unknown split '" + std::string(text) + "' (expected train, val, test or -)");
}

std::string Manifest::resolve(const std::string& path) const {
    if (base_dir.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base_dir) / path).string();
}

bool Manifest::probe_structured() const { return !records.empty() && records.front().probe.has_value(); }

void Manifest::validate() const {
    std::set<std::string> seen;
    const bool probes = probe_structured();
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const std::string where = "record " + std::to_string(i + 1) + " (" + r.path + "): ";
        if (r.path.empty()) throw ManifestError(where + "empty path");
        if (!seen.insert(r.path).second) throw ManifestError(where + "duplicate path");
        if (r.probe.has_value() != probes) {
            throw ManifestError(where + "probe ids must be given on every record or on none");
        }
        if (r.probe && (*r.probe < 1 || *r.probe > 7)) throw ManifestError(where + "probe id outside 1..7");
    }
}

std::vector<const ImageRecord*> Manifest::with_split(Split s) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(&r);
    return out;
}

namespace {

std::vector<std::string> split_tabs(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return out;
}

std::optional<std::string> opt_field(const std::string& v) {
    if (v.empty() || v == "-") return std::nullopt;
    return v;
}

constexpr const char* kRequired[] = {"path", "format", "label", "probe", "mask_path", "split"};

}  // namespace

Manifest parse_manifest(std::string_view text, std::string base_dir) {
    Manifest m;
    m.base_dir = std::move(base_dir);
    std::map<std::string, std::size_t> col;
    std::size_t ncols = 0;
    bool have_header = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty() || line.front() == '#') continue;
        const auto fields = split_tabs(line);
        const std::string where = "manifest line " + std::to_string(line_no) + ": ";
        if (!have_header) {
            for (std::size_t i = 0; i < fields.size(); ++i) {
                if (!col.emplace(fields[i], i).second) throw ManifestError(where + "duplicate column " + fields[i]);
                if (fields[i] != "subject" && fields[i] != "gender" &&
                    std::find(std::begin(kRequired), std::end(kRequired), fields[i]) == std::end(kRequired)) {
                    throw ManifestError(where + "unknown column '" + fields[i] + "'");
                }
            }
            for (const char* req : kRequired)
                if (!col.count(req)) throw ManifestError(where + "header lacks required column '" + req + "'");
            ncols = fields.size();
            have_header = true;
            continue;
        }
        if (fields.size() != ncols) {
            throw ManifestError(where + "expected " + std::to_string(ncols) + " tab-separated fields, found " +
                                std::to_string(fields.size()));
        }
        try {
            ImageRecord r;
            r.path = fields[col.at("path")];
            if (r.path.empty() || r.path == "-") throw std::invalid_argument("empty path");
            r.format = parse_format(fields[col.at("format")]);
            r.label = parse_label(fields[col.at("label")]);
            if (auto p = opt_field(fields[col.at("probe")])) {
                std::size_t used = 0;
                const int v = std::stoi(*p, &used);
                if (used != p->size()) throw std::invalid_argument("probe id '" + *p + "' is not an integer");
                r.probe = v;
            }
            r.mask_path = opt_field(fields[col.at("mask_path")]);
            r.split = parse_split(fields[col.at("split")]);
            if (col.count("subject")) r.subject = opt_field(fields[col.at("subject")]);
            if (col.count("gender")) r.gender = opt_field(fields[col.at("gender")]);
            m.records.push_back(std::move(r));
        } catch (const std::logic_error& e) {
            throw ManifestError(where + e.what());
        }
    }
    if (!have_header) throw ManifestError("manifest has no header line");
    m.validate();
    return m;
}

std::string format_manifest(const Manifest& m) {
    std::ostringstream out;
    out << "# alterdetect manifest\n";
    out << "path\tformat\tlabel\tprobe\tmask_path\tsplit\tsubject\tgender\n";
    for (const auto& r : m.records) {
        out << r.path << '\t' << format_name(r.format) << '\t' << label_name(r.label) << '\t'
            << (r.probe ? std::to_string(*r.probe) : "-") << '\t' << r.mask_path.value_or("-") << '\t'
            << split_name(r.split) << '\t' << r.subject.value_or("-") << '\t' << r.gender.value_or("-") << '\n';
    }
    return out.str();
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ManifestError("cannot open manifest " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_manifest(ss.str(), fs::path(path).parent_path().string());
    } catch (const ManifestError& e) {
        throw ManifestError(path + ": " + e.what());
    }
}

void write_manifest(const std::string& path, const Manifest& m) {
    m.validate();
    std::ofstream out(path);
    if (!out) throw ManifestError("cannot open " + path + " for writing");
    out << format_manifest(m);
}

Tensor<float> load_image(const Manifest& m, const ImageRecord& r) { return decode_image(m.resolve(r.path)); }

RegionMask load_mask(const std::string& path) {
    const Bytes bytes = read_file_bytes(path);
    GrayImage g;
    try {
        g = decode_gray_png(bytes);
    } catch (const ImageError& e) {
        throw ImageError(path + ": " + e.what());
    }
    RegionMask mask(g.height, g.width);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) mask.bits[i] = g.pixels[i] != 0;
    return mask;
}

void save_mask(const std::string& path, const RegionMask& mask) {
    GrayImage g;
    g.height = mask.height;
    g.width = mask.width;
    g.pixels.resize(mask.bits.size());
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = mask.bits[i] ? 255 : 0;
    write_file_bytes(path, encode_gray_png(g));
}

std::optional<RegionMask> load_record_mask(const Manifest& m, const ImageRecord& r) {
    if (!r.mask_path) return std::nullopt;
    return load_mask(m.resolve(*r.mask_path));
}

// ---------------------------------------------------------------------------

void SynthAlterConfig::validate() const {
    if (radius < 1) throw std::invalid_argument("synth: radius must be >= 1");
    if (!(region_fraction > 0.0 && region_fraction <= 1.0)) {
        throw std::invalid_argument("synth: region fraction must be in (0, 1]");
    }
    if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) throw std::invalid_argument("synth: amplitude must be >= 0");
}

RetouchResult synth_retouch(const Tensor<float>& image, const SynthAlterConfig& cfg) {
    cfg.validate();
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw ShapeError("synth_retouch: expected HxWx3 image, got " + shape_str(image.shape()));
    }
    const std::size_t h = image.dim(0), w = image.dim(1);
    const double area = cfg.region_fraction * static_cast<double>(h) * static_cast<double>(w);
    if (area < 1.0) throw std::invalid_argument("synth_retouch: region would be smaller than one pixel");
    const std::size_t rw = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(std::sqrt(cfg.region_fraction) * static_cast<double>(w))), 1, w);
    const std::size_t rh =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(area / static_cast<double>(rw))), 1, h);

    Rng rng(cfg.seed);
    const std::size_t y0 = rng.below(h - rh + 1), x0 = rng.below(w - rw + 1);
    const double phase = 6.283185307179586 * rng.uniform();
    const double angle = 3.141592653589793 * rng.uniform();
    const double period = rng.uniform(6.0, 12.0);
    const double fx = std::cos(angle) / period, fy = std::sin(angle) / period;

    RetouchResult out{image, RegionMask(h, w)};
    // Summed-area table per channel over the source image.
    std::vector<double> sat((h + 1) * (w + 1) * 3, 0.0);
    auto at = [&](std::size_t y, std::size_t x, std::size_t c) -> double& { return sat[(y * (w + 1) + x) * 3 + c]; };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                at(y + 1, x + 1, c) = image[(y * w + x) * 3 + c] + at(y, x + 1, c) + at(y + 1, x, c) - at(y, x, c);

    const std::size_t k = static_cast<std::size_t>(cfg.radius - 1);
    for (std::size_t y = y0; y < y0 + rh; ++y) {
        const std::size_t ya = y >= k ? y - k : 0, yb = std::min(h, y + k + 1);
        for (std::size_t x = x0; x < x0 + rw; ++x) {
            const std::size_t xa = x >= k ? x - k : 0, xb = std::min(w, x + k + 1);
            const double count = static_cast<double>((yb - ya) * (xb - xa));
            const double tex = cfg.amplitude * std::sin(6.283185307179586 * (fx * x + fy * y) + phase);
            out.mask.set(y, x);
            for (std::size_t c = 0; c < 3; ++c) {
                // A one-pixel window reads the source directly so that
                // summed-area rounding cannot leak in.
                const double mean = k == 0 ? static_cast<double>(image[(y * w + x) * 3 + c])
                                           : (at(yb, xb, c) - at(ya, xb, c) - at(yb, xa, c) + at(ya, xa, c)) / count;
                out.image[(y * w + x) * 3 + c] = static_cast<float>(std::clamp(mean + tex, 0.0, 1.0));
            }
        }
    }
    return out;
}

Tensor<float> synth_authentic(std::size_t height, std::size_t width, std::uint64_t seed) {
    if (height == 0 || width == 0) throw std::invalid_argument("synth_authentic: empty size");
    Rng rng(seed);
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.3, 0.7);
        gx[c] = rng.uniform(-0.15, 0.15);
        gy[c] = rng.uniform(-0.15, 0.15);
    }
    struct Blob {
        double cy, cx, ry, rx, color[3];
    };
    std::vector<Blob> blobs(3 + rng.below(4));
    for (auto& b : blobs) {
        b.cy = rng.uniform(0.0, static_cast<double>(height));
        b.cx = rng.uniform(0.0, static_cast<double>(width));
        b.ry = rng.uniform(0.1, 0.4) * static_cast<double>(height);
        b.rx = rng.uniform(0.1, 0.4) * static_cast<double>(width);
        for (double& c : b.color) c = rng.uniform(-0.25, 0.25);
    }
    Tensor<float> img({height, width, 3});
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double u = static_cast<double>(x) / static_cast<double>(width) - 0.5;
            const double v = static_cast<double>(y) / static_cast<double>(height) - 0.5;
            double px[3];
            for (int c = 0; c < 3; ++c) px[c] = base[c] + gx[c] * u + gy[c] * v;
            for (const auto& b : blobs) {
                const double dy = (static_cast<double>(y) - b.cy) / b.ry, dx = (static_cast<double>(x) - b.cx) / b.rx;
                const double wgt = std::exp(-0.5 * (dx * dx + dy * dy));
                for (int c = 0; c < 3; ++c) px[c] += wgt * b.color[c];
            }
            const double luma = 0.035 * rng.normal();
            for (int c = 0; c < 3; ++c) {
                const double val = px[c] + luma + 0.02 * rng.normal();
                img[(y * width + x) * 3 + static_cast<std::size_t>(c)] =
                    static_cast<float>(to_byte(static_cast<float>(val))) / 255.0f;
            }
        }
    }
    return img;
}

Manifest generate_corpus(const std::string& dir, const CorpusConfig& cfg) {
    cfg.alter.validate();
    if (cfg.subjects == 0) throw std::invalid_argument("generate_corpus: need at least one subject");
    if (cfg.probes < 0 || cfg.probes > 7) throw std::invalid_argument("generate_corpus: probes must be in 0..7");
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    Manifest m;
    m.base_dir = dir;
    Rng meta(mix_seed(cfg.seed, 0x6e6465));
    char name[64];
    for (std::size_t i = 0; i < cfg.subjects; ++i) {
        std::snprintf(name, sizeof name, "s%04zu", i);
        const std::string subject = name;
        const std::string gender = meta.uniform() < cfg.male_fraction ? "m" : "f";
        std::optional<int> probe;
        SynthAlterConfig alter = cfg.alter;
        alter.seed = mix_seed(cfg.alter.seed ^ cfg.seed, i);
        if (cfg.probes > 0) {
            const int k = static_cast<int>(i % static_cast<std::size_t>(cfg.probes));
            probe = k + 1;
            // Each probe stands for a different retouching preset.
            alter.radius = cfg.alter.radius + k % 3;
            alter.amplitude = cfg.alter.amplitude * (0.5 + 0.25 * (k % 4));
            alter.region_fraction = std::min(1.0, cfg.alter.region_fraction * (0.75 + 0.1 * (k % 5)));
        }
        const Tensor<float> authentic = synth_authentic(cfg.height, cfg.width, mix_seed(cfg.seed, 1'000'000 + i));
        const RetouchResult altered = synth_retouch(authentic, alter);

        ImageRecord a;
        a.path = "images/" + subject + "_a.png";
        a.label = Label::kAuthentic;
        a.probe = probe;
        a.subject = subject;
        a.gender = gender;
        write_png(m.resolve(a.path), authentic);

        ImageRecord r = a;
        r.path = "images/" + subject + "_r.png";
        r.label = Label::kTampered;
        r.mask_path = "masks/" + subject + "_r.png";
        write_png(m.resolve(r.path), altered.image);
        save_mask(m.resolve(*r.mask_path), altered.mask);

        m.records.push_back(std::move(a));
        m.records.push_back(std::move(r));
    }
    write_manifest((fs::path(dir) / "manifest.tsv").string(), m);
    return m;
}

// ---------------------------------------------------------------------------

namespace {

struct Unit {
    std::string key;
    std::vector<std::size_t> members;
};

// Alternating assignment over shuffled units, walked group by group, keeps
// every group and the total within one unit of an even split.
void assign_halves(std::map<std::string, std::vector<Unit>>& groups, Rng& rng, Manifest& m,
                   std::vector<Unit>& train_units) {
    std::size_t counter = 0;
    for (auto& [gkey, units] : groups) {
        std::sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) { return a.key < b.key; });
        rng.shuffle(units);
        for (auto& u : units) {
            const Split s = counter++ % 2 == 0 ? Split::kTrain : Split::kTest;
            for (std::size_t i : u.members) m.records[i].split = s;
            if (s == Split::kTrain) train_units.push_back(u);
        }
    }
}

}  // namespace

Manifest split_protocol(Manifest m, const SplitConfig& cfg) {
    m.validate();
    if (cfg.protocol < 1 || cfg.protocol > 3) throw std::invalid_argument("split_protocol: protocol must be 1, 2 or 3");
    if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0)) {
        throw std::invalid_argument("split_protocol: val fraction must be in [0, 1)");
    }
    if (m.records.empty()) throw std::invalid_argument("split_protocol: empty manifest");
    if (cfg.protocol >= 2 && !m.probe_structured()) {
        throw std::invalid_argument("split_protocol: protocol " + std::to_string(cfg.protocol) +
                                    " requires probe ids on every record");
    }
    const bool subjects =
        std::all_of(m.records.begin(), m.records.end(), [](const ImageRecord& r) { return r.subject.has_value(); });
    const bool genders =
        std::all_of(m.records.begin(), m.records.end(), [](const ImageRecord& r) { return r.gender.has_value(); });

    // Units keep a subject's images on one side of the split.
    std::map<std::string, Unit> by_key;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        std::string key = subjects ? *r.subject : r.path;
        if (cfg.protocol == 2) key = std::to_string(*r.probe) + "/" + key;
        auto [it, fresh] = by_key.try_emplace(key, Unit{key, {}});
        if (fresh) order.push_back(key);
        it->second.members.push_back(i);
    }

    Rng rng(mix_seed(cfg.seed, 0x5b117 + static_cast<std::uint64_t>(cfg.protocol)));
    std::vector<Unit> train_units;
    if (cfg.protocol == 3) {
        for (const auto& key : order) {
            const Unit& u = by_key.at(key);
            bool in7 = false;
            for (std::size_t i : u.members) in7 |= *m.records[i].probe == 7;
            for (std::size_t i : u.members) m.records[i].split = *m.records[i].probe == 7 ? Split::kTrain : Split::kTest;
            if (in7) {
                Unit t{u.key, {}};
                for (std::size_t i : u.members)
                    if (*m.records[i].probe == 7) t.members.push_back(i);
                train_units.push_back(std::move(t));
            }
        }
        if (train_units.empty()) throw std::invalid_argument("split_protocol: protocol 3 needs probe-7 images");
    } else {
        std::map<std::string, std::vector<Unit>> groups;
        for (const auto& key : order) {
            const Unit& u = by_key.at(key);
            const auto& first = m.records[u.members.front()];
            std::string g;
            if (cfg.protocol == 2) g = std::to_string(*first.probe);
            if (genders) g += "|" + *first.gender;
            groups[g].push_back(u);
        }
        assign_halves(groups, rng, m, train_units);
    }

    if (cfg.val_fraction > 0.0) {
        const std::size_t n_val = std::min(
            train_units.size() - 1,
            static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(train_units.size()))));
        rng.shuffle(train_units);
        for (std::size_t v = 0; v < n_val; ++v)
            for (std::size_t i : train_units[v].members) m.records[i].split = Split::kVal;
    }
    return m;
}

// ---------------------------------------------------------------------------

namespace {

Manifest restore_as(const Manifest& in, const std::string& out_dir, ImageFormat format, int quality) {
    fs::create_directories(fs::path(out_dir) / "images");
    Manifest out;
    out.base_dir = out_dir;
    char prefix[32];
    for (std::size_t i = 0; i < in.records.size(); ++i) {
        const auto& src = in.records[i];
        ImageRecord r = src;
        const Tensor<float> img = load_image(in, src);
        std::snprintf(prefix, sizeof prefix, "images/%05zu_", i);
        const std::string stem = fs::path(src.path).stem().string();
        r.format = format;
        if (format == ImageFormat::kPng) {
            r.path = prefix + stem + ".png";
            write_png(out.resolve(r.path), img);
        } else {
            r.path = prefix + stem + ".jpg";
            write_jpeg(out.resolve(r.path), img, quality);
        }
        if (src.mask_path) r.mask_path = fs::absolute(in.resolve(*src.mask_path)).string();
        out.records.push_back(std::move(r));
    }
    write_manifest((fs::path(out_dir) / "manifest.tsv").string(), out);
    return out;
}

}  // namespace

Manifest convert_to_png(const Manifest& in, const std::string& out_dir) {
    return restore_as(in, out_dir, ImageFormat::kPng, 0);
}

Manifest recompress_manifest(const Manifest& in, const std::string& out_dir, int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("recompress: quality must be in 1..100");
    return restore_as(in, out_dir, ImageFormat::kJpeg, quality);
}

}  // namespace alterdetect

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "alterdetect/imageio.hpp"
#include "alterdetect/patchwork.hpp"
#include "alterdetect/tensor.hpp"

namespace alterdetect {

enum class Split { kNone, kTrain, kVal, kTest };

std::string_view split_name(Split s);
Split parse_split(std::string_view text);

struct ImageRecord {
    std::string path;  ///< relative to the manifest directory unless absolute
    ImageFormat format = ImageFormat::kPng;
    Label label = Label::kAuthentic;
    std::optional<int> probe;  ///< 1..7 for probe-structured collections
    std::optional<std::string> mask_path;
    Split split = Split::kNone;
    std::optional<std::string> subject;
    std::optional<std::string> gender;  ///< free text, e.g. "m"/"f"

    bool operator==(const ImageRecord&) const = default;
};

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tab-separated text. The first non-comment line is a header naming the
/// columns; path, format, label, probe, mask_path and split are required,
/// subject and gender are optional. "-" marks an empty field and lines
/// starting with '#' are comments.
struct Manifest {
    std::string base_dir;
    std::vector<ImageRecord> records;

    std::string resolve(const std::string& path) const;
    bool probe_structured() const;
    /// Unique paths; probe ids either on every record or none, within 1..7.
    void validate() const;
    std::vector<const ImageRecord*> with_split(Split s) const;
};

Manifest parse_manifest(std::string_view text, std::string base_dir = {});
std::string format_manifest(const Manifest& m);
Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& m);

Tensor<float> load_image(const Manifest& m, const ImageRecord& r);
/// Nonzero pixels of the stored PNG are tampered.
RegionMask load_mask(const std::string& path);
void save_mask(const std::string& path, const RegionMask& mask);
std::optional<RegionMask> load_record_mask(const Manifest& m, const ImageRecord& r);

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthAlterConfig {
    std::uint64_t seed = 1;
    /// The smoothing window is (2 * radius - 1) pixels square, so radius 1
    /// leaves pixels unchanged.
    int radius = 3;
    double region_fraction = 0.25;
    double amplitude = 0.03;

    void validate() const;
};

struct RetouchResult {
    Tensor<float> image;
    RegionMask mask;
};

/// Box-smooths a randomly placed rectangle covering region_fraction of the
/// image and overlays a faint sinusoidal texture there. Pixels outside the
/// rectangle are untouched.
RetouchResult synth_retouch(const Tensor<float>& image, const SynthAlterConfig& cfg);

/// Face-sized stand-in for an authentic photograph: smooth shading with a
/// few soft blobs plus sensor-like noise, quantized to 8 bits.
Tensor<float> synth_authentic(std::size_t height, std::size_t width, std::uint64_t seed);

struct CorpusConfig {
    std::size_t subjects = 100;  ///< one authentic and one retouched image each
    std::size_t height = 128;
    std::size_t width = 128;
    std::uint64_t seed = 1;
    /// 0 for a flat collection, otherwise subjects are spread over probes
    /// 1..probes with a different alteration strength per probe.
    int probes = 0;
    SynthAlterConfig alter;
    double male_fraction = 106.0 / 163.0;
};

/// Writes images/, masks/ and manifest.tsv under dir and returns the
/// manifest (with base_dir = dir).
Manifest generate_corpus(const std::string& dir, const CorpusConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation protocols

struct SplitConfig {
    int protocol = 1;
    std::uint64_t seed = 1;
    /// Fraction of the training units moved to the validation split.
    double val_fraction = 0.0;
};

Manifest split_protocol(Manifest m, const SplitConfig& cfg);

// ---------------------------------------------------------------------------
// Format harnesses

/// Re-stores every image as PNG under out_dir, preserving decoded pixels,
/// labels, probes and splits. Masks are referenced by absolute path.
Manifest convert_to_png(const Manifest& in, const std::string& out_dir);

/// Re-encodes every image as JPEG at the given quality under out_dir.
Manifest recompress_manifest(const Manifest& in, const std::string& out_dir, int quality = 50);

}  // namespace alterdetect

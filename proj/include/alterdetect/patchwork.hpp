#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "alterdetect/tensor.hpp"

namespace alterdetect {

enum class Label : std::uint8_t { kAuthentic = 0, kTampered = 1 };

std::string_view label_name(Label label);
/// Accepts "authentic"/"tampered" (also "0"/"1").
Label parse_label(std::string_view text);
inline int label_index(Label label) { return static_cast<int>(label); }

/// One non-overlapping tile of an image. Pixels are PxPx3, channel-last,
/// in [0, 1].
struct LabeledPatch {
    std::string image_id;
    std::size_t row = 0;
    std::size_t col = 0;
    Tensor<float> pixels;
    Label label = Label::kAuthentic;
};

struct PatchGrid {
    std::string image_id;
    std::size_t patch_size = 0;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<LabeledPatch> patches;  // row-major
};

/// Binary tamper mask at image resolution, row-major.
struct RegionMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    RegionMask() = default;
    RegionMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

    bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
    void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
    std::size_t count() const;
};

/// Tiles the image into floor(H/P) x floor(W/P) patches anchored at the top
/// left; the right and bottom remainders are dropped.
PatchGrid extract_patches(const Tensor<float>& image, std::size_t patch_size,
                          std::string image_id = {});

/// Every patch inherits the image label.
struct WholeImagePolicy {
    Label label = Label::kTampered;
};

/// A patch is tampered when the fraction of masked pixels inside it reaches
/// coverage_threshold. A threshold of 0 means any overlap at all.
struct RegionMaskPolicy {
    const RegionMask* mask = nullptr;
    double coverage_threshold = 0.0;
};

using LabelPolicy = std::variant<WholeImagePolicy, RegionMaskPolicy>;

PatchGrid label_patches(PatchGrid grid, const LabelPolicy& policy);

/// Inverse of extract_patches over the covered area.
Tensor<float> reassemble(const PatchGrid& grid);

}  // namespace alterdetect

#include "alterdetect/patchwork.hpp"

#include <algorithm>
#include <stdexcept>

namespace alterdetect {

std::string_view label_name(Label label) {
    return label == Label::kTampered ? "tampered" : "authentic";
}

Label parse_label(std::string_view text) {
    if (text == "authentic" || text == "0") return Label::kAuthentic;
    if (text == "tampered" || text == "1") return Label::kTampered;
    throw std::invalid_argument("unknown label '" + std::string(text) +
                                "' (expected authentic or tampered)");
}

std::size_t RegionMask::count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

PatchGrid extract_patches(const Tensor<float>& image, std::size_t patch_size, std::string image_id) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw ShapeError("extract_patches: expected HxWx3 image, got " + shape_str(image.shape()));
    }
    if (patch_size == 0) throw std::invalid_argument("extract_patches: patch size must be positive");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h < patch_size || w < patch_size) {
        throw ShapeError("extract_patches: image " + shape_str(image.shape()) +
                         " is smaller than patch size " + std::to_string(patch_size));
    }
    PatchGrid grid;
    grid.image_id = std::move(image_id);
    grid.patch_size = patch_size;
    grid.image_height = h;
    grid.image_width = w;
    grid.rows = h / patch_size;
    grid.cols = w / patch_size;
    grid.patches.reserve(grid.rows * grid.cols);
    const std::size_t row_len = patch_size * c;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t q = 0; q < grid.cols; ++q) {
            LabeledPatch patch;
            patch.image_id = grid.image_id;
            patch.row = r;
            patch.col = q;
            patch.pixels = Tensor<float>({patch_size, patch_size, c});
            for (std::size_t y = 0; y < patch_size; ++y) {
                const float* src = image.raw() + ((r * patch_size + y) * w + q * patch_size) * c;
                std::copy(src, src + row_len, patch.pixels.raw() + y * row_len);
            }
            grid.patches.push_back(std::move(patch));
        }
    }
    return grid;
}

PatchGrid label_patches(PatchGrid grid, const LabelPolicy& policy) {
    if (const auto* whole = std::get_if<WholeImagePolicy>(&policy)) {
        for (auto& p : grid.patches) p.label = whole->label;
        return grid;
    }
    const auto& region = std::get<RegionMaskPolicy>(policy);
    if (region.mask == nullptr) throw std::invalid_argument("label_patches: region policy without a mask");
    const RegionMask& mask = *region.mask;
    if (mask.height != grid.image_height || mask.width != grid.image_width) {
        throw ShapeError("label_patches: mask " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " does not match image " +
                         std::to_string(grid.image_height) + "x" + std::to_string(grid.image_width));
    }
    if (!(region.coverage_threshold >= 0.0 && region.coverage_threshold <= 1.0)) {
        throw std::invalid_argument("label_patches: coverage threshold must lie in [0, 1]");
    }
    const std::size_t p = grid.patch_size;
    const double area = static_cast<double>(p * p);
    for (auto& patch : grid.patches) {
        std::size_t hits = 0;
        for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x) hits += mask.at(patch.row * p + y, patch.col * p + x) ? 1 : 0;
        const double fraction = static_cast<double>(hits) / area;
        const bool tampered = region.coverage_threshold == 0.0 ? hits > 0 : fraction >= region.coverage_threshold;
        patch.label = tampered ? Label::kTampered : Label::kAuthentic;
    }
    return grid;
}

Tensor<float> reassemble(const PatchGrid& grid) {
    if (grid.rows == 0 || grid.cols == 0 || grid.patches.size() != grid.rows * grid.cols) {
        throw std::invalid_argument("reassemble: grid has " + std::to_string(grid.patches.size()) +
                                    " patches, expected " + std::to_string(grid.rows * grid.cols));
    }
    const std::size_t p = grid.patch_size;
    const std::size_t c = grid.patches.front().pixels.dim(2);
    const std::size_t w = grid.cols * p;
    Tensor<float> image({grid.rows * p, w, c});
    std::vector<bool> seen(grid.rows * grid.cols, false);
    for (const auto& patch : grid.patches) {
        if (patch.pixels.shape() != Shape{p, p, c} || patch.row >= grid.rows || patch.col >= grid.cols) {
            throw std::invalid_argument("reassemble: patch at (" + std::to_string(patch.row) + "," +
                                        std::to_string(patch.col) + ") does not fit the grid");
        }
        if (seen[patch.row * grid.cols + patch.col]) {
            throw std::invalid_argument("reassemble: duplicate patch at (" + std::to_string(patch.row) +
                                        "," + std::to_string(patch.col) + ")");
        }
        seen[patch.row * grid.cols + patch.col] = true;
        for (std::size_t y = 0; y < p; ++y) {
            const float* src = patch.pixels.raw() + y * p * c;
            std::copy(src, src + p * c, image.raw() + ((patch.row * p + y) * w + patch.col * p) * c);
        }
    }
    return image;
}

}  // namespace alterdetect

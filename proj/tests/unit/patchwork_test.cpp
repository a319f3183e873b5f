#include <gtest/gtest.h>

#include "alterdetect/patchwork.hpp"
#include "alterdetect/random.hpp"

using namespace alterdetect;

namespace {

Tensor<float> random_image(std::size_t h, std::size_t w, Rng& rng) {
    Tensor<float> img({h, w, 3});
    for (auto& v : img.data()) v = static_cast<float>(rng.below(256)) / 255.0f;
    return img;
}

// Pixel-count oracle: tampered pixels inside the tile at (r, c).
std::size_t tile_hits(const RegionMask& m, std::size_t r, std::size_t c, std::size_t p) {
    std::size_t hits = 0;
    for (std::size_t y = r * p; y < (r + 1) * p; ++y)
        for (std::size_t x = c * p; x < (c + 1) * p; ++x) hits += m.at(y, x);
    return hits;
}

}  // namespace

TEST(Extract, SixteenTilesFrom256) {
    Rng rng(1);
    auto g = extract_patches(random_image(256, 256, rng), 64, "img");
    EXPECT_EQ(g.rows, 4u);
    EXPECT_EQ(g.cols, 4u);
    ASSERT_EQ(g.patches.size(), 16u);
    EXPECT_EQ(g.patches[5].row, 1u);
    EXPECT_EQ(g.patches[5].col, 1u);
    EXPECT_EQ(g.patches[5].image_id, "img");
    EXPECT_EQ(g.patches[0].pixels.shape(), (Shape{64, 64, 3}));
}

TEST(Extract, SinglePatchEqualsImage) {
    Rng rng(2);
    auto img = random_image(128, 128, rng);
    auto g = extract_patches(img, 128);
    ASSERT_EQ(g.patches.size(), 1u);
    EXPECT_EQ(g.patches[0].pixels, img);
    EXPECT_EQ(reassemble(g), img);
}

TEST(Extract, RemainderCropped) {
    Rng rng(3);
    auto img = random_image(130, 70, rng);
    auto g = extract_patches(img, 64);
    EXPECT_EQ(g.rows, 2u);
    EXPECT_EQ(g.cols, 1u);
    auto back = reassemble(g);
    ASSERT_EQ(back.shape(), (Shape{128, 64, 3}));
    for (std::size_t y = 0; y < 128; ++y)
        for (std::size_t x = 0; x < 64; ++x)
            for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(back[(y * 64 + x) * 3 + c], img[(y * 70 + x) * 3 + c]);
}

TEST(Extract, RejectsSmallImagesAndBadShapes) {
    Rng rng(4);
    EXPECT_THROW(extract_patches(random_image(63, 200, rng), 64), std::invalid_argument);
    EXPECT_THROW(extract_patches(Tensor<float>({64, 64, 1}), 64), std::invalid_argument);
    EXPECT_THROW(extract_patches(random_image(64, 64, rng), 0), std::invalid_argument);
}

TEST(Extract, CountFormulaOverRandomSizes) {
    Rng rng(5);
    for (int t = 0; t < 60; ++t) {
        const std::size_t p = rng.below(2) ? 64 : 128;
        const std::size_t h = p + rng.below(300), w = p + rng.below(300);
        auto g = extract_patches(Tensor<float>({h, w, 3}), p);
        EXPECT_EQ(g.patches.size(), (h / p) * (w / p)) << h << "x" << w << " P=" << p;
    }
}

TEST(Extract, DeterministicOrdering) {
    Rng rng(6);
    auto img = random_image(192, 256, rng);
    auto a = extract_patches(img, 64), b = extract_patches(img, 64);
    ASSERT_EQ(a.patches.size(), b.patches.size());
    for (std::size_t i = 0; i < a.patches.size(); ++i) {
        EXPECT_EQ(a.patches[i].pixels, b.patches[i].pixels);
        EXPECT_EQ(a.patches[i].row * a.cols + a.patches[i].col, i);
    }
}

TEST(Reassemble, RoundTripOverHundredImages) {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const std::size_t p = rng.below(2) ? 64 : 128;
        const std::size_t h = p * (1 + rng.below(3)), w = p * (1 + rng.below(3));
        auto img = random_image(h, w, rng);
        ASSERT_EQ(reassemble(extract_patches(img, p)), img) << "image " << t;
    }
}

TEST(Reassemble, RejectsIncompleteGrid) {
    Rng rng(8);
    auto g = extract_patches(random_image(128, 128, rng), 64);
    g.patches.pop_back();
    EXPECT_THROW(reassemble(g), std::invalid_argument);
    auto dup = extract_patches(random_image(128, 128, rng), 64);
    dup.patches[3].row = 0;
    dup.patches[3].col = 0;
    EXPECT_THROW(reassemble(dup), std::invalid_argument);
}

TEST(Label, WholeImagePolicy) {
    auto g = label_patches(extract_patches(Tensor<float>({256, 128, 3}), 64), WholeImagePolicy{Label::kTampered});
    for (const auto& p : g.patches) EXPECT_EQ(p.label, Label::kTampered);
    g = label_patches(g, WholeImagePolicy{Label::kAuthentic});
    for (const auto& p : g.patches) EXPECT_EQ(p.label, Label::kAuthentic);
}

TEST(Label, EmptyMaskIsAuthentic) {
    RegionMask m(256, 256);
    auto g = label_patches(extract_patches(Tensor<float>({256, 256, 3}), 64), RegionMaskPolicy{&m, 0.0});
    for (const auto& p : g.patches) EXPECT_EQ(p.label, Label::kAuthentic);
}

TEST(Label, MaskOnOneTileMarksOnlyThatTile) {
    RegionMask m(256, 256);
    for (std::size_t y = 64; y < 128; ++y)
        for (std::size_t x = 128; x < 192; ++x) m.set(y, x);
    auto g = label_patches(extract_patches(Tensor<float>({256, 256, 3}), 64), RegionMaskPolicy{&m, 0.0});
    for (const auto& p : g.patches)
        EXPECT_EQ(p.label, (p.row == 1 && p.col == 2) ? Label::kTampered : Label::kAuthentic);
}

TEST(Label, MaskDimensionMismatchRejected) {
    RegionMask m(128, 256);
    EXPECT_THROW(label_patches(extract_patches(Tensor<float>({256, 256, 3}), 64), RegionMaskPolicy{&m, 0.0}),
                 std::invalid_argument);
    EXPECT_THROW(label_patches(extract_patches(Tensor<float>({256, 256, 3}), 64), RegionMaskPolicy{nullptr, 0.0}),
                 std::invalid_argument);
}

TEST(Label, RandomMasksMatchPixelCountOracle) {
    Rng rng(9);
    for (int t = 0; t < 30; ++t) {
        const std::size_t h = 64 * (1 + rng.below(4)) + rng.below(40), w = 64 * (1 + rng.below(4)) + rng.below(40);
        RegionMask m(h, w);
        // A few rectangles plus scattered pixels.
        for (int r = 0; r < 3; ++r) {
            const std::size_t y0 = rng.below(h), x0 = rng.below(w);
            const std::size_t y1 = std::min(h, y0 + 1 + rng.below(80)), x1 = std::min(w, x0 + 1 + rng.below(80));
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) m.set(y, x);
        }
        for (int s = 0; s < 20; ++s) m.set(rng.below(h), rng.below(w));
        const double thr = rng.below(3) == 0 ? 0.0 : rng.uniform();
        auto g = label_patches(extract_patches(Tensor<float>({h, w, 3}), 64), RegionMaskPolicy{&m, thr});
        for (const auto& p : g.patches) {
            const std::size_t hits = tile_hits(m, p.row, p.col, 64);
            const bool tampered = thr == 0.0 ? hits > 0 : static_cast<double>(hits) / (64.0 * 64.0) >= thr;
            ASSERT_EQ(p.label == Label::kTampered, tampered) << "t=" << t << " thr=" << thr;
        }
    }
}

TEST(Label, TamperedSetMonotoneInThreshold) {
    Rng rng(10);
    RegionMask m(256, 256);
    for (std::size_t i = 0; i < 20000; ++i) m.set(rng.below(256), rng.below(256));
    auto grid = extract_patches(Tensor<float>({256, 256, 3}), 64);
    std::vector<bool> prev(grid.patches.size(), true);
    for (double thr : {0.0, 0.05, 0.1, 0.2, 0.25, 0.3, 0.5, 0.9, 1.0}) {
        auto g = label_patches(grid, RegionMaskPolicy{&m, thr});
        for (std::size_t i = 0; i < g.patches.size(); ++i) {
            const bool t = g.patches[i].label == Label::kTampered;
            EXPECT_TRUE(!t || prev[i]) << "patch " << i << " became tampered at " << thr;
            prev[i] = t;
        }
    }
}

TEST(Label, NameParsing) {
    EXPECT_EQ(parse_label("tampered"), Label::kTampered);
    EXPECT_EQ(parse_label("0"), Label::kAuthentic);
    EXPECT_EQ(label_name(Label::kAuthentic), "authentic");
    EXPECT_THROW(parse_label("fake"), std::invalid_argument);
}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ossod/geometry.hpp"

namespace ossod {

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    bool operator==(const Rgb&) const = default;
};

// Integer pixel rectangle (x, y at top-left; w, h in pixels).
struct PixelRect {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool operator==(const PixelRect&) const = default;
};

class RasterImage {
  public:
    RasterImage() = default;
    RasterImage(int width, int height, Rgb fill = Rgb{});

    int width() const { return width_; }
    int height() const { return height_; }
    bool empty() const { return pixels_.empty(); }

    Rgb& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
    const Rgb& at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

    const std::vector<Rgb>& pixels() const { return pixels_; }
    std::vector<Rgb>& pixels() { return pixels_; }

    bool operator==(const RasterImage&) const = default;

  private:
    int width_ = 0;
    int height_ = 0;
    std::vector<Rgb> pixels_;
};

// Binary PPM (P6, maxval 255). Header is written as "P6\n<w> <h>\n255\n"
// followed by rows of RGB triples; load accepts exactly that form (plus
// arbitrary whitespace between header tokens, per the format).
RasterImage load_ppm(const std::filesystem::path& path);
void save_ppm(const RasterImage& image, const std::filesystem::path& path);

// Rect must lie fully inside the image and have positive size.
RasterImage crop(const RasterImage& image, const PixelRect& rect);

// Alpha blend of fg over bg at (origin_x, origin_y):
//   out = round(beta * fg + (1 - beta) * bg)  per channel,
// rounding half away from zero. fg must fit inside bg; beta in [0, 1].
RasterImage blend_region(const RasterImage& bg, const RasterImage& fg, int origin_x,
                         int origin_y, double beta);

RasterImage flip_horizontal(const RasterImage& image);

enum class AugmentationKind { weak, strong };

// A fully sampled augmentation. "weak" is geometry only (possible horizontal
// flip); "strong" adds per-channel multiplicative color jitter and an
// optional cutout. The cutout rectangle is expressed in the output frame
// (i.e. after any flip), and pipeline order is flip -> jitter -> cutout.
struct AugmentationSpec {
    AugmentationKind kind = AugmentationKind::weak;
    bool flip = false;
    std::array<double, 3> jitter_scale{1.0, 1.0, 1.0};
    std::optional<PixelRect> cutout;

    void validate(int width, int height) const;
};

// Draws the stochastic parameters of an augmentation for one image.
AugmentationSpec sample_augmentation(AugmentationKind kind, std::uint64_t seed, int width,
                                     int height);

// Invertible box mapping induced by the geometric part of an augmentation.
// Color jitter and cutout do not move coordinates, so only the flip matters.
struct CoordinateMap {
    bool flipped = false;
    int width = 0;

    Box map_box(const Box& b) const;    // original frame -> augmented frame
    Box unmap_box(const Box& b) const;  // augmented frame -> original frame
};

struct AugmentedImage {
    RasterImage image;
    CoordinateMap map;
};

AugmentedImage apply_augmentation(const RasterImage& image, const AugmentationSpec& spec);

}  // namespace ossod

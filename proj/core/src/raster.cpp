#include "ossod/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "ossod/errors.hpp"
#include "ossod/rng.hpp"

namespace ossod {

namespace {

constexpr int kMaxDimension = 1 << 15;  // guards against absurd headers

// Reads one whitespace-delimited non-negative integer from a P6 header.
int read_header_int(std::istream& in, const char* what) {
    int ch = in.get();
    while (ch != EOF && std::isspace(ch)) ch = in.get();
    require(ch != EOF, errc::parse, std::string("ppm: truncated header before ") + what);
    require(std::isdigit(ch), errc::parse, std::string("ppm: expected digit in ") + what);
    long value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        require(value <= kMaxDimension * 4L, errc::parse, std::string("ppm: oversized ") + what);
        ch = in.get();
    }
    require(ch == EOF || std::isspace(ch), errc::parse,
            std::string("ppm: junk after ") + what);
    return static_cast<int>(value);
}

std::uint8_t blend_channel(std::uint8_t fg, std::uint8_t bg, double beta) {
    // lround rounds half away from zero; the convex combination of values in
    // [0, 255] stays in range, so no clamp is needed.
    return static_cast<std::uint8_t>(std::lround(beta * fg + (1.0 - beta) * bg));
}

std::uint8_t jitter_channel(std::uint8_t v, double scale) {
    const long out = std::lround(scale * v);
    return static_cast<std::uint8_t>(std::clamp(out, 0L, 255L));
}

}  // namespace

RasterImage::RasterImage(int width, int height, Rgb fill) : width_(width), height_(height) {
    require(width > 0 && height > 0, errc::validation, "image dimensions must be positive");
    require(width <= kMaxDimension && height <= kMaxDimension, errc::validation,
            "image dimensions too large");
    pixels_.assign(static_cast<std::size_t>(width) * height, fill);
}

RasterImage load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), errc::io, "ppm: cannot open " + path.string());

    char magic[2] = {0, 0};
    in.read(magic, 2);
    require(in.gcount() == 2 && magic[0] == 'P' && magic[1] == '6', errc::parse,
            "ppm: not a P6 file: " + path.string());

    const int width = read_header_int(in, "width");
    const int height = read_header_int(in, "height");
    const int maxval = read_header_int(in, "maxval");
    require(width > 0 && height > 0, errc::parse, "ppm: non-positive dimensions");
    require(width <= kMaxDimension && height <= kMaxDimension, errc::parse,
            "ppm: dimensions too large");
    require(maxval == 255, errc::parse, "ppm: only maxval 255 is supported");
    // read_header_int consumed exactly one whitespace byte after maxval (the
    // header/payload separator); pixel data starts here.

    RasterImage img(width, height);
    const std::size_t payload = static_cast<std::size_t>(width) * height * 3;
    std::vector<char> raw(payload);
    in.read(raw.data(), static_cast<std::streamsize>(payload));
    require(static_cast<std::size_t>(in.gcount()) == payload, errc::parse,
            "ppm: truncated pixel data in " + path.string());
    in.get();
    require(in.eof(), errc::parse, "ppm: trailing bytes after pixel data in " + path.string());

    for (std::size_t i = 0; i < img.pixels().size(); ++i) {
        img.pixels()[i] = Rgb{static_cast<std::uint8_t>(raw[i * 3]),
                              static_cast<std::uint8_t>(raw[i * 3 + 1]),
                              static_cast<std::uint8_t>(raw[i * 3 + 2])};
    }
    return img;
}

void save_ppm(const RasterImage& image, const std::filesystem::path& path) {
    require(!image.empty(), errc::validation, "ppm: refusing to save an empty image");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), errc::io, "ppm: cannot open for write: " + path.string());

    out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
    std::vector<char> raw;
    raw.reserve(image.pixels().size() * 3);
    for (const Rgb& p : image.pixels()) {
        raw.push_back(static_cast<char>(p.r));
        raw.push_back(static_cast<char>(p.g));
        raw.push_back(static_cast<char>(p.b));
    }
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
    out.flush();
    require(out.good(), errc::io, "ppm: write failed: " + path.string());
}

RasterImage crop(const RasterImage& image, const PixelRect& rect) {
    require(rect.w > 0 && rect.h > 0, errc::validation, "crop: rect must have positive size");
    require(rect.x >= 0 && rect.y >= 0 && rect.x + rect.w <= image.width() &&
                rect.y + rect.h <= image.height(),
            errc::validation, "crop: rect exceeds image bounds");
    RasterImage out(rect.w, rect.h);
    for (int y = 0; y < rect.h; ++y) {
        for (int x = 0; x < rect.w; ++x) {
            out.at(x, y) = image.at(rect.x + x, rect.y + y);
        }
    }
    return out;
}

RasterImage blend_region(const RasterImage& bg, const RasterImage& fg, int origin_x,
                         int origin_y, double beta) {
    require(beta >= 0.0 && beta <= 1.0, errc::validation, "blend: beta must be in [0, 1]");
    require(origin_x >= 0 && origin_y >= 0 && origin_x + fg.width() <= bg.width() &&
                origin_y + fg.height() <= bg.height(),
            errc::validation, "blend: foreground exceeds background bounds");
    RasterImage out = bg;
    for (int y = 0; y < fg.height(); ++y) {
        for (int x = 0; x < fg.width(); ++x) {
            const Rgb& f = fg.at(x, y);
            const Rgb& b = bg.at(origin_x + x, origin_y + y);
            out.at(origin_x + x, origin_y + y) = Rgb{blend_channel(f.r, b.r, beta),
                                                     blend_channel(f.g, b.g, beta),
                                                     blend_channel(f.b, b.b, beta)};
        }
    }
    return out;
}

RasterImage flip_horizontal(const RasterImage& image) {
    RasterImage out(image.width(), image.height());
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            out.at(image.width() - 1 - x, y) = image.at(x, y);
        }
    }
    return out;
}

void AugmentationSpec::validate(int width, int height) const {
    if (kind == AugmentationKind::weak) {
        require(jitter_scale == std::array<double, 3>{1.0, 1.0, 1.0}, errc::validation,
                "augmentation: weak spec cannot carry color jitter");
        require(!cutout.has_value(), errc::validation,
                "augmentation: weak spec cannot carry a cutout");
    }
    for (double s : jitter_scale) {
        require(s > 0.0, errc::validation, "augmentation: jitter scale must be positive");
    }
    if (cutout) {
        require(cutout->w > 0 && cutout->h > 0, errc::validation,
                "augmentation: cutout must have positive size");
        require(cutout->x >= 0 && cutout->y >= 0 && cutout->x + cutout->w <= width &&
                    cutout->y + cutout->h <= height,
                errc::validation, "augmentation: cutout exceeds image bounds");
    }
}

AugmentationSpec sample_augmentation(AugmentationKind kind, std::uint64_t seed, int width,
                                     int height) {
    require(width > 0 && height > 0, errc::validation,
            "augmentation: image dimensions must be positive");
    Rng rng(mix_seed(seed));
    AugmentationSpec spec;
    spec.kind = kind;
    spec.flip = rng.chance(0.5);
    if (kind == AugmentationKind::strong) {
        for (double& s : spec.jitter_scale) {
            s = rng.range_real(0.7, 1.3);
        }
        if (rng.chance(0.5)) {
            // Cutout up to a quarter of each dimension, placed fully inside.
            const int cw = rng.range_int(1, std::max(1, width / 4));
            const int ch = rng.range_int(1, std::max(1, height / 4));
            const int cx = rng.range_int(0, width - cw);
            const int cy = rng.range_int(0, height - ch);
            spec.cutout = PixelRect{cx, cy, cw, ch};
        }
    }
    return spec;
}

Box CoordinateMap::map_box(const Box& b) const {
    if (!flipped) return b;
    return Box{static_cast<double>(width) - b.x - b.w, b.y, b.w, b.h};
}

Box CoordinateMap::unmap_box(const Box& b) const {
    // Horizontal flip is an involution, so the inverse is the same reflection.
    return map_box(b);
}

AugmentedImage apply_augmentation(const RasterImage& image, const AugmentationSpec& spec) {
    spec.validate(image.width(), image.height());
    AugmentedImage out;
    out.map = CoordinateMap{spec.flip, image.width()};
    out.image = spec.flip ? flip_horizontal(image) : image;
    if (spec.jitter_scale != std::array<double, 3>{1.0, 1.0, 1.0}) {
        for (Rgb& p : out.image.pixels()) {
            p = Rgb{jitter_channel(p.r, spec.jitter_scale[0]),
                    jitter_channel(p.g, spec.jitter_scale[1]),
                    jitter_channel(p.b, spec.jitter_scale[2])};
        }
    }
    if (spec.cutout) {
        for (int y = spec.cutout->y; y < spec.cutout->y + spec.cutout->h; ++y) {
            for (int x = spec.cutout->x; x < spec.cutout->x + spec.cutout->w; ++x) {
                out.image.at(x, y) = Rgb{0, 0, 0};
            }
        }
    }
    return out;
}

}  // namespace ossod

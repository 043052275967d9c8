#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "ossod/annotations.hpp"
#include "ossod/raster.hpp"

namespace ossod {

// Resolves an image id to its pixels. Implementations may return references
// into a cache; the reference must stay valid for the duration of the call
// receiving the provider.
using ImageProvider = std::function<const RasterImage&(int image_id)>;

// One foreground crop extracted from a labeled image.
struct ForegroundSegment {
    RasterImage crop;
    int category_id = 0;       // known class (>= 1)
    int source_image_id = 0;
    Box source_bbox;           // where the crop came from

    bool operator==(const ForegroundSegment&) const = default;
};

// Per-class foreground crop collections plus the balancing arithmetic:
// f_target is the mean count over classes that have at least one segment,
// and alpha_c = f_target / f_c is the per-class resampling factor.
struct ForegroundLibrary {
    std::map<int, std::vector<ForegroundSegment>> segments_by_class;

    std::map<int, std::int64_t> frequencies() const;
    double f_target() const;                 // 0 when the library is empty
    std::int64_t target_count() const;       // round(f_target), half away from zero
    std::map<int, double> alpha() const;     // classes with f_c > 0 only
    std::size_t total_segments() const;
};

// Extracts one segment per known-class ground-truth annotation. Boxes are
// snapped to integer rects by rounding each coordinate; a rect falling
// outside its image is an error. Unknown-tagged (id 0) annotations carry no
// class evidence and are skipped.
ForegroundLibrary build_library(const AnnotationSet& labeled, const ImageProvider& images);

// Resamples every class to exactly round(f_target) segments: classes below
// target keep all originals and add uniformly-drawn duplicates (each
// horizontally flipped with probability 1/2); classes above target are
// uniformly subsampled without replacement (original order preserved).
// Deterministic given seed; per-class draws use independent substreams so
// class order cannot leak randomness across classes.
ForegroundLibrary balance_library(const ForegroundLibrary& lib, std::uint64_t seed);

// Directory persistence: manifest.json listing {file, category_id,
// source_image_id, source_bbox} per segment plus one PPM file per segment.
void save_library(const ForegroundLibrary& lib, const std::filesystem::path& dir);
ForegroundLibrary load_library(const std::filesystem::path& dir);

struct SynthesisConfig {
    double beta = 0.5;              // foreground weight in the alpha blend
    double synthetic_score = 0.8;   // confidence stamped on synthetic labels
    int placements_per_image = 3;   // segments grouped onto one target image
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthesisResult {
    // Synthetic annotations only (score == synthetic_score); images and
    // categories mirror the unlabeled set so the result merges cleanly.
    AnnotationSet annotations;
    // Composited pixels for every image that received at least one paste.
    std::map<int, RasterImage> images;
    int skipped_segments = 0;  // segments that fit inside no unlabeled image
};

// Pastes balanced segments into unlabeled images: segments are taken in
// class-id order, grouped placements_per_image at a time onto one randomly
// chosen image, and each placed at a uniformly random position where it fits
// entirely. A segment too large for its group's image falls back to a random
// image that can hold it, and is skipped (counted) if none can. Blending is
// blend_region with cfg.beta; every placement emits one annotation with the
// segment's category and score cfg.synthetic_score. Deterministic given
// cfg.seed; per-segment RNG streams are derived from (seed, segment index).
SynthesisResult synthesize(const ForegroundLibrary& balanced, const AnnotationSet& unlabeled,
                           const ImageProvider& images, const SynthesisConfig& cfg);

}  // namespace ossod

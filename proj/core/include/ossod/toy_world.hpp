#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include "ossod/annotations.hpp"
#include "ossod/cce.hpp"
#include "ossod/ema.hpp"
#include "ossod/raster.hpp"

namespace ossod {

// Synthetic "shape world": colored shapes on a dark noisy background, with a
// long-tailed class distribution and unknown (open-set) classes restricted
// to the unlabeled and test splits.
struct WorldConfig {
    int image_width = 96;
    int image_height = 72;
    int known_classes = 6;    // K, ids 1..K
    int unknown_classes = 2;  // U, all carried as category id 0 in files
    double imbalance_ratio = 8.0;  // known class c count ∝ imbalance_ratio^{-(c-1)}
    int min_objects_per_image = 1;
    int max_objects_per_image = 4;
    int labeled_images = 150;
    int unlabeled_images = 1300;
    int test_images = 400;
    double noise_level = 0.5;  // in [0, 1]; drives pixel noise and the share of
                               // sub-detectable "tiny" objects
    std::uint64_t seed = 1;

    void validate() const;
};

struct World {
    AnnotationSet labeled;    // ground truth, known classes only
    AnnotationSet unlabeled;  // image table only (annotations empty)
    AnnotationSet test;       // ground truth; unknown objects carry id 0
    std::map<int, RasterImage> images;  // pixels for every image, all splits
};

// Deterministic given cfg.seed. Unknown-class objects appear only in the
// unlabeled and test splits; known-class counts follow the imbalance law
// (small per-class floors keep every known class learnable at desk scale).
// Fails with a validation error when objects cannot be packed WITHOUT
// overlap into the configured image size.
World generate_world(const WorldConfig& cfg);

// Largest-remainder apportionment of `total` into len(weights) buckets with
// per-bucket minimum floors. Exposed for direct verification of the
// imbalance law at scales where the floors are negligible.
std::vector<std::int64_t> apportion_counts(std::int64_t total, const std::vector<double>& weights,
                                           const std::vector<std::int64_t>& floors);

// An ImageProvider view over a world's pixel map (or any id->image map).
ImageProvider make_provider(const std::map<int, RasterImage>& images);

// Feature vector of a proposal/ground-truth crop: background-subtracted,
// brightness-normalized mean foreground color (3), aspect ratio, and fill
// ratio (fraction of pixels above the background threshold), the last two
// scaled to be commensurate with the color channels. Subtracting the local
// background estimate (mean of below-threshold pixels) before normalizing
// keeps the color stable under both brightness changes and alpha
// compositing onto the dark background, so pasted crops stay on the same
// feature manifold as originals.
std::array<double, 5> features_from_crop(const RasterImage& crop, double background_threshold);

// Prototype (nearest-centroid) detector: connected-component proposals
// classified by feature distance to per-class centroids. Plays both the
// supervised teacher and, with open_set=true, the open-set detector.
struct DetectorModel {
    std::map<int, std::array<double, 5>> centroids;  // by known category id
    double temperature = 10.0;
    double open_set_distance = 1.0;  // δ > 0
    double background_threshold = 70.0;
    int min_component_area = 64;

    std::vector<int> class_ids() const;  // ascending

    // Flat view of the trainable parameters (centroids then δ) for EMA; the
    // layout tag encodes the class ids so incompatible models cannot mix.
    ParamVector params() const;
    DetectorModel with_params(const ParamVector& p) const;

    void validate() const;
};

struct DetectionResult {
    Box box;
    std::vector<double> class_scores;  // softmax over known classes, id order
    int category_id = 0;               // argmax class, or 0 when rejected
    double confidence = 0.0;
};

// Centroids from ground-truth crop features per class; δ = margin × the
// maximum distance of any training crop from its class centroid.
// Annotations smaller than the proposal stage's minimum component area are
// sub-detectable and skipped (they are evaluation burden, not trainable
// evidence); errors when some known class has no usable annotation.
DetectorModel fit_supervised(const AnnotationSet& labeled, const ImageProvider& images);

// Proposals = connected components (4-connectivity) of pixels brighter than
// background_threshold, discarded below min_component_area, scanned in
// row-major order. Scores = softmax(-distance/temperature). With open_set,
// a proposal farther than δ from every centroid is tagged category 0 with a
// rejection confidence that rises from 0 at d = δ and saturates within a
// fraction of δ beyond it.
std::vector<DetectionResult> predict(const DetectorModel& model, const RasterImage& image,
                                     bool open_set);

// Running-mean update: centroids of classes present in the batch move toward
// the batch per-class feature mean with a step proportional to weight. Crops
// farther than a fixed multiple of δ from their class's current centroid are
// outliers (occluded or contaminated) and do not count as presence. Known
// classes absent from the batch decay slightly toward the background
// statistic — the toy analogue of forgetting under shared-representation
// drift, which is what starves rare classes in the imbalanced regime.
// Unknown-tagged (id 0) and sub-detectable (below min_component_area)
// annotations are ignored entirely; a batch with no usable known annotations
// returns the model unchanged.
DetectorModel update_model(const DetectorModel& model, const AnnotationSet& batch,
                           const ImageProvider& images, double weight);

}  // namespace ossod

#pragma once

#include <map>

#include "ossod/annotations.hpp"
#include "ossod/metrics.hpp"

namespace ossod {

// Fusion of known-class pseudo-labels with unknown-tagged detections from an
// out-of-distribution detector head.
struct FusionConfig {
    double gamma = 1.5;                   // threshold sharpness
    double iou_gate = 0.7;                // strict overlap gate (IoU must exceed this)
    double base_unknown_threshold = 0.5;  // fallback when no class AP is available

    void validate() const;
};

// Dynamic per-class acceptance threshold derived from the supervised model's
// per-class AP:  T = clamp(exp(gamma * (ap - 1)), 0, 1).
// Well-trained classes (high AP) demand more confident unknown evidence.
double dynamic_threshold(double ap, double gamma);

struct ThresholdTable {
    std::map<int, double> per_class;  // known category id -> threshold
    double fallback = 0.5;            // used for boxes overlapping no known class
};

ThresholdTable build_threshold_table(const ApTable& ap, const FusionConfig& config);

// Appends qualifying unknown-tagged boxes to the known-class pseudo-label
// set. A candidate must carry category id 0 and a score; it qualifies when
// its score reaches the threshold of the known class it overlaps most
// (IoU strictly greater than config.iou_gate; IoU ties resolved toward the
// lower category id, then lower annotation id), or the fallback threshold
// when it overlaps no known box that strictly. Known annotations pass
// through byte-identical (ids included); accepted unknowns get fresh ids
// above the known maximum, and category id 0 ("unknown") is added to the
// output table if absent. The restriction of the result to known classes
// always equals the input known set.
AnnotationSet fuse(const AnnotationSet& known, const AnnotationSet& unknown,
                   const ThresholdTable& thresholds, const FusionConfig& config);

}  // namespace ossod

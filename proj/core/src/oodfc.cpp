#include "ossod/oodfc.hpp"

#include <algorithm>
#include <cmath>

#include "ossod/errors.hpp"
#include "ossod/geometry.hpp"

namespace ossod {

void FusionConfig::validate() const {
    require(gamma > 0.0, errc::config, "fusion: gamma must be > 0");
    require(iou_gate >= 0.0 && iou_gate < 1.0, errc::config,
            "fusion: iou_gate must be in [0, 1)");
    require(base_unknown_threshold >= 0.0 && base_unknown_threshold <= 1.0, errc::config,
            "fusion: base_unknown_threshold must be in [0, 1]");
}

double dynamic_threshold(double ap, double gamma) {
    require(gamma > 0.0, errc::validation, "dynamic_threshold: gamma must be > 0");
    require(ap >= 0.0 && ap <= 1.0, errc::validation, "dynamic_threshold: ap must be in [0, 1]");
    const double t = std::exp(gamma * (ap - 1.0));
    return std::clamp(t, 0.0, 1.0);
}

ThresholdTable build_threshold_table(const ApTable& ap, const FusionConfig& config) {
    config.validate();
    ThresholdTable table;
    table.fallback = config.base_unknown_threshold;
    for (const auto& [id, class_ap] : ap.per_class) {
        require(id != kUnknownCategoryId, errc::validation,
                "threshold table: AP table may not contain the unknown category");
        table.per_class[id] = dynamic_threshold(class_ap, config.gamma);
    }
    return table;
}

AnnotationSet fuse(const AnnotationSet& known, const AnnotationSet& unknown,
                   const ThresholdTable& thresholds, const FusionConfig& config) {
    config.validate();
    for (const Annotation& a : known.annotations) {
        require(a.category_id != kUnknownCategoryId, errc::validation,
                "fuse: known set contains unknown-tagged annotation " + std::to_string(a.id));
    }
    for (const Annotation& a : unknown.annotations) {
        require(a.category_id == kUnknownCategoryId, errc::validation,
                "fuse: unknown set contains known-class annotation " + std::to_string(a.id));
        require(a.score.has_value(), errc::validation,
                "fuse: unknown annotation " + std::to_string(a.id) + " lacks a score");
    }

    AnnotationSet out = known;
    if (!out.find_category(kUnknownCategoryId)) {
        out.categories.push_back({kUnknownCategoryId, "unknown"});
    }

    int next_id = 1;
    for (const Annotation& a : known.annotations) next_id = std::max(next_id, a.id + 1);

    // Process candidates in ascending annotation id so fresh ids are stable.
    std::vector<const Annotation*> candidates;
    for (const Annotation& a : unknown.annotations) candidates.push_back(&a);
    std::sort(candidates.begin(), candidates.end(),
              [](const Annotation* x, const Annotation* y) { return x->id < y->id; });

    for (const Annotation* cand : candidates) {
        const Box cbox = box_from_bbox(cand->bbox);
        // Find the known box with the highest IoU strictly above the gate.
        // Ties: lower category id, then lower annotation id.
        double best_iou = config.iou_gate;
        const Annotation* best = nullptr;
        for (const Annotation& k : known.annotations) {
            if (k.image_id != cand->image_id) continue;
            const double v = iou(cbox, box_from_bbox(k.bbox));
            if (v > best_iou ||
                (best && v == best_iou &&
                 (k.category_id < best->category_id ||
                  (k.category_id == best->category_id && k.id < best->id)))) {
                best_iou = v;
                best = &k;
            }
        }
        double threshold = thresholds.fallback;
        if (best) {
            auto it = thresholds.per_class.find(best->category_id);
            if (it != thresholds.per_class.end()) threshold = it->second;
        }
        if (*cand->score >= threshold) {
            Annotation accepted = *cand;
            accepted.id = next_id++;
            out.annotations.push_back(accepted);
        }
    }
    return out;
}

}  // namespace ossod

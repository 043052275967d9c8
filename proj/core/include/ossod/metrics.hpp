#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ossod/annotations.hpp"

namespace ossod {

// Per-class average precision plus the mean over classes that have ground
// truth. Classes absent from the ground truth get no entry and do not dilute
// the mean; an empty table has map == 0.
struct ApTable {
    std::map<int, double> per_class;  // category id -> AP in [0, 1]
    double map = 0.0;

    static ApTable from_entries(std::map<int, double> entries);
};

// All-point interpolated average precision for one category at the given IoU
// threshold: detections are ranked by descending score (ties broken by lower
// annotation id, across all images), matched greedily per image against
// unmatched ground truth of the same category (highest IoU wins; IoU ties go
// to the lower-indexed ground-truth annotation), and AP is the area under
// the precision upper envelope over recall. Returns 0 when the category has
// no ground-truth instances.
double average_precision(const AnnotationSet& ground_truth, const AnnotationSet& predictions,
                         int category_id, double iou_thresh);

// AP per known category present in the ground truth (id >= 1 with at least
// one annotation), at IoU >= iou_thresh. Unknown-tagged entries (id 0) on
// either side are ignored. The two sets must agree on their known category
// tables; every prediction must carry a score.
ApTable evaluate(const AnnotationSet& ground_truth, const AnnotationSet& predictions,
                 double iou_thresh = 0.5);

// JSON report: {"per_class": {"<id>": ap, ...}, "map": m}. Round-trips
// exactly; parse errors distinguish malformed JSON from schema violations.
std::string ap_table_to_json(const ApTable& table);
ApTable ap_table_from_json(const std::string& text);
void save_ap_table(const ApTable& table, const std::filesystem::path& path);
ApTable load_ap_table(const std::filesystem::path& path);

}  // namespace ossod

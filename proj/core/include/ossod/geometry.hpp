#pragma once

#include <array>
#include <optional>
#include <vector>

namespace ossod {

// Axis-aligned box, [x, y, w, h] with w/h extending right/down.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const { return w * h; }
    bool positive() const { return w > 0.0 && h > 0.0; }

    bool operator==(const Box&) const = default;
};

Box box_from_bbox(const std::array<double, 4>& bbox);
std::array<double, 4> bbox_from_box(const Box& b);

// Intersection-over-union. Degenerate boxes (w <= 0 or h <= 0) have IoU 0
// with everything, including themselves.
double iou(const Box& a, const Box& b);

struct ScoredBox {
    Box box;
    double score = 0.0;
};

struct DetMatch {
    int det_index = -1;              // index into the detection list
    std::optional<int> gt_index;     // matched ground-truth index, if any
};

// Greedy one-to-one matching of detections to ground truth within a single
// image. Detections are processed in order of descending score (ties: lower
// index first — callers pass lists in annotation-id order) and each claims
// the unmatched ground-truth box of highest IoU, provided IoU >= iou_thresh
// (IoU ties: lowest ground-truth index). Result preserves detection list
// order; each gt index appears at most once.
std::vector<DetMatch> match_detections(const std::vector<Box>& ground_truth,
                                       const std::vector<ScoredBox>& detections,
                                       double iou_thresh);

}  // namespace ossod

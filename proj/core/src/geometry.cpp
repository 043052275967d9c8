#include "ossod/geometry.hpp"

#include <algorithm>
#include <numeric>

#include "ossod/errors.hpp"

namespace ossod {

Box box_from_bbox(const std::array<double, 4>& bbox) {
    return Box{bbox[0], bbox[1], bbox[2], bbox[3]};
}

std::array<double, 4> bbox_from_box(const Box& b) {
    return {b.x, b.y, b.w, b.h};
}

double iou(const Box& a, const Box& b) {
    if (!a.positive() || !b.positive()) return 0.0;
    const double ix = std::max(a.x, b.x);
    const double iy = std::max(a.y, b.y);
    const double ix2 = std::min(a.x + a.w, b.x + b.w);
    const double iy2 = std::min(a.y + a.h, b.y + b.h);
    const double iw = ix2 - ix;
    const double ih = iy2 - iy;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

std::vector<DetMatch> match_detections(const std::vector<Box>& ground_truth,
                                       const std::vector<ScoredBox>& detections,
                                       double iou_thresh) {
    require(iou_thresh > 0.0, errc::validation, "match_detections: iou_thresh must be > 0");

    std::vector<int> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return detections[a].score > detections[b].score;
    });

    std::vector<bool> gt_taken(ground_truth.size(), false);
    std::vector<DetMatch> result(detections.size());
    for (std::size_t i = 0; i < detections.size(); ++i) {
        result[i].det_index = static_cast<int>(i);
    }

    for (int di : order) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t gi = 0; gi < ground_truth.size(); ++gi) {
            if (gt_taken[gi]) continue;
            const double v = iou(detections[di].box, ground_truth[gi]);
            if (v > best) {  // strict: IoU ties keep the lowest gt index
                best = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0 && best >= iou_thresh) {
            gt_taken[best_gt] = true;
            result[di].gt_index = best_gt;
        }
    }
    return result;
}

}  // namespace ossod

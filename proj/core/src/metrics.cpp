#include "ossod/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "ossod/errors.hpp"
#include "ossod/geometry.hpp"

namespace ossod {

ApTable ApTable::from_entries(std::map<int, double> entries) {
    ApTable t;
    t.per_class = std::move(entries);
    if (!t.per_class.empty()) {
        double sum = 0.0;
        for (const auto& [id, ap] : t.per_class) sum += ap;
        t.map = sum / static_cast<double>(t.per_class.size());
    }
    return t;
}

double average_precision(const AnnotationSet& ground_truth, const AnnotationSet& predictions,
                         int category_id, double iou_thresh) {
    require(iou_thresh > 0.0 && iou_thresh <= 1.0, errc::validation,
            "average_precision: iou_thresh must be in (0, 1]");

    // Ground truth of this category, grouped by image.
    std::map<int, std::vector<Box>> gt_by_image;
    std::size_t n_gt = 0;
    for (const Annotation& a : ground_truth.annotations) {
        if (a.category_id != category_id) continue;
        gt_by_image[a.image_id].push_back(box_from_bbox(a.bbox));
        ++n_gt;
    }
    if (n_gt == 0) return 0.0;

    struct Det {
        int image_id;
        int ann_id;
        ScoredBox sb;
    };
    std::vector<Det> dets;
    for (const Annotation& a : predictions.annotations) {
        if (a.category_id != category_id) continue;
        require(a.score.has_value(), errc::validation,
                "average_precision: prediction " + std::to_string(a.id) + " lacks a score");
        dets.push_back({a.image_id, a.id, {box_from_bbox(a.bbox), *a.score}});
    }
    std::sort(dets.begin(), dets.end(), [](const Det& x, const Det& y) {
        if (x.sb.score != y.sb.score) return x.sb.score > y.sb.score;
        return x.ann_id < y.ann_id;
    });

    // Greedy matching in global rank order; per image this is exactly
    // match_detections' discipline since detections on different images
    // never compete for the same ground truth.
    std::map<int, std::vector<bool>> taken;
    for (const auto& [img, boxes] : gt_by_image) taken[img].assign(boxes.size(), false);

    std::vector<bool> is_tp(dets.size(), false);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        auto it = gt_by_image.find(dets[i].image_id);
        if (it == gt_by_image.end()) continue;
        std::vector<bool>& used = taken[dets[i].image_id];
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t gi = 0; gi < it->second.size(); ++gi) {
            if (used[gi]) continue;
            const double v = iou(dets[i].sb.box, it->second[gi]);
            if (v > best) {
                best = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0 && best >= iou_thresh) {
            used[best_gt] = true;
            is_tp[i] = true;
        }
    }

    // Precision/recall at every rank, then area under the precision upper
    // envelope (all-point interpolation).
    std::vector<double> precision(dets.size());
    std::vector<double> recall(dets.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (is_tp[i]) ++tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    for (std::size_t i = dets.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

ApTable evaluate(const AnnotationSet& ground_truth, const AnnotationSet& predictions,
                 double iou_thresh) {
    auto known_categories = [](const AnnotationSet& s) {
        std::vector<Category> c;
        for (const Category& cat : s.categories) {
            if (cat.id != kUnknownCategoryId) c.push_back(cat);
        }
        std::sort(c.begin(), c.end(), [](const Category& x, const Category& y) {
            return x.id < y.id;
        });
        return c;
    };
    require(known_categories(ground_truth) == known_categories(predictions), errc::validation,
            "evaluate: known category tables differ");

    std::map<int, double> entries;
    for (const Category& c : known_categories(ground_truth)) {
        bool has_gt = false;
        for (const Annotation& a : ground_truth.annotations) {
            if (a.category_id == c.id) {
                has_gt = true;
                break;
            }
        }
        if (!has_gt) continue;
        entries[c.id] = average_precision(ground_truth, predictions, c.id, iou_thresh);
    }
    return ApTable::from_entries(std::move(entries));
}

std::string ap_table_to_json(const ApTable& table) {
    nlohmann::json root;
    root["per_class"] = nlohmann::json::object();
    for (const auto& [id, ap] : table.per_class) {
        root["per_class"][std::to_string(id)] = ap;
    }
    root["map"] = table.map;
    return root.dump(2) + "\n";
}

ApTable ap_table_from_json(const std::string& text) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(errc::parse, std::string("ap table: malformed JSON: ") + e.what());
    }
    require(root.is_object(), errc::schema, "ap table: top level must be an object");
    auto pc = root.find("per_class");
    require(pc != root.end() && pc->is_object(), errc::schema,
            "ap table: missing 'per_class' object");
    ApTable table;
    for (auto it = pc->begin(); it != pc->end(); ++it) {
        int id = 0;
        try {
            std::size_t pos = 0;
            id = std::stoi(it.key(), &pos);
            require(pos == it.key().size(), errc::schema, "ap table: non-integer class key");
        } catch (const std::exception&) {
            fail(errc::schema, "ap table: non-integer class key '" + it.key() + "'");
        }
        require(it.value().is_number(), errc::schema, "ap table: AP values must be numbers");
        table.per_class[id] = it.value().get<double>();
    }
    auto mp = root.find("map");
    require(mp != root.end() && mp->is_number(), errc::schema,
            "ap table: missing numeric 'map'");
    table.map = mp->get<double>();
    return table;
}

void save_ap_table(const ApTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), errc::io, "ap table: cannot open for write: " + path.string());
    out << ap_table_to_json(table);
    out.flush();
    require(out.good(), errc::io, "ap table: write failed: " + path.string());
}

ApTable load_ap_table(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), errc::io, "ap table: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return ap_table_from_json(buf.str());
}

}  // namespace ossod

#include "ossod/harness.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <climits>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ossod/errors.hpp"
#include "ossod/geometry.hpp"
#include "ossod/rng.hpp"

namespace ossod {

namespace {

constexpr int kBatchImages = 16;      // student mini-batch size (images)
constexpr int kLossSampleImages = 24; // images sampled for loss diagnostics
constexpr double kScoreFloor = 1e-12; // cross-entropy clamp

std::vector<Box> boxes_of(const std::vector<Annotation>& anns) {
    std::vector<Box> out;
    out.reserve(anns.size());
    for (const Annotation& a : anns) out.push_back(box_from_bbox(a.bbox));
    return out;
}

std::vector<ScoredBox> scored_boxes_of(const std::vector<DetectionResult>& dets) {
    std::vector<ScoredBox> out;
    out.reserve(dets.size());
    for (const DetectionResult& d : dets) out.push_back({d.box, d.confidence});
    return out;
}

int class_index(const std::vector<int>& class_ids, int category_id) {
    const auto it = std::find(class_ids.begin(), class_ids.end(), category_id);
    require(it != class_ids.end(), errc::validation,
            "loss: category " + std::to_string(category_id) + " not among the model classes");
    return static_cast<int>(it - class_ids.begin());
}

}  // namespace

LossReport LossReport::assemble(double classification, double localization, double consistency,
                                double pseudo_label, double lambda) {
    LossReport r;
    r.classification = classification;
    r.localization = localization;
    r.supervised = classification + localization;
    r.consistency = consistency;
    r.pseudo_label = pseudo_label;
    r.unsupervised = consistency + pseudo_label;
    r.lambda = lambda;
    r.total = r.supervised + lambda * r.unsupervised;
    return r;
}

SupervisedLoss supervised_loss(const std::vector<DetectionResult>& detections,
                               const std::vector<Annotation>& ground_truth,
                               const std::vector<int>& class_ids, double iou_thresh) {
    SupervisedLoss out;
    std::vector<Annotation> usable;
    for (const Annotation& a : ground_truth) {
        if (a.category_id != kUnknownCategoryId) usable.push_back(a);
    }
    if (usable.empty()) return out;

    const std::vector<Box> gt_boxes = boxes_of(usable);
    const std::vector<DetMatch> matches =
        match_detections(gt_boxes, scored_boxes_of(detections), iou_thresh);

    std::vector<char> gt_matched(usable.size(), 0);
    std::int64_t matched = 0;
    for (const DetMatch& m : matches) {
        if (!m.gt_index) continue;
        const Annotation& gt = usable[static_cast<std::size_t>(*m.gt_index)];
        const DetectionResult& det = detections[static_cast<std::size_t>(m.det_index)];
        const int idx = class_index(class_ids, gt.category_id);
        const double p = std::max(kScoreFloor, det.class_scores[static_cast<std::size_t>(idx)]);
        out.classification += -std::log(p);
        out.localization += 1.0 - iou(det.box, gt_boxes[static_cast<std::size_t>(*m.gt_index)]);
        gt_matched[static_cast<std::size_t>(*m.gt_index)] = 1;
        ++matched;
    }
    for (char hit : gt_matched) {
        if (!hit) out.localization += 1.0;  // missed object: localization ceiling
    }
    if (matched > 0) out.classification /= static_cast<double>(matched);
    out.localization /= static_cast<double>(usable.size());
    return out;
}

double consistency_loss(const std::vector<DetectionResult>& preds_weak,
                        const std::vector<DetectionResult>& preds_strong,
                        const CoordinateMap& coord_map) {
    const std::vector<DetectionResult>& weak = preds_weak;
    const std::vector<DetectionResult>& strong = preds_strong;
    std::vector<Box> wb, sb;
    for (const DetectionResult& d : weak) wb.push_back(d.box);
    for (const DetectionResult& d : strong) sb.push_back(coord_map.unmap_box(d.box));

    struct Pair {
        double overlap;
        std::size_t w, s;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < wb.size(); ++i) {
        for (std::size_t j = 0; j < sb.size(); ++j) {
            const double v = iou(wb[i], sb[j]);
            if (v >= 0.5) pairs.push_back({v, i, j});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.overlap != b.overlap) return a.overlap > b.overlap;
        if (a.w != b.w) return a.w < b.w;
        return a.s < b.s;
    });

    std::vector<char> w_used(weak.size(), 0), s_used(strong.size(), 0);
    double total = 0.0;
    auto norm2 = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return s;
    };
    for (const Pair& p : pairs) {
        if (w_used[p.w] || s_used[p.s]) continue;
        w_used[p.w] = s_used[p.s] = 1;
        const std::vector<double>& a = weak[p.w].class_scores;
        const std::vector<double>& b = strong[p.s].class_scores;
        require(a.size() == b.size(), errc::validation,
                "consistency: score vectors of different lengths");
        for (std::size_t k = 0; k < a.size(); ++k) {
            const double d = a[k] - b[k];
            total += d * d;
        }
    }
    for (std::size_t i = 0; i < weak.size(); ++i) {
        if (!w_used[i]) total += norm2(weak[i].class_scores);
    }
    for (std::size_t j = 0; j < strong.size(); ++j) {
        if (!s_used[j]) total += norm2(strong[j].class_scores);
    }
    return total;
}

double pseudo_loss(const std::vector<DetectionResult>& student_preds,
                   const AnnotationSet& pseudo) {
    std::vector<int> class_ids;
    for (const Category& c : pseudo.categories) {
        if (c.id != kUnknownCategoryId) class_ids.push_back(c.id);
    }
    std::sort(class_ids.begin(), class_ids.end());
    std::vector<Annotation> known;
    for (const Annotation& a : pseudo.annotations) {
        if (a.category_id != kUnknownCategoryId) known.push_back(a);
    }
    if (known.empty()) return 0.0;
    const std::vector<Box> gt_boxes = boxes_of(known);
    const std::vector<DetMatch> matches =
        match_detections(gt_boxes, scored_boxes_of(student_preds), 0.5);
    double total = 0.0;
    std::int64_t matched = 0;
    for (const DetMatch& m : matches) {
        if (!m.gt_index) continue;
        const Annotation& gt = known[static_cast<std::size_t>(*m.gt_index)];
        const DetectionResult& det = student_preds[static_cast<std::size_t>(m.det_index)];
        const int idx = class_index(class_ids, gt.category_id);
        require(det.class_scores.size() == class_ids.size(), errc::validation,
                "pseudo loss: score vector length does not match the category table");
        total += -std::log(std::max(kScoreFloor, det.class_scores[static_cast<std::size_t>(idx)]));
        ++matched;
    }
    return matched > 0 ? total / static_cast<double>(matched) : 0.0;
}

// ---- configuration ------------------------------------------------------------

void RunConfig::validate() const {
    world.validate();
    require(iterations >= 0, errc::config, "config: iterations must be >= 0");
    require(lambda >= 0.0 && std::isfinite(lambda), errc::config,
            "config: lambda must be a finite nonnegative number");
    require(ema_alpha >= 0.0 && ema_alpha <= 1.0, errc::config,
            "config: ema_alpha must be in [0, 1]");
    require(pseudo_threshold >= 0.0 && pseudo_threshold <= 1.0, errc::config,
            "config: pseudo_threshold must be in [0, 1]");
    fusion.validate();
    SynthesisConfig syn = synthesis;
    syn.seed = 0;
    syn.validate();
}

namespace {

std::string trim(std::string s) {
    const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
    while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.pop_back();
    return s;
}

long long parse_ll(const std::string& key, const std::string& value) {
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    require(ec == std::errc() && ptr == value.data() + value.size(), errc::config,
            "config: key '" + key + "' expects an integer, got '" + value + "'");
    return out;
}

int parse_int(const std::string& key, const std::string& value) {
    const long long v = parse_ll(key, value);
    require(v >= INT_MIN && v <= INT_MAX, errc::config, "config: key '" + key + "' out of range");
    return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    require(ec == std::errc() && ptr == value.data() + value.size(), errc::config,
            "config: key '" + key + "' expects an unsigned integer, got '" + value + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        require(pos == value.size(), errc::config,
                "config: key '" + key + "' expects a number, got '" + value + "'");
        return v;
    } catch (const error&) {
        throw;
    } catch (const std::exception&) {
        fail(errc::config, "config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail(errc::config, "config: key '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        require(eq != std::string::npos, errc::config,
                "config: line " + std::to_string(line_no) + " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        require(!key.empty() && !value.empty(), errc::config,
                "config: line " + std::to_string(line_no) + " has an empty key or value");

        if (key == "world.image_width") cfg.world.image_width = parse_int(key, value);
        else if (key == "world.image_height") cfg.world.image_height = parse_int(key, value);
        else if (key == "world.known_classes") cfg.world.known_classes = parse_int(key, value);
        else if (key == "world.unknown_classes") cfg.world.unknown_classes = parse_int(key, value);
        else if (key == "world.imbalance_ratio") cfg.world.imbalance_ratio = parse_double(key, value);
        else if (key == "world.min_objects_per_image")
            cfg.world.min_objects_per_image = parse_int(key, value);
        else if (key == "world.max_objects_per_image")
            cfg.world.max_objects_per_image = parse_int(key, value);
        else if (key == "world.labeled_images") cfg.world.labeled_images = parse_int(key, value);
        else if (key == "world.unlabeled_images") cfg.world.unlabeled_images = parse_int(key, value);
        else if (key == "world.test_images") cfg.world.test_images = parse_int(key, value);
        else if (key == "world.noise_level") cfg.world.noise_level = parse_double(key, value);
        else if (key == "world.seed") cfg.world.seed = parse_u64(key, value);
        else if (key == "iterations") cfg.iterations = parse_int(key, value);
        else if (key == "lambda") cfg.lambda = parse_double(key, value);
        else if (key == "ema_alpha") cfg.ema_alpha = parse_double(key, value);
        else if (key == "pseudo_threshold") cfg.pseudo_threshold = parse_double(key, value);
        else if (key == "enable_cce") cfg.enable_cce = parse_bool(key, value);
        else if (key == "enable_oodfc") cfg.enable_oodfc = parse_bool(key, value);
        else if (key == "fusion.gamma") cfg.fusion.gamma = parse_double(key, value);
        else if (key == "fusion.iou_gate") cfg.fusion.iou_gate = parse_double(key, value);
        else if (key == "fusion.base_threshold")
            cfg.fusion.base_unknown_threshold = parse_double(key, value);
        else if (key == "synthesis.beta") cfg.synthesis.beta = parse_double(key, value);
        else if (key == "synthesis.score") cfg.synthesis.synthetic_score = parse_double(key, value);
        else if (key == "synthesis.placements_per_image")
            cfg.synthesis.placements_per_image = parse_int(key, value);
        else if (key == "seed") cfg.seed = parse_u64(key, value);
        else if (key == "log_pseudo_sets") cfg.log_pseudo_sets = parse_bool(key, value);
        else if (key == "log_params") cfg.log_params = parse_bool(key, value);
        else fail(errc::config, "config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), errc::io, "io: cannot open config file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string serialize_run_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "world.image_width = " << cfg.world.image_width << "\n";
    out << "world.image_height = " << cfg.world.image_height << "\n";
    out << "world.known_classes = " << cfg.world.known_classes << "\n";
    out << "world.unknown_classes = " << cfg.world.unknown_classes << "\n";
    out << "world.imbalance_ratio = " << format_double(cfg.world.imbalance_ratio) << "\n";
    out << "world.min_objects_per_image = " << cfg.world.min_objects_per_image << "\n";
    out << "world.max_objects_per_image = " << cfg.world.max_objects_per_image << "\n";
    out << "world.labeled_images = " << cfg.world.labeled_images << "\n";
    out << "world.unlabeled_images = " << cfg.world.unlabeled_images << "\n";
    out << "world.test_images = " << cfg.world.test_images << "\n";
    out << "world.noise_level = " << format_double(cfg.world.noise_level) << "\n";
    out << "world.seed = " << cfg.world.seed << "\n";
    out << "iterations = " << cfg.iterations << "\n";
    out << "lambda = " << format_double(cfg.lambda) << "\n";
    out << "ema_alpha = " << format_double(cfg.ema_alpha) << "\n";
    out << "pseudo_threshold = " << format_double(cfg.pseudo_threshold) << "\n";
    out << "enable_cce = " << (cfg.enable_cce ? "true" : "false") << "\n";
    out << "enable_oodfc = " << (cfg.enable_oodfc ? "true" : "false") << "\n";
    out << "fusion.gamma = " << format_double(cfg.fusion.gamma) << "\n";
    out << "fusion.iou_gate = " << format_double(cfg.fusion.iou_gate) << "\n";
    out << "fusion.base_threshold = " << format_double(cfg.fusion.base_unknown_threshold) << "\n";
    out << "synthesis.beta = " << format_double(cfg.synthesis.beta) << "\n";
    out << "synthesis.score = " << format_double(cfg.synthesis.synthetic_score) << "\n";
    out << "synthesis.placements_per_image = " << cfg.synthesis.placements_per_image << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "log_pseudo_sets = " << (cfg.log_pseudo_sets ? "true" : "false") << "\n";
    out << "log_params = " << (cfg.log_params ? "true" : "false") << "\n";
    return out.str();
}

// ---- helpers -------------------------------------------------------------------

AnnotationSet predictions_to_set(const std::vector<ImageInfo>& images,
                                 const std::vector<Category>& categories,
                                 const std::map<int, std::vector<DetectionResult>>& by_image) {
    AnnotationSet out;
    out.images = images;
    out.categories = categories;
    int next_id = 1;
    for (const ImageInfo& img : images) {
        const auto it = by_image.find(img.id);
        if (it == by_image.end()) continue;
        for (const DetectionResult& det : it->second) {
            Annotation a;
            a.id = next_id++;
            a.image_id = img.id;
            a.category_id = det.category_id;
            a.bbox = bbox_from_box(det.box);
            a.score = det.confidence;
            out.annotations.push_back(a);
        }
    }
    out.validate();
    return out;
}

AnnotationSet suppress_conflicting_known(const AnnotationSet& fused, double iou_gate) {
    require(iou_gate > 0.0 && iou_gate < 1.0, errc::validation,
            "suppress: iou_gate must be in (0, 1)");
    std::map<int, std::vector<Box>> unknown_boxes;
    for (const Annotation& a : fused.annotations) {
        if (a.category_id == kUnknownCategoryId) {
            unknown_boxes[a.image_id].push_back(box_from_bbox(a.bbox));
        }
    }
    AnnotationSet out;
    out.images = fused.images;
    out.categories = fused.categories;
    for (const Annotation& a : fused.annotations) {
        bool keep = true;
        if (a.category_id != kUnknownCategoryId) {
            const auto it = unknown_boxes.find(a.image_id);
            if (it != unknown_boxes.end()) {
                const Box b = box_from_bbox(a.bbox);
                for (const Box& u : it->second) {
                    if (iou(b, u) > iou_gate) {
                        keep = false;
                        break;
                    }
                }
            }
        }
        if (keep) out.annotations.push_back(a);
    }
    return out;
}

int majority_category(const AnnotationSet& labeled) {
    const ClassStats stats = class_frequencies(labeled);
    require(!stats.per_class.empty(), errc::validation, "majority: no known categories");
    int best_id = stats.per_class.front().category_id;
    std::int64_t best_count = stats.per_class.front().count;
    for (const auto& e : stats.per_class) {
        if (e.count > best_count) {  // ties keep the earlier (lower) id
            best_count = e.count;
            best_id = e.category_id;
        }
    }
    return best_id;
}

int count_unknown_matched_as(const AnnotationSet& ground_truth,
                             const AnnotationSet& predictions, int category_id,
                             double iou_thresh) {
    require(iou_thresh > 0.0, errc::validation, "count: iou threshold must be > 0");
    std::map<int, std::vector<Box>> preds_by_image;
    for (const Annotation& p : predictions.annotations) {
        if (p.category_id == category_id) preds_by_image[p.image_id].push_back(box_from_bbox(p.bbox));
    }
    int count = 0;
    for (const Annotation& g : ground_truth.annotations) {
        if (g.category_id != kUnknownCategoryId) continue;
        const auto it = preds_by_image.find(g.image_id);
        if (it == preds_by_image.end()) continue;
        const Box gb = box_from_bbox(g.bbox);
        for (const Box& pb : it->second) {
            if (iou(gb, pb) >= iou_thresh) {
                ++count;
                break;
            }
        }
    }
    return count;
}

std::pair<int, int> rare_class_pair(const AnnotationSet& labeled) {
    const ClassStats stats = class_frequencies(labeled);
    require(stats.per_class.size() >= 2, errc::validation,
            "rare pair: need at least two known classes");
    std::vector<ClassStats::Entry> order(stats.per_class.begin(), stats.per_class.end());
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.count != b.count) return a.count < b.count;
        return a.category_id > b.category_id;  // higher id counts as rarer
    });
    const int a = order[0].category_id;
    const int b = order[1].category_id;
    return {std::min(a, b), std::max(a, b)};
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---- training -------------------------------------------------------------------

namespace {

std::uint64_t derive_seed(const Rng& base, std::string_view label, std::uint64_t a,
                          std::uint64_t b) {
    Rng r = base.fork(label).fork(a).fork(b);
    return r.next();
}

// One weakly augmented view of an image, with its coordinate map.
AugmentedImage weak_view(const RasterImage& image, std::uint64_t seed) {
    const AugmentationSpec spec =
        sample_augmentation(AugmentationKind::weak, seed, image.width(), image.height());
    return apply_augmentation(image, spec);
}

AugmentedImage strong_view(const RasterImage& image, std::uint64_t seed) {
    const AugmentationSpec spec =
        sample_augmentation(AugmentationKind::strong, seed, image.width(), image.height());
    return apply_augmentation(image, spec);
}

std::map<int, const ImageInfo*> image_index(const AnnotationSet& set) {
    std::map<int, const ImageInfo*> idx;
    for (const ImageInfo& img : set.images) idx[img.id] = &img;
    return idx;
}

std::map<int, std::vector<Annotation>> annotations_by_image(const AnnotationSet& set) {
    std::map<int, std::vector<Annotation>> idx;
    for (const Annotation& a : set.annotations) idx[a.image_id].push_back(a);
    return idx;
}

struct BatchEntry {
    bool supervised = false;
    int image_id = 0;
};

}  // namespace

RunResult train_run(const RunConfig& cfg) {
    WorldConfig wc = cfg.world;
    const World world = generate_world(wc);
    return train_run(cfg, world);
}

RunResult train_run(const RunConfig& cfg, const World& world) {
    cfg.validate();
    RunResult out;
    const Rng root(mix_seed(cfg.seed));
    const ImageProvider world_provider = make_provider(world.images);

    // --- stage 1: optional class-balanced synthesis into the supervised stream
    AnnotationSet supervised = world.labeled;
    std::map<int, RasterImage> composited;  // unlabeled images with pastes
    if (cfg.enable_cce) {
        const ForegroundLibrary library = build_library(world.labeled, world_provider);
        const ForegroundLibrary balanced = balance_library(library, cfg.seed);
        SynthesisConfig syn = cfg.synthesis;
        syn.seed = cfg.seed;
        SynthesisResult result = synthesize(balanced, world.unlabeled, world_provider, syn);
        composited = std::move(result.images);
        out.synthetic_annotations = static_cast<int>(result.annotations.annotations.size());
        supervised = merge_sets(supervised, result.annotations);
    }
    const ImageProvider train_provider = [&world, &composited](int image_id) -> const RasterImage& {
        const auto it = composited.find(image_id);
        if (it != composited.end()) return it->second;
        const auto wit = world.images.find(image_id);
        require(wit != world.images.end(), errc::validation,
                "train: no pixels for image id " + std::to_string(image_id));
        return wit->second;
    };

    // --- stage 2: supervised fit; student and teacher start identical.
    // Centroids and the open-set margin are fitted from the real labeled
    // split only: synthetic pastes can land on top of unlabeled foreground
    // objects, and letting those mixed crops into the fit would inflate the
    // within-class spread (and so δ) until open-set rejection stops firing.
    // Synthetic annotations still steer training through the batch stream.
    DetectorModel student = fit_supervised(world.labeled, world_provider);
    const DetectorModel supervised_model = student;  // static unknown detector
    out.supervised_model = supervised_model;
    const std::vector<int> class_ids = student.class_ids();

    // Train AP of the supervised model on the labeled split drives the
    // per-class dynamic thresholds.
    {
        std::map<int, std::vector<DetectionResult>> dets;
        for (const ImageInfo& img : world.labeled.images) {
            dets[img.id] = predict(supervised_model, world_provider(img.id), false);
        }
        const AnnotationSet preds =
            predictions_to_set(world.labeled.images, world.labeled.categories, dets);
        out.supervised_train_ap = evaluate(world.labeled, preds, 0.5);
    }
    out.thresholds = build_threshold_table(out.supervised_train_ap, cfg.fusion);

    EmaState teacher_state = make_ema_state(cfg.ema_alpha, student.params());
    if (cfg.log_params) out.teacher_initial_params = teacher_state.current;
    const auto log_ema_step = [&out, &cfg](const DetectorModel& s) {
        if (cfg.log_params) out.student_param_log.push_back(s.params());
    };

    const auto supervised_by_image = annotations_by_image(supervised);
    const auto supervised_images = image_index(supervised);
    std::vector<int> supervised_ids;
    for (const auto& [id, anns] : supervised_by_image) supervised_ids.push_back(id);

    std::vector<int> labeled_ids;
    for (const ImageInfo& img : world.labeled.images) labeled_ids.push_back(img.id);
    const auto labeled_by_image = annotations_by_image(world.labeled);

    std::vector<Category> pseudo_categories = world.unlabeled.categories;
    pseudo_categories.push_back({kUnknownCategoryId, "unknown"});

    // --- stage 3: mean-teacher iterations
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const DetectorModel teacher = student.with_params(teacher_state.current);

        // 3a. pseudo-label every unlabeled image from its weak view
        AnnotationSet pseudo;
        pseudo.images = world.unlabeled.images;
        pseudo.categories = world.unlabeled.categories;
        AnnotationSet unknown_set;
        unknown_set.images = world.unlabeled.images;
        unknown_set.categories = pseudo_categories;
        int next_pseudo_id = 1;
        int next_unknown_id = 1;
        for (const ImageInfo& img : world.unlabeled.images) {
            const std::uint64_t aug_seed =
                derive_seed(root, "weak", static_cast<std::uint64_t>(iter),
                            static_cast<std::uint64_t>(img.id));
            const AugmentedImage view = weak_view(world_provider(img.id), aug_seed);
            for (const DetectionResult& det : predict(teacher, view.image, false)) {
                Annotation a;
                a.id = next_pseudo_id++;
                a.image_id = img.id;
                a.category_id = det.category_id;
                a.bbox = bbox_from_box(view.map.unmap_box(det.box));
                a.score = det.confidence;
                pseudo.annotations.push_back(a);
            }
            if (cfg.enable_oodfc) {
                for (const DetectionResult& det : predict(supervised_model, view.image, true)) {
                    if (det.category_id != kUnknownCategoryId) continue;
                    Annotation a;
                    a.id = next_unknown_id++;
                    a.image_id = img.id;
                    a.category_id = kUnknownCategoryId;
                    a.bbox = bbox_from_box(view.map.unmap_box(det.box));
                    a.score = det.confidence;
                    unknown_set.annotations.push_back(a);
                }
            }
        }
        pseudo = filter_by_confidence(pseudo, cfg.pseudo_threshold);
        if (cfg.log_pseudo_sets) out.pseudo_log.push_back(pseudo);

        AnnotationSet training_pseudo;
        if (cfg.enable_oodfc) {
            const AnnotationSet fused = fuse(pseudo, unknown_set, out.thresholds, cfg.fusion);
            if (cfg.log_pseudo_sets) out.fused_log.push_back(fused);
            training_pseudo = suppress_conflicting_known(fused, cfg.fusion.iou_gate);
        } else {
            training_pseudo = pseudo;
        }
        const auto pseudo_by_image = annotations_by_image(training_pseudo);
        const auto pseudo_images = image_index(training_pseudo);

        // 3b. labeled + pseudo-labeled mini-batches, EMA step after each update
        std::vector<BatchEntry> entries;
        for (int id : supervised_ids) entries.push_back({true, id});
        for (const auto& [id, anns] : pseudo_by_image) {
            if (!anns.empty()) entries.push_back({false, id});
        }
        Rng order_rng = root.fork("batch-order").fork(static_cast<std::uint64_t>(iter));
        for (std::size_t i = entries.size(); i > 1; --i) {
            std::swap(entries[i - 1], entries[static_cast<std::size_t>(order_rng.below(i))]);
        }

        for (std::size_t start = 0; start < entries.size(); start += kBatchImages) {
            const std::size_t stop = std::min(entries.size(), start + kBatchImages);
            AnnotationSet sup_batch, pseudo_batch;
            sup_batch.categories = supervised.categories;
            pseudo_batch.categories = training_pseudo.categories;
            for (std::size_t i = start; i < stop; ++i) {
                const BatchEntry& e = entries[i];
                if (e.supervised) {
                    sup_batch.images.push_back(*supervised_images.at(e.image_id));
                    const auto& anns = supervised_by_image.at(e.image_id);
                    sup_batch.annotations.insert(sup_batch.annotations.end(), anns.begin(),
                                                 anns.end());
                } else {
                    pseudo_batch.images.push_back(*pseudo_images.at(e.image_id));
                    const auto& anns = pseudo_by_image.at(e.image_id);
                    pseudo_batch.annotations.insert(pseudo_batch.annotations.end(), anns.begin(),
                                                    anns.end());
                }
            }
            if (!sup_batch.annotations.empty()) {
                student = update_model(student, sup_batch, train_provider, 1.0);
                teacher_state = ema_update(teacher_state, student.params());
                log_ema_step(student);
            }
            if (!pseudo_batch.annotations.empty()) {
                student = update_model(student, pseudo_batch, world_provider, cfg.lambda);
                teacher_state = ema_update(teacher_state, student.params());
                log_ema_step(student);
            }
        }

        // 3c. loss diagnostics on image samples
        Rng sample_rng = root.fork("loss-sample").fork(static_cast<std::uint64_t>(iter));
        auto sample_ids = [&sample_rng](const std::vector<int>& ids, int want) {
            std::vector<int> pool = ids;
            for (std::size_t i = pool.size(); i > 1; --i) {
                std::swap(pool[i - 1], pool[static_cast<std::size_t>(sample_rng.below(i))]);
            }
            if (static_cast<int>(pool.size()) > want) pool.resize(static_cast<std::size_t>(want));
            return pool;
        };

        double cls = 0.0, loc = 0.0;
        const std::vector<int> labeled_sample = sample_ids(labeled_ids, kLossSampleImages);
        for (int id : labeled_sample) {
            const auto dets = predict(student, world_provider(id), false);
            const auto it = labeled_by_image.find(id);
            static const std::vector<Annotation> kNone;
            const SupervisedLoss l =
                supervised_loss(dets, it == labeled_by_image.end() ? kNone : it->second,
                                class_ids, 0.5);
            cls += l.classification;
            loc += l.localization;
        }
        if (!labeled_sample.empty()) {
            cls /= static_cast<double>(labeled_sample.size());
            loc /= static_cast<double>(labeled_sample.size());
        }

        std::vector<int> unlabeled_ids;
        for (const ImageInfo& img : world.unlabeled.images) unlabeled_ids.push_back(img.id);
        const std::vector<int> unlabeled_sample = sample_ids(unlabeled_ids, kLossSampleImages);
        double cons = 0.0, pseudo_l = 0.0;
        const DetectorModel teacher_now = student.with_params(teacher_state.current);
        for (int id : unlabeled_sample) {
            const RasterImage& original = world_provider(id);
            const std::uint64_t wseed = derive_seed(root, "weak", static_cast<std::uint64_t>(iter),
                                                    static_cast<std::uint64_t>(id));
            const std::uint64_t sseed = derive_seed(root, "strong", static_cast<std::uint64_t>(iter),
                                                    static_cast<std::uint64_t>(id));
            const AugmentedImage weak = weak_view(original, wseed);
            const AugmentedImage strong = strong_view(original, sseed);
            std::vector<DetectionResult> weak_dets = predict(teacher_now, weak.image, false);
            for (DetectionResult& d : weak_dets) d.box = weak.map.unmap_box(d.box);
            const auto strong_dets = predict(student, strong.image, false);
            cons += consistency_loss(weak_dets, strong_dets, strong.map);

            const auto it = pseudo_by_image.find(id);
            if (it != pseudo_by_image.end()) {
                AnnotationSet slice;
                slice.images.push_back(*pseudo_images.at(id));
                slice.categories = training_pseudo.categories;
                slice.annotations = it->second;
                const auto plain_dets = predict(student, original, false);
                pseudo_l += pseudo_loss(plain_dets, slice);
            }
        }
        if (!unlabeled_sample.empty()) {
            cons /= static_cast<double>(unlabeled_sample.size());
            pseudo_l /= static_cast<double>(unlabeled_sample.size());
        }

        out.losses.push_back(LossReport::assemble(cls, loc, cons, pseudo_l, cfg.lambda));
    }

    // --- stage 4: final open-set evaluation on the test split
    const DetectorModel teacher_final = student.with_params(teacher_state.current);
    {
        std::map<int, std::vector<DetectionResult>> dets;
        for (const ImageInfo& img : world.test.images) {
            dets[img.id] = predict(teacher_final, world_provider(img.id), true);
        }
        out.test_predictions =
            predictions_to_set(world.test.images, world.test.categories, dets);
    }
    out.test_ap = evaluate(world.test, out.test_predictions, 0.5);
    out.majority_category = majority_category(world.labeled);
    out.unknown_as_majority =
        count_unknown_matched_as(world.test, out.test_predictions, out.majority_category, 0.5);
    out.student = student;
    out.teacher = teacher_final;
    return out;
}

// ---- ablation --------------------------------------------------------------------

const std::array<const char*, 4> kAblationVariants = {"baseline", "cce", "oodfc", "cce_oodfc"};

AblationReport run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds) {
    require(!seeds.empty(), errc::config, "ablation: need at least one seed");
    AblationReport report;
    for (const std::uint64_t seed : seeds) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.world.seed = seed;
        const World world = generate_world(cfg.world);

        SeedOutcome outcome;
        outcome.seed = seed;
        outcome.rare_pair = rare_class_pair(world.labeled);
        for (const char* variant : kAblationVariants) {
            RunConfig vcfg = cfg;
            const std::string name = variant;
            vcfg.enable_cce = name == "cce" || name == "cce_oodfc";
            vcfg.enable_oodfc = name == "oodfc" || name == "cce_oodfc";
            RunResult run = train_run(vcfg, world);

            VariantOutcome v;
            v.variant = name;
            v.test_ap = std::move(run.test_ap);
            v.supervised_train_ap = std::move(run.supervised_train_ap);
            v.losses = std::move(run.losses);
            v.test_predictions = std::move(run.test_predictions);
            v.unknown_as_majority = run.unknown_as_majority;
            outcome.variants.push_back(std::move(v));
        }
        report.seeds.push_back(std::move(outcome));
    }
    report.recompute_summary();
    return report;
}

void AblationReport::recompute_summary() {
    median_map.clear();
    median_rare_ap.clear();
    median_unknown_as_majority.clear();
    for (const char* variant : kAblationVariants) {
        std::vector<double> maps, rares, unknowns;
        for (const SeedOutcome& seed : seeds) {
            for (const VariantOutcome& v : seed.variants) {
                if (v.variant != variant) continue;
                maps.push_back(v.test_ap.map);
                const auto a = v.test_ap.per_class.find(seed.rare_pair.first);
                const auto b = v.test_ap.per_class.find(seed.rare_pair.second);
                const double ra = a == v.test_ap.per_class.end() ? 0.0 : a->second;
                const double rb = b == v.test_ap.per_class.end() ? 0.0 : b->second;
                rares.push_back(0.5 * (ra + rb));
                unknowns.push_back(static_cast<double>(v.unknown_as_majority));
            }
        }
        if (maps.empty()) continue;
        median_map[variant] = median(maps);
        median_rare_ap[variant] = median(rares);
        median_unknown_as_majority[variant] = median(unknowns);
    }
}

namespace {

nlohmann::json ap_to_json_value(const ApTable& table) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [id, ap] : table.per_class) per[std::to_string(id)] = ap;
    return nlohmann::json{{"per_class", per}, {"map", table.map}};
}

nlohmann::json losses_to_json_value(const std::vector<LossReport>& losses) {
    nlohmann::json arr = nlohmann::json::array();
    for (const LossReport& l : losses) {
        arr.push_back({{"classification", l.classification},
                       {"localization", l.localization},
                       {"supervised", l.supervised},
                       {"consistency", l.consistency},
                       {"pseudo_label", l.pseudo_label},
                       {"unsupervised", l.unsupervised},
                       {"lambda", l.lambda},
                       {"total", l.total}});
    }
    return arr;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.is_open(), errc::io, "io: cannot write " + path.string());
    out << text;
    require(out.good(), errc::io, "io: short write to " + path.string());
}

}  // namespace

std::string ablation_report_to_json(const AblationReport& report) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const SeedOutcome& seed : report.seeds) {
        nlohmann::json variants = nlohmann::json::object();
        for (const VariantOutcome& v : seed.variants) {
            variants[v.variant] = {{"test_ap", ap_to_json_value(v.test_ap)},
                                   {"train_ap", ap_to_json_value(v.supervised_train_ap)},
                                   {"unknown_as_majority", v.unknown_as_majority}};
        }
        seeds.push_back({{"seed", seed.seed},
                         {"rare_pair", {seed.rare_pair.first, seed.rare_pair.second}},
                         {"variants", variants}});
    }
    const nlohmann::json doc = {
        {"seeds", seeds},
        {"medians",
         {{"map", report.median_map},
          {"rare_pair_ap", report.median_rare_ap},
          {"unknown_as_majority", report.median_unknown_as_majority}}}};
    return doc.dump(2) + "\n";
}

std::string ablation_report_to_text(const AblationReport& report) {
    std::ostringstream out;
    out << "Ablation over " << report.seeds.size() << " seed(s)\n\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s  %12s  %14s  %22s\n", "variant", "median mAP",
                  "median rareAP", "median unknown-as-maj");
    out << line;
    for (const char* variant : kAblationVariants) {
        const auto m = report.median_map.find(variant);
        if (m == report.median_map.end()) continue;
        std::snprintf(line, sizeof(line), "%-10s  %12.4f  %14.4f  %22.1f\n", variant, m->second,
                      report.median_rare_ap.at(variant),
                      report.median_unknown_as_majority.at(variant));
        out << line;
    }
    out << "\nper-seed test mAP (rare pair in brackets)\n";
    for (const SeedOutcome& seed : report.seeds) {
        out << "seed " << seed.seed << " [" << seed.rare_pair.first << ","
            << seed.rare_pair.second << "]:";
        for (const VariantOutcome& v : seed.variants) {
            std::snprintf(line, sizeof(line), "  %s=%.4f", v.variant.c_str(), v.test_ap.map);
            out << line;
        }
        out << "\n";
    }
    return out.str();
}

AblationReport run_simulation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                              const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    require(!ec, errc::io, "io: cannot create output directory " + out_dir.string());

    const AblationReport report = run_ablation(base, seeds);
    write_file(out_dir / "config.txt", serialize_run_config(base));
    write_file(out_dir / "ablation.json", ablation_report_to_json(report));
    write_file(out_dir / "ablation.txt", ablation_report_to_text(report));
    for (const SeedOutcome& seed : report.seeds) {
        for (const VariantOutcome& v : seed.variants) {
            const std::string prefix = "seed" + std::to_string(seed.seed) + "_" + v.variant;
            save_annotation_set(v.test_predictions, out_dir / (prefix + "_predictions.json"));
            save_ap_table(v.test_ap, out_dir / (prefix + "_ap.json"));
            write_file(out_dir / (prefix + "_losses.json"),
                       losses_to_json_value(v.losses).dump(2) + "\n");
        }
    }
    return report;
}

}  // namespace ossod

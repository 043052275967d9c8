#include "ossod/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "ossod/errors.hpp"
#include "ossod/geometry.hpp"
#include "ossod/rng.hpp"

namespace ossod {

namespace {

// ---- world appearance constants ------------------------------------------
// The shape world is engineered so that the failure modes under study
// (unknown look-alikes polluting pseudo-labels, rare classes starving)
// emerge from the mechanics rather than being scripted.

constexpr double kSaturation = 0.85;
constexpr double kValue = 0.88;
constexpr double kHueJitterDeg = 8.0;      // per-object hue wobble (uniform ±)
constexpr double kValueJitter = 0.05;      // per-object brightness wobble (±)
constexpr int kPixelNoise = 8;             // per-pixel channel noise (±)
constexpr Rgb kBackgroundBase{10, 10, 13};
constexpr int kBackgroundNoiseSpan = 36;   // scaled by noise_level, additive
constexpr double kNearUnknownOffsetDeg = 16.0;  // odd unknowns shadow their anchor closely
constexpr double kFarUnknownOffsetDeg = 30.0;   // even unknowns sit clearly apart
constexpr double kRareHueOffsetDeg = 35.0;      // rare knowns sit near mid classes
constexpr double kUnknownShare = 0.65;     // share of unlabeled/test objects
constexpr double kUnknownDecay = 1.5;      // weight decay across unknown classes
constexpr int kNormalDimMin = 15;
constexpr int kNormalDimMax = 28;
constexpr int kTinyDimMin = 4;
constexpr int kTinyDimMax = 7;             // stays below min_component_area
constexpr int kPlacementMargin = 2;        // border and inter-object gap
constexpr int kPlacementAttempts = 500;
constexpr std::uint64_t kLayoutAttempts = 64;  // whole-image redraws before giving up
constexpr std::int64_t kLabeledFloor = 2;  // keeps every known class fittable
constexpr std::int64_t kTestKnownFloor = 5;
constexpr std::int64_t kTestUnknownFloor = 8;

double tiny_fraction(double noise_level) {
    return std::min(0.45, 0.7 * noise_level);
}

// ---- detector constants ----------------------------------------------------

constexpr double kAspectScale = 24.0;
constexpr double kFillScale = 48.0;
constexpr double kOpenSetMargin = 1.4;  // δ = margin × max within-class spread
constexpr double kRejectionSharpness = 6.0;  // rejection confidence saturates by ~1.5δ
constexpr double kMinDelta = 4.0;
constexpr double kUpdateStep = 0.25;    // per-batch running-mean step at weight 1
constexpr double kSharedDrift = 0.002;  // absent-class drift toward batch mean
constexpr double kUpdateGateFactor = 2.0;  // accept crops within this × δ of the centroid

enum class Shape { rect, ellipse, triangle, diamond, ring, plus };

constexpr Shape kShapeCycle[6] = {Shape::rect,    Shape::ellipse, Shape::triangle,
                                  Shape::diamond, Shape::ring,    Shape::plus};
constexpr double kAspectCycle[6] = {1.0, 1.5, 0.7, 1.25, 0.85, 1.8};

struct ClassLook {
    double hue_deg = 0.0;
    Shape shape = Shape::rect;
    double aspect = 1.0;
};

// Known classes 1..K get distinct hues; when K > 4 the two rarest classes sit
// kRareHueOffsetDeg away from mid classes (rare diseases resembling common
// ones). Unknown classes mimic an anchor known class in shape and aspect but
// sit offset in hue: odd unknowns shadow their anchor closely (the confusable
// novelty that tempts an over-trained majority class), even ones sit clearly
// apart.
ClassLook class_look(int label, int known_classes) {
    ClassLook look;
    const int k = known_classes;
    if (label <= k) {
        const int c = label;
        if (k <= 4) {
            look.hue_deg = (c - 1) * 360.0 / k;
        } else if (c <= k - 2) {
            look.hue_deg = (c - 1) * 360.0 / (k - 2);
        } else {
            const int anchor1 = std::min(3, k - 2);
            const int anchor2 = std::min(4, k - 2);
            const double base1 = (anchor1 - 1) * 360.0 / (k - 2);
            const double base2 = (anchor2 - 1) * 360.0 / (k - 2);
            if (c == k - 1) {
                look.hue_deg = base1 + kRareHueOffsetDeg;
            } else {
                look.hue_deg = anchor1 == anchor2 ? base2 - kRareHueOffsetDeg
                                                  : base2 + kRareHueOffsetDeg;
            }
        }
        look.shape = kShapeCycle[(c - 1) % 6];
        look.aspect = kAspectCycle[(c - 1) % 6];
    } else {
        const int u = label - k;                 // 1-based unknown index
        const int anchor = ((u - 1) % k) + 1;
        const ClassLook anchor_look = class_look(anchor, k);
        const double offset = u % 2 == 1 ? kNearUnknownOffsetDeg : kFarUnknownOffsetDeg;
        look.hue_deg = anchor_look.hue_deg + offset;
        look.shape = anchor_look.shape;
        look.aspect = anchor_look.aspect;
    }
    look.hue_deg = std::fmod(look.hue_deg + 360.0, 360.0);
    return look;
}

Rgb hsv_to_rgb(double h_deg, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h_deg, 360.0) / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    auto to8 = [](double f) {
        return static_cast<std::uint8_t>(std::clamp(std::lround(f * 255.0), 0L, 255L));
    };
    return Rgb{to8(r + m), to8(g + m), to8(b + m)};
}

bool shape_lit(Shape shape, int w, int h, int x, int y) {
    const double cx = w / 2.0;
    const double cy = h / 2.0;
    const double px = x + 0.5;
    const double py = y + 0.5;
    switch (shape) {
        case Shape::rect:
            return true;
        case Shape::ellipse: {
            const double dx = (px - cx) / (w / 2.0);
            const double dy = (py - cy) / (h / 2.0);
            return dx * dx + dy * dy <= 1.0;
        }
        case Shape::triangle:
            return std::fabs(px - cx) <= (py / h) * (w / 2.0);
        case Shape::diamond:
            return std::fabs(px - cx) / (w / 2.0) + std::fabs(py - cy) / (h / 2.0) <= 1.0;
        case Shape::ring: {
            const double dx = (px - cx) / (w / 2.0);
            const double dy = (py - cy) / (h / 2.0);
            const double r2 = dx * dx + dy * dy;
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        }
        case Shape::plus:
            return std::fabs(px - cx) <= 0.22 * w || std::fabs(py - cy) <= 0.22 * h;
    }
    return false;
}

struct PendingObject {
    int label = 0;  // 1..K known, K+1..K+U unknown
    PixelRect rect;
};

bool rects_clash(const PixelRect& a, const PixelRect& b, int gap) {
    return a.x - gap < b.x + b.w && b.x - gap < a.x + a.w && a.y - gap < b.y + b.h &&
           b.y - gap < a.y + a.h;
}

std::uint8_t noisy_channel(std::uint8_t base, int delta) {
    return static_cast<std::uint8_t>(std::clamp(static_cast<int>(base) + delta, 0, 255));
}

PixelRect snap_bbox(const std::array<double, 4>& bbox) {
    return PixelRect{static_cast<int>(std::llround(bbox[0])), static_cast<int>(std::llround(bbox[1])),
                     static_cast<int>(std::llround(bbox[2])), static_cast<int>(std::llround(bbox[3]))};
}

std::vector<double> class_weights(int known_classes, double ratio) {
    std::vector<double> w(static_cast<std::size_t>(known_classes));
    for (int c = 0; c < known_classes; ++c) {
        w[static_cast<std::size_t>(c)] = std::pow(ratio, -static_cast<double>(c));
    }
    return w;
}

}  // namespace

void WorldConfig::validate() const {
    require(image_width >= 32 && image_height >= 32, errc::config,
            "world: image size must be at least 32x32");
    require(known_classes >= 2, errc::config, "world: need at least 2 known classes");
    require(unknown_classes >= 1, errc::config,
            "world: need at least 1 unknown class for the open-set setting");
    require(imbalance_ratio >= 1.0, errc::config, "world: imbalance_ratio must be >= 1");
    require(min_objects_per_image >= 0 && max_objects_per_image >= min_objects_per_image,
            errc::config, "world: bad objects-per-image range");
    require(labeled_images > 0 && unlabeled_images > 0 && test_images > 0, errc::config,
            "world: every split needs at least one image");
    require(noise_level >= 0.0 && noise_level <= 1.0, errc::config,
            "world: noise_level must be in [0, 1]");
}

std::vector<std::int64_t> apportion_counts(std::int64_t total, const std::vector<double>& weights,
                                           const std::vector<std::int64_t>& floors) {
    require(weights.size() == floors.size(), errc::validation,
            "apportion: weights/floors size mismatch");
    require(total >= 0, errc::validation, "apportion: negative total");
    double weight_sum = 0.0;
    std::int64_t floor_sum = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        require(weights[i] > 0.0, errc::validation, "apportion: weights must be positive");
        require(floors[i] >= 0, errc::validation, "apportion: floors must be nonnegative");
        weight_sum += weights[i];
        floor_sum += floors[i];
    }
    require(floor_sum <= total, errc::validation,
            "apportion: per-class floors exceed the object budget");

    const std::int64_t mass = total - floor_sum;
    std::vector<std::int64_t> out(floors);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double quota = static_cast<double>(mass) * weights[i] / weight_sum;
        const std::int64_t base = static_cast<std::int64_t>(std::floor(quota));
        out[i] += base;
        assigned += base;
        remainders.push_back({quota - static_cast<double>(base), i});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::int64_t k = 0; k < mass - assigned; ++k) {
        out[remainders[static_cast<std::size_t>(k)].second] += 1;
    }
    return out;
}

ImageProvider make_provider(const std::map<int, RasterImage>& images) {
    return [&images](int image_id) -> const RasterImage& {
        auto it = images.find(image_id);
        require(it != images.end(), errc::validation,
                "image provider: no pixels for image id " + std::to_string(image_id));
        return it->second;
    };
}

namespace {

struct SplitSpec {
    const char* name;
    int image_count;
    bool labeled_split;   // knowns only, emits ground truth
    bool emit_annotations;
};

// Generates one split's images and (optionally) annotations into the world.
void generate_split(const WorldConfig& cfg, const SplitSpec& spec, Rng split_rng, int& next_image_id,
                    int& next_annotation_id, AnnotationSet& set, std::map<int, RasterImage>& images) {
    const int k = cfg.known_classes;
    const int u = cfg.unknown_classes;

    // Per-image object counts first, then a class deck apportioned over the
    // split's object budget.
    Rng count_rng = split_rng.fork("counts");
    std::vector<int> per_image(static_cast<std::size_t>(spec.image_count));
    std::int64_t total = 0;
    for (int& n : per_image) {
        n = count_rng.range_int(cfg.min_objects_per_image, cfg.max_objects_per_image);
        total += n;
    }

    std::vector<double> weights = class_weights(k, cfg.imbalance_ratio);
    std::vector<std::int64_t> floors(static_cast<std::size_t>(k), 0);
    int label_kinds = k;
    if (spec.labeled_split) {
        std::fill(floors.begin(), floors.end(), kLabeledFloor);
    } else {
        // Unlabeled/test carry the unknown classes as well; unknowns take a
        // fixed share of the object budget, decaying across unknown classes.
        double known_sum = 0.0;
        for (double w : weights) known_sum += w;
        for (double& w : weights) w *= (1.0 - kUnknownShare) / known_sum;
        double unknown_sum = 0.0;
        std::vector<double> uw(static_cast<std::size_t>(u));
        for (int j = 0; j < u; ++j) {
            uw[static_cast<std::size_t>(j)] = std::pow(kUnknownDecay, -static_cast<double>(j));
            unknown_sum += uw[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < u; ++j) {
            weights.push_back(uw[static_cast<std::size_t>(j)] * kUnknownShare / unknown_sum);
        }
        const bool test_split = spec.emit_annotations;
        floors.assign(static_cast<std::size_t>(k), test_split ? kTestKnownFloor : 0);
        floors.insert(floors.end(), static_cast<std::size_t>(u),
                      test_split ? kTestUnknownFloor : 0);
        label_kinds = k + u;
    }
    const std::vector<std::int64_t> counts = apportion_counts(total, weights, floors);

    std::vector<int> deck;
    deck.reserve(static_cast<std::size_t>(total));
    for (int label = 1; label <= label_kinds; ++label) {
        for (std::int64_t n = 0; n < counts[static_cast<std::size_t>(label - 1)]; ++n) {
            deck.push_back(label);
        }
    }
    Rng deck_rng = split_rng.fork("deck");
    for (std::size_t i = deck.size(); i > 1; --i) {
        std::swap(deck[i - 1], deck[static_cast<std::size_t>(deck_rng.below(i))]);
    }

    const double tiny_p = tiny_fraction(cfg.noise_level);
    const int bg_span = static_cast<int>(std::lround(kBackgroundNoiseSpan * cfg.noise_level));
    const int dim_cap = std::min(kNormalDimMax, std::min(cfg.image_width, cfg.image_height) -
                                                    2 * kPlacementMargin - 2);
    require(dim_cap >= kNormalDimMin, errc::config,
            "world: image too small for the object size range");

    std::size_t deck_pos = 0;
    std::set<int> seen_labels;  // first instance of a class is never tiny
    for (int i = 0; i < spec.image_count; ++i) {
        const int image_id = next_image_id++;
        const Rng image_rng = split_rng.fork(static_cast<std::uint64_t>(i) + 1000);
        const std::size_t deck_start = deck_pos;
        const std::set<int> seen_start = seen_labels;

        // Random rectangle packing can dead-end (earlier objects fencing out
        // the last one), so a failed layout is redrawn wholesale from a fresh
        // substream rather than treated as fatal.
        RasterImage img;
        std::vector<PendingObject> placed;
        bool image_ok = false;
        for (std::uint64_t layout = 0; layout < kLayoutAttempts && !image_ok; ++layout) {
            deck_pos = deck_start;
            seen_labels = seen_start;
            Rng rng = image_rng.fork(layout);

            img = RasterImage(cfg.image_width, cfg.image_height);
            for (Rgb& p : img.pixels()) {
                p = Rgb{noisy_channel(kBackgroundBase.r, static_cast<int>(rng.below(bg_span + 1))),
                        noisy_channel(kBackgroundBase.g, static_cast<int>(rng.below(bg_span + 1))),
                        noisy_channel(kBackgroundBase.b, static_cast<int>(rng.below(bg_span + 1)))};
            }

            placed.clear();
            bool all_placed = true;
            const int want = per_image[static_cast<std::size_t>(i)];
            for (int o = 0; o < want && deck_pos < deck.size(); ++o) {
                const int label = deck[deck_pos++];
                const ClassLook look = class_look(label, k);

                // Every class gets at least one clearly visible exemplar per
                // split; beyond that, a noise-dependent share of objects is
                // too small for the proposal stage to ever see.
                bool tiny = rng.chance(tiny_p);
                if (seen_labels.insert(label).second) tiny = false;
                const int dim = tiny ? rng.range_int(kTinyDimMin, kTinyDimMax)
                                     : rng.range_int(kNormalDimMin, dim_cap);
                const double aspect = look.aspect * rng.range_real(0.92, 1.08);
                int w, h;
                if (aspect >= 1.0) {
                    w = dim;
                    h = std::max(tiny ? 2 : 4, static_cast<int>(std::lround(dim / aspect)));
                } else {
                    h = dim;
                    w = std::max(tiny ? 2 : 4, static_cast<int>(std::lround(dim * aspect)));
                }

                PixelRect rect;
                bool ok = false;
                for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
                    rect.x = kPlacementMargin +
                             static_cast<int>(
                                 rng.below(cfg.image_width - w - 2 * kPlacementMargin + 1));
                    rect.y = kPlacementMargin +
                             static_cast<int>(
                                 rng.below(cfg.image_height - h - 2 * kPlacementMargin + 1));
                    rect.w = w;
                    rect.h = h;
                    ok = true;
                    for (const PendingObject& other : placed) {
                        if (rects_clash(rect, other.rect, kPlacementMargin)) {
                            ok = false;
                            break;
                        }
                    }
                    if (ok) break;
                }
                if (!ok) {
                    all_placed = false;
                    break;
                }

                const double hue = look.hue_deg + rng.range_real(-kHueJitterDeg, kHueJitterDeg);
                const double value = std::clamp(
                    kValue * rng.range_real(1.0 - kValueJitter, 1.0 + kValueJitter), 0.0, 1.0);
                const Rgb base = hsv_to_rgb(std::fmod(hue + 360.0, 360.0), kSaturation, value);
                for (int y = 0; y < rect.h; ++y) {
                    for (int x = 0; x < rect.w; ++x) {
                        if (!shape_lit(look.shape, rect.w, rect.h, x, y)) continue;
                        img.at(rect.x + x, rect.y + y) =
                            Rgb{noisy_channel(base.r, rng.range_int(-kPixelNoise, kPixelNoise)),
                                noisy_channel(base.g, rng.range_int(-kPixelNoise, kPixelNoise)),
                                noisy_channel(base.b, rng.range_int(-kPixelNoise, kPixelNoise))};
                    }
                }
                placed.push_back({label, rect});
            }
            image_ok = all_placed;
        }
        require(image_ok, errc::validation,
                std::string("world: infeasible packing in ") + spec.name + " image " +
                    std::to_string(image_id));

        char file_name[48];
        std::snprintf(file_name, sizeof(file_name), "%s_%06d.ppm", spec.name, image_id);
        set.images.push_back({image_id, cfg.image_width, cfg.image_height, file_name});
        images.emplace(image_id, std::move(img));

        if (spec.emit_annotations) {
            for (const PendingObject& obj : placed) {
                Annotation a;
                a.id = next_annotation_id++;
                a.image_id = image_id;
                a.category_id = obj.label <= k ? obj.label : kUnknownCategoryId;
                a.bbox = {static_cast<double>(obj.rect.x), static_cast<double>(obj.rect.y),
                          static_cast<double>(obj.rect.w), static_cast<double>(obj.rect.h)};
                set.annotations.push_back(a);
            }
        }
    }
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
    cfg.validate();
    World world;

    std::vector<Category> known;
    for (int c = 1; c <= cfg.known_classes; ++c) {
        known.push_back({c, "class" + std::to_string(c)});
    }
    world.labeled.categories = known;
    world.unlabeled.categories = known;
    world.test.categories = known;
    world.test.categories.push_back({kUnknownCategoryId, "unknown"});

    const Rng root(mix_seed(cfg.seed));
    int next_image_id = 1;
    int next_annotation_id = 1;

    generate_split(cfg, {"labeled", cfg.labeled_images, true, true}, root.fork("labeled"),
                   next_image_id, next_annotation_id, world.labeled, world.images);
    generate_split(cfg, {"unlabeled", cfg.unlabeled_images, false, false}, root.fork("unlabeled"),
                   next_image_id, next_annotation_id, world.unlabeled, world.images);
    generate_split(cfg, {"test", cfg.test_images, false, true}, root.fork("test"), next_image_id,
                   next_annotation_id, world.test, world.images);

    world.labeled.validate();
    world.unlabeled.validate();
    world.test.validate();
    return world;
}

std::array<double, 5> features_from_crop(const RasterImage& crop, double background_threshold) {
    require(!crop.empty(), errc::validation, "features: empty crop");
    double fg[3] = {0, 0, 0};
    double bg[3] = {0, 0, 0};
    std::int64_t lit = 0;
    for (const Rgb& p : crop.pixels()) {
        const bool fore = std::max({p.r, p.g, p.b}) > background_threshold;
        double* acc = fore ? fg : bg;
        acc[0] += p.r;
        acc[1] += p.g;
        acc[2] += p.b;
        lit += fore ? 1 : 0;
    }
    const double n = static_cast<double>(crop.pixels().size());
    const std::int64_t unlit = static_cast<std::int64_t>(crop.pixels().size()) - lit;
    // Foreground color after subtracting the locally estimated background;
    // the subtraction keeps the color stable under alpha compositing onto
    // the (dark) background, and the chromatic normalization below keeps it
    // stable under brightness changes.
    double color[3] = {0, 0, 0};
    for (int c = 0; c < 3; ++c) {
        const double fore_mean = lit > 0 ? fg[c] / static_cast<double>(lit) : 0.0;
        const double back_mean = unlit > 0 ? bg[c] / static_cast<double>(unlit) : 0.0;
        color[c] = std::max(0.0, fore_mean - back_mean);
    }
    const double sum = color[0] + color[1] + color[2];
    std::array<double, 5> f{};
    if (sum < 1.0) {
        f[0] = f[1] = f[2] = 255.0 / 3.0;  // neutral gray for colorless crops
    } else {
        f[0] = 255.0 * color[0] / sum;
        f[1] = 255.0 * color[1] / sum;
        f[2] = 255.0 * color[2] / sum;
    }
    const double aspect = std::clamp(static_cast<double>(crop.width()) / crop.height(), 0.125, 8.0);
    f[3] = kAspectScale * aspect;
    f[4] = kFillScale * static_cast<double>(lit) / n;
    return f;
}

std::vector<int> DetectorModel::class_ids() const {
    std::vector<int> ids;
    for (const auto& [id, c] : centroids) ids.push_back(id);
    return ids;  // std::map keeps them ascending
}

void DetectorModel::validate() const {
    require(!centroids.empty(), errc::validation, "model: no centroids");
    for (const auto& [id, c] : centroids) {
        require(id >= 1, errc::validation, "model: centroid for non-known category");
        for (double v : c) {
            require(std::isfinite(v), errc::validation, "model: non-finite centroid");
        }
    }
    require(open_set_distance > 0.0, errc::validation, "model: delta must be > 0");
    require(temperature > 0.0, errc::validation, "model: temperature must be > 0");
    require(min_component_area >= 1, errc::validation, "model: min_component_area must be >= 1");
}

ParamVector DetectorModel::params() const {
    ParamVector p;
    std::string tag = "proto5:k=";
    bool first = true;
    for (const auto& [id, c] : centroids) {
        if (!first) tag += ',';
        tag += std::to_string(id);
        first = false;
        p.values.insert(p.values.end(), c.begin(), c.end());
    }
    p.values.push_back(open_set_distance);
    p.layout_tag = std::move(tag);
    return p;
}

DetectorModel DetectorModel::with_params(const ParamVector& p) const {
    const ParamVector self = params();
    require(p.layout_tag == self.layout_tag && p.values.size() == self.values.size(),
            errc::validation, "model: incompatible parameter vector layout");
    DetectorModel out = *this;
    std::size_t i = 0;
    for (auto& [id, c] : out.centroids) {
        for (double& v : c) v = p.values[i++];
    }
    out.open_set_distance = p.values[i];
    out.validate();
    return out;
}

namespace {

double feature_distance(const std::array<double, 5>& a, const std::array<double, 5>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

std::array<double, 5> crop_features_for(const Annotation& a, const ImageProvider& images,
                                        double background_threshold) {
    const RasterImage& img = images(a.image_id);
    const PixelRect rect = snap_bbox(a.bbox);
    require(rect.w > 0 && rect.h > 0 && rect.x >= 0 && rect.y >= 0 &&
                rect.x + rect.w <= img.width() && rect.y + rect.h <= img.height(),
            errc::validation,
            "crop features: annotation " + std::to_string(a.id) + " outside image");
    return features_from_crop(crop(img, rect), background_threshold);
}

// Annotations below the proposal stage's minimum component area describe
// objects the detector can never propose; they are evaluation burden, not
// usable training evidence, and are skipped by fit/update.
bool trainable(const Annotation& a, int min_component_area) {
    const PixelRect rect = snap_bbox(a.bbox);
    return static_cast<std::int64_t>(rect.w) * rect.h >= min_component_area;
}

}  // namespace

DetectorModel fit_supervised(const AnnotationSet& labeled, const ImageProvider& images) {
    labeled.validate();
    DetectorModel model;

    std::map<int, std::vector<std::array<double, 5>>> per_class;
    for (const Category& c : labeled.categories) {
        if (c.id != kUnknownCategoryId) per_class[c.id] = {};
    }
    require(!per_class.empty(), errc::validation, "fit: no known categories");
    for (const Annotation& a : labeled.annotations) {
        if (a.category_id == kUnknownCategoryId) continue;
        if (!trainable(a, model.min_component_area)) continue;
        per_class[a.category_id].push_back(
            crop_features_for(a, images, model.background_threshold));
    }

    for (const auto& [id, feats] : per_class) {
        require(!feats.empty(), errc::validation,
                "fit: category " + std::to_string(id) + " has no usable examples");
        std::array<double, 5> mean{};
        for (const auto& f : feats) {
            for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
        }
        for (double& v : mean) v /= static_cast<double>(feats.size());
        model.centroids[id] = mean;
    }

    double max_spread = 0.0;
    for (const auto& [id, feats] : per_class) {
        for (const auto& f : feats) {
            max_spread = std::max(max_spread, feature_distance(f, model.centroids[id]));
        }
    }
    model.open_set_distance = std::max(kMinDelta, kOpenSetMargin * max_spread);
    model.validate();
    return model;
}

std::vector<DetectionResult> predict(const DetectorModel& model, const RasterImage& image,
                                     bool open_set) {
    model.validate();
    const int w = image.width();
    const int h = image.height();
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Rgb& p = image.at(x, y);
            mask[static_cast<std::size_t>(y) * w + x] =
                std::max({p.r, p.g, p.b}) > model.background_threshold ? 1 : 0;
        }
    }

    const std::vector<int> ids = model.class_ids();
    std::vector<DetectionResult> results;
    std::vector<int> stack;
    std::vector<std::uint8_t> seen(mask.size(), 0);

    for (int start = 0; start < w * h; ++start) {
        if (!mask[static_cast<std::size_t>(start)] || seen[static_cast<std::size_t>(start)]) continue;
        // Flood-fill one 4-connected component.
        stack.assign(1, start);
        seen[static_cast<std::size_t>(start)] = 1;
        int min_x = w, min_y = h, max_x = -1, max_y = -1;
        std::int64_t area = 0;
        while (!stack.empty()) {
            const int idx = stack.back();
            stack.pop_back();
            const int x = idx % w;
            const int y = idx / w;
            ++area;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
            const int neighbors[4] = {idx - 1, idx + 1, idx - w, idx + w};
            const bool valid[4] = {x > 0, x + 1 < w, y > 0, y + 1 < h};
            for (int n = 0; n < 4; ++n) {
                if (!valid[n]) continue;
                const int ni = neighbors[n];
                if (mask[static_cast<std::size_t>(ni)] && !seen[static_cast<std::size_t>(ni)]) {
                    seen[static_cast<std::size_t>(ni)] = 1;
                    stack.push_back(ni);
                }
            }
        }
        if (area < model.min_component_area) continue;

        const PixelRect rect{min_x, min_y, max_x - min_x + 1, max_y - min_y + 1};
        const std::array<double, 5> f =
            features_from_crop(crop(image, rect), model.background_threshold);

        std::vector<double> dist(ids.size());
        double min_d = 0.0;
        int best = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            dist[i] = feature_distance(f, model.centroids.at(ids[i]));
            if (i == 0 || dist[i] < min_d) {
                min_d = dist[i];
                best = static_cast<int>(i);
            }
        }
        // Softmax over negative scaled distances, stabilized at the minimum.
        std::vector<double> scores(ids.size());
        double z = 0.0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            scores[i] = std::exp(-(dist[i] - min_d) / model.temperature);
            z += scores[i];
        }
        for (double& s : scores) s /= z;

        DetectionResult det;
        det.box = Box{static_cast<double>(rect.x), static_cast<double>(rect.y),
                      static_cast<double>(rect.w), static_cast<double>(rect.h)};
        det.class_scores = std::move(scores);
        if (open_set && min_d > model.open_set_distance) {
            det.category_id = kUnknownCategoryId;
            det.confidence = std::clamp(
                1.0 - std::exp(-kRejectionSharpness * (min_d - model.open_set_distance) /
                               model.open_set_distance),
                0.0, 1.0);
        } else {
            det.category_id = ids[static_cast<std::size_t>(best)];
            det.confidence = det.class_scores[static_cast<std::size_t>(best)];
        }
        results.push_back(std::move(det));
    }
    return results;
}

DetectorModel update_model(const DetectorModel& model, const AnnotationSet& batch,
                           const ImageProvider& images, double weight) {
    model.validate();
    batch.validate();
    require(weight >= 0.0, errc::validation, "update: weight must be >= 0");
    if (weight == 0.0 || batch.annotations.empty()) return model;

    // Crops are matched to their class only within a radius of the current
    // centroid; anything farther is an outlier for that class (an occluded or
    // contaminated crop) and must not drag the prototype.
    const double accept_radius = kUpdateGateFactor * model.open_set_distance;
    std::map<int, std::vector<std::array<double, 5>>> per_class;
    for (const Annotation& a : batch.annotations) {
        if (a.category_id == kUnknownCategoryId) continue;  // unknowns carry no class signal
        require(model.centroids.count(a.category_id) != 0, errc::validation,
                "update: batch category " + std::to_string(a.category_id) +
                    " not in the model");
        if (!trainable(a, model.min_component_area)) continue;
        auto f = crop_features_for(a, images, model.background_threshold);
        if (feature_distance(f, model.centroids.at(a.category_id)) > accept_radius) continue;
        per_class[a.category_id].push_back(f);
    }
    if (per_class.empty()) return model;

    const double step_present = std::clamp(kUpdateStep * weight, 0.0, 1.0);
    const double step_absent = std::clamp(kSharedDrift * weight, 0.0, 1.0);

    // Present classes pull toward their own batch mean. Absent classes are
    // not reinforced, so their prototype signal decays toward the background
    // statistic (zero chroma, neutral aspect, empty fill) — the footprint of
    // catastrophic forgetting in a running-mean learner.
    std::map<int, std::array<double, 5>> class_means;
    for (const auto& [id, feats] : per_class) {
        std::array<double, 5> mean{};
        for (const auto& f : feats) {
            for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
        }
        for (double& v : mean) v /= static_cast<double>(feats.size());
        class_means[id] = mean;
    }
    constexpr std::array<double, 5> kForgettingTarget{0.0, 0.0, 0.0, kAspectScale, 0.0};

    DetectorModel out = model;
    for (auto& [id, centroid] : out.centroids) {
        auto it = class_means.find(id);
        if (it != class_means.end()) {
            for (std::size_t i = 0; i < centroid.size(); ++i) {
                centroid[i] += step_present * (it->second[i] - centroid[i]);
            }
        } else {
            for (std::size_t i = 0; i < centroid.size(); ++i) {
                centroid[i] += step_absent * (kForgettingTarget[i] - centroid[i]);
            }
        }
    }
    return out;
}

}  // namespace ossod

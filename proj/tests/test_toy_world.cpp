#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "ossod/ema.hpp"
#include "ossod/errors.hpp"
#include "ossod/geometry.hpp"
#include "ossod/harness.hpp"
#include "ossod/metrics.hpp"
#include "ossod/toy_world.hpp"
#include "support/helpers.hpp"

using ossod::Annotation;
using ossod::AnnotationSet;
using ossod::DetectionResult;
using ossod::DetectorModel;
using ossod::RasterImage;
using ossod::Rgb;
using ossod::World;
using ossod::WorldConfig;
using testsupport::annotation;
using testsupport::paint_rect;

namespace {

double feat_dist(const std::array<double, 5>& a, const std::array<double, 5>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Two-class scene: a red 12x12 square and a blue 16x8 bar on a dark canvas.
struct TinyScene {
    AnnotationSet labeled;
    std::map<int, RasterImage> pixels;

    ossod::ImageProvider provider() const {
        return [this](int id) -> const RasterImage& { return pixels.at(id); };
    }
};

TinyScene two_class_scene() {
    TinyScene s;
    RasterImage img(64, 48, Rgb{10, 10, 13});
    paint_rect(img, 8, 8, 12, 12, Rgb{220, 60, 60});
    paint_rect(img, 36, 20, 16, 8, Rgb{60, 60, 220});
    s.pixels.emplace(1, std::move(img));
    s.labeled = testsupport::one_image_set(
        64, 48, {{1, "red"}, {2, "blue"}},
        {annotation(1, 1, 1, {8, 8, 12, 12}), annotation(2, 1, 2, {36, 20, 16, 8})});
    return s;
}

WorldConfig small_world_config() {
    WorldConfig cfg;
    cfg.known_classes = 3;
    cfg.unknown_classes = 1;
    cfg.imbalance_ratio = 4.0;
    cfg.labeled_images = 20;
    cfg.unlabeled_images = 30;
    cfg.test_images = 15;
    // Guarantees the test split's object budget covers its per-class floors.
    cfg.min_objects_per_image = 2;
    cfg.noise_level = 0.3;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("apportion_counts") {
    SUBCASE("equal weights split evenly") {
        const auto counts = ossod::apportion_counts(600, {1.0, 1.0, 1.0}, {0, 0, 0});
        CHECK(counts == std::vector<std::int64_t>{200, 200, 200});
    }
    SUBCASE("total is always preserved and floors respected") {
        const auto counts = ossod::apportion_counts(10, {5.0, 1.0, 1.0}, {0, 3, 0});
        std::int64_t sum = 0;
        for (std::int64_t c : counts) sum += c;
        CHECK(sum == 10);
        CHECK(counts[1] >= 3);
    }
    SUBCASE("the imbalance law holds when floors are negligible") {
        // Weights rho^{-(c-1)} with rho = 8 and six classes: the majority to
        // minority ratio is 8^5 = 32768 up to apportionment rounding.
        std::vector<double> weights;
        for (int c = 0; c < 6; ++c) weights.push_back(std::pow(8.0, -c));
        const auto counts =
            ossod::apportion_counts(10'000'000, weights, std::vector<std::int64_t>(6, 0));
        const double ratio =
            static_cast<double>(counts[0]) / static_cast<double>(counts[5]);
        CHECK(ratio == doctest::Approx(32768.0).epsilon(0.01));
        std::int64_t sum = 0;
        for (std::int64_t c : counts) sum += c;
        CHECK(sum == 10'000'000);
    }
}

TEST_CASE("generate_world structure") {
    const WorldConfig cfg = small_world_config();
    const World world = ossod::generate_world(cfg);

    SUBCASE("splits validate and have the configured sizes") {
        world.labeled.validate();
        world.unlabeled.validate();
        world.test.validate();
        CHECK(world.labeled.images.size() == 20);
        CHECK(world.unlabeled.images.size() == 30);
        CHECK(world.test.images.size() == 15);
        CHECK(world.images.size() == 65);
    }
    SUBCASE("labeled split has known classes only; every class appears") {
        std::set<int> seen;
        for (const Annotation& a : world.labeled.annotations) {
            CHECK(a.category_id != 0);
            seen.insert(a.category_id);
        }
        CHECK(seen == std::set<int>{1, 2, 3});
    }
    SUBCASE("unlabeled split carries no annotations") {
        CHECK(world.unlabeled.annotations.empty());
    }
    SUBCASE("test split carries unknown-tagged ground truth") {
        int unknowns = 0;
        for (const Annotation& a : world.test.annotations) unknowns += a.category_id == 0;
        CHECK(unknowns >= 1);
        bool has_zero_category = false;
        for (const auto& c : world.test.categories) has_zero_category |= c.id == 0;
        CHECK(has_zero_category);
    }
    SUBCASE("pixels exist for every image at the declared size") {
        for (const AnnotationSet* split : {&world.labeled, &world.unlabeled, &world.test}) {
            for (const ossod::ImageInfo& im : split->images) {
                REQUIRE(world.images.count(im.id) == 1);
                CHECK(world.images.at(im.id).width() == im.width);
                CHECK(world.images.at(im.id).height() == im.height);
            }
        }
    }
    SUBCASE("bit-deterministic in the seed") {
        const World again = ossod::generate_world(cfg);
        CHECK(again.labeled == world.labeled);
        CHECK(again.unlabeled == world.unlabeled);
        CHECK(again.test == world.test);
        CHECK(again.images == world.images);

        WorldConfig other = cfg;
        other.seed = 8;
        const World different = ossod::generate_world(other);
        CHECK(different.labeled.annotations != world.labeled.annotations);
    }
    SUBCASE("balanced configs produce near-equal known counts") {
        WorldConfig flat = cfg;
        flat.imbalance_ratio = 1.0;
        const World w = ossod::generate_world(flat);
        std::map<int, int> counts;
        for (const Annotation& a : w.labeled.annotations) ++counts[a.category_id];
        // Largest-remainder apportionment: counts differ by at most 1.
        int lo = 1 << 30, hi = 0;
        for (const auto& [id, n] : counts) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
        CHECK(hi - lo <= 1);
    }
}

TEST_CASE("infeasible packing fails loudly") {
    WorldConfig cfg;
    cfg.image_width = 32;
    cfg.image_height = 32;
    cfg.known_classes = 2;
    cfg.unknown_classes = 1;
    cfg.min_objects_per_image = 2;  // two 15px+ objects cannot co-exist in 32px
    cfg.max_objects_per_image = 2;
    cfg.labeled_images = 2;  // enough object budget for the labeled floors
    cfg.unlabeled_images = 1;
    cfg.test_images = 1;
    try {
        ossod::generate_world(cfg);
        FAIL("expected an error");
    } catch (const ossod::error& e) {
        CHECK(e.code() == ossod::errc::validation);
    }
}

TEST_CASE("feature extraction arithmetic") {
    SUBCASE("fully lit crop: chromatic share, aspect, and fill") {
        RasterImage crop(12, 8, Rgb{200, 100, 50});
        const auto f = ossod::features_from_crop(crop, 70.0);
        CHECK(f[0] == doctest::Approx(255.0 * 200 / 350).epsilon(1e-12));
        CHECK(f[1] == doctest::Approx(255.0 * 100 / 350).epsilon(1e-12));
        CHECK(f[2] == doctest::Approx(255.0 * 50 / 350).epsilon(1e-12));
        CHECK(f[3] == doctest::Approx(24.0 * 1.5).epsilon(1e-12));  // aspect 12/8
        CHECK(f[4] == doctest::Approx(48.0).epsilon(1e-12));        // fill 1.0
    }
    SUBCASE("brightness invariance of the color channels") {
        RasterImage bright(10, 10, Rgb{0, 0, 0});
        paint_rect(bright, 2, 2, 6, 6, Rgb{220, 120, 80});
        RasterImage dim(10, 10, Rgb{0, 0, 0});
        paint_rect(dim, 2, 2, 6, 6, Rgb{165, 90, 60});  // same hue, 75% brightness
        const auto fb = ossod::features_from_crop(bright, 70.0);
        const auto fd = ossod::features_from_crop(dim, 70.0);
        for (int i = 0; i < 3; ++i) CHECK(fb[i] == doctest::Approx(fd[i]).epsilon(1e-9));
        CHECK(fb[3] == fd[3]);
        CHECK(fb[4] == fd[4]);
    }
    SUBCASE("colorless crops collapse to neutral gray") {
        RasterImage crop(9, 9, Rgb{0, 0, 0});
        const auto f = ossod::features_from_crop(crop, 70.0);
        CHECK(f[0] == doctest::Approx(85.0));
        CHECK(f[1] == doctest::Approx(85.0));
        CHECK(f[2] == doctest::Approx(85.0));
        CHECK(f[4] == 0.0);  // nothing lit
    }
    SUBCASE("compositing onto the dark background barely moves the features") {
        // Blend a bright crop at beta 0.6 onto the canvas color; background
        // subtraction should keep the chromatic channels nearly unchanged.
        RasterImage crop(12, 12, Rgb{10, 10, 13});
        paint_rect(crop, 1, 1, 10, 10, Rgb{220, 60, 60});
        RasterImage pasted(12, 12, Rgb{10, 10, 13});
        for (int y = 1; y < 11; ++y) {
            for (int x = 1; x < 11; ++x) {
                const auto mix = [](std::uint8_t f, std::uint8_t b) {
                    return static_cast<std::uint8_t>(std::llround(0.6 * f + 0.4 * b));
                };
                pasted.at(x, y) = Rgb{mix(220, 10), mix(60, 10), mix(60, 13)};
            }
        }
        const auto fo = ossod::features_from_crop(crop, 70.0);
        const auto fp = ossod::features_from_crop(pasted, 70.0);
        CHECK(feat_dist(fo, fp) < 4.0);  // within the open-set floor
    }
}

TEST_CASE("fit_supervised on hand-built scenes") {
    const TinyScene scene = two_class_scene();
    const DetectorModel model = ossod::fit_supervised(scene.labeled, scene.provider());

    SUBCASE("one example per class: centroid equals that example's features") {
        const RasterImage& img = scene.pixels.at(1);
        const auto red = ossod::features_from_crop(
            ossod::crop(img, ossod::PixelRect{8, 8, 12, 12}), model.background_threshold);
        const auto blue = ossod::features_from_crop(
            ossod::crop(img, ossod::PixelRect{36, 20, 16, 8}), model.background_threshold);
        CHECK(model.centroids.at(1) == red);
        CHECK(model.centroids.at(2) == blue);
        CHECK(model.class_ids() == std::vector<int>{1, 2});
        CHECK(model.open_set_distance > 0.0);
        model.validate();
    }
    SUBCASE("duplicated examples leave the centroid unchanged") {
        TinyScene dup = two_class_scene();
        dup.labeled.annotations.push_back(annotation(3, 1, 1, {8, 8, 12, 12}));
        dup.labeled.annotations.push_back(annotation(4, 1, 2, {36, 20, 16, 8}));
        const DetectorModel m2 = ossod::fit_supervised(dup.labeled, dup.provider());
        CHECK(m2.centroids.at(1) == model.centroids.at(1));
        CHECK(m2.centroids.at(2) == model.centroids.at(2));
    }
    SUBCASE("a class without usable examples is an error") {
        TinyScene missing = two_class_scene();
        missing.labeled.categories.push_back({3, "ghost"});
        CHECK_THROWS_AS(ossod::fit_supervised(missing.labeled, missing.provider()),
                        ossod::error);
    }
    SUBCASE("sub-detectable annotations do not train") {
        // A 4x4 box (16 px < the 64 px proposal floor) must not shift class 1.
        TinyScene tiny = two_class_scene();
        paint_rect(tiny.pixels.at(1), 56, 40, 4, 4, Rgb{20, 220, 20});
        tiny.labeled.annotations.push_back(annotation(3, 1, 1, {56, 40, 4, 4}));
        const DetectorModel m2 = ossod::fit_supervised(tiny.labeled, tiny.provider());
        CHECK(m2.centroids.at(1) == model.centroids.at(1));
    }
}

TEST_CASE("predict on hand-built scenes") {
    const TinyScene scene = two_class_scene();
    const DetectorModel model = ossod::fit_supervised(scene.labeled, scene.provider());

    SUBCASE("blank image yields no detections") {
        const RasterImage blank(64, 48, Rgb{10, 10, 13});
        CHECK(ossod::predict(model, blank, false).empty());
        CHECK(ossod::predict(model, blank, true).empty());
    }
    SUBCASE("an exact prototype is recognized with high confidence") {
        RasterImage img(64, 48, Rgb{10, 10, 13});
        paint_rect(img, 20, 16, 12, 12, Rgb{220, 60, 60});
        const auto dets = ossod::predict(model, img, false);
        REQUIRE(dets.size() == 1);
        CHECK(dets[0].category_id == 1);
        CHECK(dets[0].confidence > 0.5);  // beats 1/K = 0.5 at distance ~0
        CHECK(ossod::iou(dets[0].box, ossod::Box{20, 16, 12, 12}) == doctest::Approx(1.0));
        // Scores form a distribution over the two known classes.
        REQUIRE(dets[0].class_scores.size() == 2);
        CHECK(dets[0].class_scores[0] + dets[0].class_scores[1] == doctest::Approx(1.0));
        CHECK(dets[0].class_scores[0] > dets[0].class_scores[1]);
    }
    SUBCASE("a far-off color is rejected as unknown only under open_set") {
        RasterImage img(64, 48, Rgb{10, 10, 13});
        paint_rect(img, 20, 16, 14, 14, Rgb{120, 120, 120});  // gray: unlike either class
        const auto closed = ossod::predict(model, img, false);
        REQUIRE(closed.size() == 1);
        CHECK(closed[0].category_id != 0);  // closed-set must pick some class
        const auto open = ossod::predict(model, img, true);
        REQUIRE(open.size() == 1);
        CHECK(open[0].category_id == 0);
        CHECK(open[0].confidence >= 0.0);
        CHECK(open[0].confidence <= 1.0);
    }
    SUBCASE("components below the area floor are not proposed") {
        RasterImage img(64, 48, Rgb{10, 10, 13});
        paint_rect(img, 20, 16, 7, 7, Rgb{220, 60, 60});  // 49 px < 64
        CHECK(ossod::predict(model, img, false).empty());
    }
    SUBCASE("lowering temperature does not change the argmax") {
        RasterImage img(64, 48, Rgb{10, 10, 13});
        paint_rect(img, 20, 16, 12, 10, Rgb{200, 80, 90});
        const auto warm = ossod::predict(model, img, false);
        DetectorModel cold = model;
        cold.temperature = 1.0;
        const auto sharp = ossod::predict(cold, img, false);
        REQUIRE(warm.size() == sharp.size());
        for (std::size_t i = 0; i < warm.size(); ++i) {
            CHECK(warm[i].category_id == sharp[i].category_id);
            CHECK(sharp[i].confidence >= warm[i].confidence);  // sharper softmax
        }
    }
}

TEST_CASE("update_model semantics") {
    const TinyScene scene = two_class_scene();
    const DetectorModel model = ossod::fit_supervised(scene.labeled, scene.provider());

    SUBCASE("weight 0 leaves the model bitwise unchanged") {
        const DetectorModel m2 =
            ossod::update_model(model, scene.labeled, scene.provider(), 0.0);
        CHECK(m2.centroids == model.centroids);
        CHECK(m2.open_set_distance == model.open_set_distance);
    }
    SUBCASE("a batch at the class mean is a fixed point") {
        const DetectorModel m2 =
            ossod::update_model(model, scene.labeled, scene.provider(), 1.0);
        CHECK(m2.centroids == model.centroids);
    }
    SUBCASE("unknown-only batches leave the model bitwise unchanged") {
        TinyScene u = two_class_scene();
        u.labeled.categories.push_back({0, "unknown"});
        u.labeled.annotations = {annotation(1, 1, 0, {8, 8, 12, 12}, 0.9)};
        const DetectorModel m2 = ossod::update_model(model, u.labeled, u.provider(), 1.0);
        CHECK(m2.centroids == model.centroids);
    }
    SUBCASE("sub-detectable-only batches leave the model bitwise unchanged") {
        TinyScene t = two_class_scene();
        t.labeled.annotations = {annotation(1, 1, 1, {8, 8, 5, 5})};
        const DetectorModel m2 = ossod::update_model(model, t.labeled, t.provider(), 1.0);
        CHECK(m2.centroids == model.centroids);
    }
    SUBCASE("repeated updates on a stationary batch converge to the batch mean") {
        // Same geometry, slightly different color: within the matching
        // radius, so the centroid tracks the new mean geometrically.
        TinyScene shifted = two_class_scene();
        paint_rect(shifted.pixels.at(1), 8, 8, 12, 12, Rgb{200, 60, 60});
        const auto target = ossod::features_from_crop(
            ossod::crop(shifted.pixels.at(1), ossod::PixelRect{8, 8, 12, 12}),
            model.background_threshold);
        REQUIRE(feat_dist(target, model.centroids.at(1)) <
                2.0 * model.open_set_distance);  // inside the outlier gate

        DetectorModel m = model;
        for (int i = 0; i < 100; ++i) {
            m = ossod::update_model(m, shifted.labeled, shifted.provider(), 1.0);
        }
        CHECK(feat_dist(m.centroids.at(1), target) < 1e-9);
        // Class 2's batch matches its centroid exactly, so it stays put.
        CHECK(feat_dist(m.centroids.at(2), model.centroids.at(2)) < 1e-9);
    }
    SUBCASE("updates move monotonically toward the batch mean") {
        TinyScene shifted = two_class_scene();
        paint_rect(shifted.pixels.at(1), 8, 8, 12, 12, Rgb{200, 60, 60});
        const auto target = ossod::features_from_crop(
            ossod::crop(shifted.pixels.at(1), ossod::PixelRect{8, 8, 12, 12}),
            model.background_threshold);
        DetectorModel m = model;
        double prev = feat_dist(m.centroids.at(1), target);
        for (int i = 0; i < 10; ++i) {
            m = ossod::update_model(m, shifted.labeled, shifted.provider(), 1.0);
            const double d = feat_dist(m.centroids.at(1), target);
            CHECK(d <= prev);
            prev = d;
        }
    }
}

TEST_CASE("parameter vector round trip") {
    const TinyScene scene = two_class_scene();
    const DetectorModel model = ossod::fit_supervised(scene.labeled, scene.provider());

    const ossod::ParamVector p = model.params();
    CHECK(p.values.size() == 2 * 5 + 1);  // two centroids plus delta

    const DetectorModel back = model.with_params(p);
    CHECK(back.centroids == model.centroids);
    CHECK(back.open_set_distance == model.open_set_distance);

    SUBCASE("EMA midpoint lands between two models") {
        DetectorModel other = model;
        for (auto& [id, c] : other.centroids) {
            for (double& v : c) v += 10.0;
        }
        ossod::EmaState s = ossod::make_ema_state(0.5, model.params());
        s = ossod::ema_update(s, other.params());
        const DetectorModel mid = model.with_params(s.current);
        for (const auto& [id, c] : mid.centroids) {
            for (std::size_t i = 0; i < c.size(); ++i) {
                CHECK(c[i] == doctest::Approx(model.centroids.at(id)[i] + 5.0).epsilon(1e-12));
            }
        }
    }
    SUBCASE("incompatible layouts are rejected") {
        ossod::ParamVector wrong = p;
        wrong.layout_tag += "-other";
        CHECK_THROWS_AS(model.with_params(wrong), ossod::error);
        ossod::ParamVector short_vec = p;
        short_vec.values.pop_back();
        CHECK_THROWS_AS(model.with_params(short_vec), ossod::error);
    }
}

TEST_CASE("supervised fit reaches the sanity floor on a clean balanced world") {
    WorldConfig cfg;
    cfg.known_classes = 3;
    cfg.unknown_classes = 1;
    cfg.imbalance_ratio = 1.0;
    cfg.labeled_images = 30;
    cfg.unlabeled_images = 5;
    cfg.test_images = 30;
    cfg.noise_level = 0.0;
    cfg.seed = 3;
    const World world = ossod::generate_world(cfg);
    const auto provider = ossod::make_provider(world.images);
    const DetectorModel model = ossod::fit_supervised(world.labeled, provider);

    // Training-set accuracy: every labeled object is re-detected as its own
    // class (well-separated clean classes).
    int checked = 0;
    for (const ossod::ImageInfo& im : world.labeled.images) {
        const auto dets = ossod::predict(model, world.images.at(im.id), false);
        for (const Annotation& gt : world.labeled.annotations) {
            if (gt.image_id != im.id) continue;
            bool matched = false;
            for (const DetectionResult& d : dets) {
                if (ossod::iou(d.box, ossod::box_from_bbox(gt.bbox)) >= 0.5 &&
                    d.category_id == gt.category_id) {
                    matched = true;
                }
            }
            CHECK(matched);
            ++checked;
        }
    }
    CHECK(checked > 0);

    // Open-set predictions on the test split clear the mAP floor.
    std::map<int, std::vector<DetectionResult>> by_image;
    for (const ossod::ImageInfo& im : world.test.images) {
        by_image[im.id] = ossod::predict(model, world.images.at(im.id), true);
    }
    const AnnotationSet preds =
        ossod::predictions_to_set(world.test.images, world.test.categories, by_image);
    const ossod::ApTable ap = ossod::evaluate(world.test, preds, 0.5);
    CHECK(ap.map >= 0.9);
}

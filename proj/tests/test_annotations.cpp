#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ossod/annotations.hpp"
#include "ossod/errors.hpp"
#include "ossod/rng.hpp"
#include "support/helpers.hpp"

using ossod::Annotation;
using ossod::AnnotationSet;
using ossod::Category;
using ossod::errc;
using ossod::Rng;
using testsupport::annotation;
using testsupport::image_info;

namespace {

AnnotationSet random_valid_set(Rng& rng) {
    AnnotationSet set;
    const int n_images = rng.range_int(1, 5);
    for (int i = 0; i < n_images; ++i) {
        set.images.push_back(image_info(i + 1, rng.range_int(20, 100), rng.range_int(20, 100)));
    }
    const int n_cats = rng.range_int(1, 4);
    set.categories.push_back({0, "unknown"});
    for (int c = 1; c <= n_cats; ++c) {
        set.categories.push_back({c, "class_" + std::to_string(c)});
    }
    int next_id = 1;
    for (int i = 0; i < rng.range_int(0, 12); ++i) {
        const ossod::ImageInfo& img =
            set.images[static_cast<std::size_t>(rng.below(set.images.size()))];
        const double w = rng.range_real(1.0, img.width / 2.0);
        const double h = rng.range_real(1.0, img.height / 2.0);
        const double x = rng.range_real(0.0, img.width - w);
        const double y = rng.range_real(0.0, img.height - h);
        std::optional<double> score;
        if (rng.chance(0.5)) score = rng.unit();
        set.annotations.push_back(
            annotation(next_id++, img.id, rng.range_int(0, n_cats), {x, y, w, h}, score));
    }
    return set;
}

errc code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const ossod::error& e) {
        return e.code();
    }
    FAIL("expected an ossod::error");
    return errc::internal;
}

}  // namespace

TEST_CASE("empty set is valid and round-trips") {
    const std::string text = R"({"images":[],"categories":[],"annotations":[]})";
    const AnnotationSet set = ossod::parse_annotation_set_text(text);
    CHECK(set.images.empty());
    CHECK(set.categories.empty());
    CHECK(set.annotations.empty());
    CHECK(ossod::parse_annotation_set_text(ossod::serialize_annotation_set(set)) == set);
}

TEST_CASE("structural invariants are enforced with the validation category") {
    AnnotationSet base = testsupport::one_image_set(
        50, 40, {{1, "a"}}, {annotation(1, 1, 1, {1, 1, 5, 5}, 0.5)});
    base.validate();  // sanity: the fixture itself is fine

    SUBCASE("dangling image id") {
        AnnotationSet s = base;
        s.annotations[0].image_id = 99;
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("dangling category id") {
        AnnotationSet s = base;
        s.annotations[0].category_id = 7;
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("non-positive box") {
        AnnotationSet s = base;
        s.annotations[0].bbox = {1, 1, 0, 5};
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("box outside the image") {
        AnnotationSet s = base;
        s.annotations[0].bbox = {48, 1, 5, 5};
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("score outside [0,1]") {
        AnnotationSet s = base;
        s.annotations[0].score = 1.5;
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("duplicate annotation ids") {
        AnnotationSet s = base;
        s.annotations.push_back(annotation(1, 1, 1, {2, 2, 3, 3}, 0.25));
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
    SUBCASE("duplicate image ids") {
        AnnotationSet s = base;
        s.images.push_back(image_info(1, 10, 10));
        CHECK(code_of([&] { s.validate(); }) == errc::validation);
    }
}

TEST_CASE("error taxonomy: parse vs schema vs validation") {
    CHECK(code_of([] { ossod::parse_annotation_set_text("{nope"); }) == errc::parse);
    CHECK(code_of([] { ossod::parse_annotation_set_text(R"({"images":[]})"); }) == errc::schema);
    CHECK(code_of([] {
              ossod::parse_annotation_set_text(
                  R"({"images":[{"id":"one","width":5,"height":5,"file_name":"x.ppm"}],)"
                  R"("categories":[],"annotations":[]})");
          }) == errc::schema);
    CHECK(code_of([] {
              ossod::parse_annotation_set_text(
                  R"({"images":[],"categories":[],)"
                  R"("annotations":[{"id":1,"image_id":4,"category_id":0,"bbox":[0,0,1,1]}]})");
          }) == errc::validation);
}

TEST_CASE("parse/serialize round trip on random valid sets") {
    Rng rng(2024);
    for (int i = 0; i < 50; ++i) {
        const AnnotationSet set = random_valid_set(rng);
        const std::string text = ossod::serialize_annotation_set(set);
        CHECK(ossod::parse_annotation_set_text(text) == set);
        // Byte stability: serialization is a pure function of the value.
        CHECK(ossod::serialize_annotation_set(set) == text);
    }
}

TEST_CASE("file save/load round trip") {
    testsupport::TempDir dir("ossod-ann");
    Rng rng(7);
    const AnnotationSet set = random_valid_set(rng);
    const auto path = dir.path() / "set.json";
    ossod::save_annotation_set(set, path);
    CHECK(ossod::parse_annotation_set(path) == set);
    CHECK(code_of([&] { ossod::parse_annotation_set(dir.path() / "missing.json"); }) == errc::io);
}

TEST_CASE("class frequencies on the imbalanced fixture") {
    // Six classes with counts {187, 30, 26, 48, 28, 45}; the majority class
    // holds 51.37% of 364 — the working example for the frequency table.
    const std::vector<std::int64_t> counts{187, 30, 26, 48, 28, 45};
    AnnotationSet set;
    set.images = {image_info(1, 500, 500)};
    int next = 1;
    for (int c = 1; c <= 6; ++c) {
        set.categories.push_back({c, "class_" + std::to_string(c)});
        for (std::int64_t i = 0; i < counts[static_cast<std::size_t>(c - 1)]; ++i) {
            const double x = static_cast<double>(next % 450);
            const double y = static_cast<double>((next / 450) % 450);
            set.annotations.push_back(annotation(next++, 1, c, {x, y, 2, 2}));
        }
    }
    const ossod::ClassStats stats = ossod::class_frequencies(set);
    CHECK(stats.total == 364);
    REQUIRE(stats.per_class.size() == 6);
    const std::vector<double> expected{51.373626, 8.241758, 7.142857, 13.186813, 7.692308,
                                       12.362637};
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(stats.per_class[i].category_id == static_cast<int>(i + 1));
        CHECK(stats.per_class[i].count == counts[i]);
        CHECK(stats.per_class[i].percentage == doctest::Approx(expected[i]).epsilon(1e-6));
    }
}

TEST_CASE("class frequencies: degenerate shapes") {
    SUBCASE("single class is 100%") {
        AnnotationSet set = testsupport::one_image_set(
            50, 50, {{1, "a"}},
            {annotation(1, 1, 1, {0, 0, 2, 2}), annotation(2, 1, 1, {3, 3, 2, 2}),
             annotation(3, 1, 1, {6, 6, 2, 2}), annotation(4, 1, 1, {9, 9, 2, 2}),
             annotation(5, 1, 1, {12, 12, 2, 2})});
        const auto stats = ossod::class_frequencies(set);
        CHECK(stats.total == 5);
        CHECK(stats.per_class[0].percentage == 100.0);
    }
    SUBCASE("two singletons split 50/50") {
        AnnotationSet set = testsupport::one_image_set(
            50, 50, {{1, "a"}, {2, "b"}},
            {annotation(1, 1, 1, {0, 0, 2, 2}), annotation(2, 1, 2, {3, 3, 2, 2})});
        const auto stats = ossod::class_frequencies(set);
        CHECK(stats.per_class[0].percentage == 50.0);
        CHECK(stats.per_class[1].percentage == 50.0);
    }
    SUBCASE("unknown-tagged annotations are excluded") {
        AnnotationSet set = testsupport::one_image_set(
            50, 50, {{0, "unknown"}, {1, "a"}},
            {annotation(1, 1, 0, {0, 0, 2, 2}, 0.9), annotation(2, 1, 1, {3, 3, 2, 2})});
        const auto stats = ossod::class_frequencies(set);
        CHECK(stats.total == 1);
        REQUIRE(stats.per_class.size() == 1);
        CHECK(stats.per_class[0].category_id == 1);
        CHECK(stats.per_class[0].percentage == 100.0);
    }
    SUBCASE("empty annotations give zero totals, not division errors") {
        AnnotationSet set = testsupport::one_image_set(50, 50, {{1, "a"}}, {});
        const auto stats = ossod::class_frequencies(set);
        CHECK(stats.total == 0);
        REQUIRE(stats.per_class.size() == 1);
        CHECK(stats.per_class[0].count == 0);
        CHECK(stats.per_class[0].percentage == 0.0);
    }
}

TEST_CASE("confidence filtering") {
    AnnotationSet set = testsupport::one_image_set(
        50, 50, {{1, "a"}},
        {annotation(1, 1, 1, {0, 0, 2, 2}, 0.3), annotation(2, 1, 1, {3, 3, 2, 2}, 0.5),
         annotation(3, 1, 1, {6, 6, 2, 2}, 0.9), annotation(4, 1, 1, {9, 9, 2, 2})});

    SUBCASE("threshold keeps scores >= tau and all ground truth") {
        const AnnotationSet out = ossod::filter_by_confidence(set, 0.5);
        REQUIRE(out.annotations.size() == 3);
        CHECK(out.annotations[0].id == 2);
        CHECK(out.annotations[1].id == 3);
        CHECK(out.annotations[2].id == 4);  // score-less ground truth survives
        CHECK(out.images == set.images);
        CHECK(out.categories == set.categories);
    }
    SUBCASE("tau = 0 is the identity") {
        CHECK(ossod::filter_by_confidence(set, 0.0) == set);
    }
    SUBCASE("tau = 1 keeps only perfect scores and ground truth") {
        AnnotationSet with_one = set;
        with_one.annotations.push_back(annotation(5, 1, 1, {12, 12, 2, 2}, 1.0));
        const AnnotationSet out = ossod::filter_by_confidence(with_one, 1.0);
        REQUIRE(out.annotations.size() == 2);
        CHECK(out.annotations[0].id == 4);
        CHECK(out.annotations[1].id == 5);
    }
    SUBCASE("idempotent and monotone in tau") {
        Rng rng(55);
        for (int i = 0; i < 20; ++i) {
            const AnnotationSet s = random_valid_set(rng);
            const double t1 = rng.unit();
            const double t2 = t1 + (1.0 - t1) * rng.unit();
            const AnnotationSet f1 = ossod::filter_by_confidence(s, t1);
            const AnnotationSet f2 = ossod::filter_by_confidence(s, t2);
            CHECK(ossod::filter_by_confidence(f1, t1) == f1);
            // Every survivor of the stricter filter survives the looser one.
            for (const Annotation& a : f2.annotations) {
                CHECK(std::find(f1.annotations.begin(), f1.annotations.end(), a) !=
                      f1.annotations.end());
            }
        }
    }
}

TEST_CASE("merging sets") {
    const AnnotationSet a = testsupport::one_image_set(
        50, 50, {{1, "a"}},
        {annotation(1, 1, 1, {0, 0, 2, 2}), annotation(2, 1, 1, {3, 3, 2, 2}),
         annotation(3, 1, 1, {6, 6, 2, 2})});
    AnnotationSet b;
    b.images = {image_info(2, 30, 30)};
    b.categories = {{1, "a"}};
    b.annotations = {annotation(1, 2, 1, {0, 0, 2, 2}), annotation(2, 2, 1, {4, 4, 2, 2})};

    SUBCASE("cardinality and id reissue") {
        const AnnotationSet m = ossod::merge_sets(a, b);
        REQUIRE(m.annotations.size() == 5);
        REQUIRE(m.images.size() == 2);
        std::vector<int> ids;
        for (const Annotation& x : m.annotations) ids.push_back(x.id);
        const std::vector<int> expect{1, 2, 3, 4, 5};
        CHECK(ids == expect);
        // Order: all of a, then all of b.
        CHECK(m.annotations[3].image_id == 2);
        m.validate();
    }
    SUBCASE("merge with an empty set is identity up to id reissue") {
        AnnotationSet empty;
        empty.categories = a.categories;
        const AnnotationSet m = ossod::merge_sets(a, empty);
        CHECK(m.images == a.images);
        CHECK(m.annotations.size() == a.annotations.size());
    }
    SUBCASE("category table mismatch is rejected") {
        AnnotationSet c = b;
        c.categories = {{1, "renamed"}};
        CHECK(code_of([&] { ossod::merge_sets(a, c); }) == errc::validation);
    }
    SUBCASE("overlapping image ids must agree exactly") {
        AnnotationSet c = b;
        c.images = {image_info(1, 99, 99)};  // id 1 with different size
        c.annotations.clear();
        CHECK(code_of([&] { ossod::merge_sets(a, c); }) == errc::validation);
    }
}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ossod {

// Category id 0 is reserved for "unknown" (open-set) objects everywhere in
// this library; known classes use ids >= 1.
constexpr int kUnknownCategoryId = 0;

struct Category {
    int id = 0;
    std::string name;

    bool operator==(const Category&) const = default;
};

struct ImageInfo {
    int id = 0;
    int width = 0;
    int height = 0;
    std::string file_name;

    bool operator==(const ImageInfo&) const = default;
};

struct Annotation {
    int id = 0;
    int image_id = 0;
    int category_id = 0;
    std::array<double, 4> bbox{0.0, 0.0, 0.0, 0.0};  // x, y, w, h
    std::optional<double> score;                     // absent for ground truth

    bool operator==(const Annotation&) const = default;
};

struct AnnotationSet {
    std::vector<ImageInfo> images;
    std::vector<Category> categories;
    std::vector<Annotation> annotations;

    const ImageInfo* find_image(int id) const;
    const Category* find_category(int id) const;

    // Enforces the structural invariants: unique ids within each table,
    // non-empty names/file names, every annotation referencing an existing
    // image and category, boxes with positive size lying inside their image,
    // scores (when present) in [0, 1].
    void validate() const;

    bool operator==(const AnnotationSet&) const = default;
};

// JSON round trip. Parsing distinguishes malformed JSON (parse), missing or
// mistyped fields (schema), and invariant violations such as dangling ids
// (validation). Serialization writes numbers at full round-trip precision
// and is byte-stable for equal inputs.
AnnotationSet parse_annotation_set(const std::filesystem::path& path);
AnnotationSet parse_annotation_set_text(const std::string& text);
std::string serialize_annotation_set(const AnnotationSet& set);
void save_annotation_set(const AnnotationSet& set, const std::filesystem::path& path);

struct ClassStats {
    struct Entry {
        int category_id = 0;
        std::int64_t count = 0;
        double percentage = 0.0;  // 100 * count / total; 0 when total is 0
    };
    std::vector<Entry> per_class;  // known categories only, ascending id
    std::int64_t total = 0;        // annotations over known categories
};

// Per-class annotation counts over known categories (id >= 1). Categories
// with no annotations appear with count 0. Unknown-tagged annotations are
// excluded from both the entries and the total.
ClassStats class_frequencies(const AnnotationSet& set);

// Keeps annotations with score >= tau. Score-less annotations (ground truth)
// are always kept. Images and categories pass through unchanged.
AnnotationSet filter_by_confidence(const AnnotationSet& set, double tau);

// Union of two sets sharing one category table. Image tables must be
// disjoint or agree exactly on common ids; annotation ids are reissued
// sequentially (all of a, then all of b) so the result is collision-free.
AnnotationSet merge_sets(const AnnotationSet& a, const AnnotationSet& b);

}  // namespace ossod

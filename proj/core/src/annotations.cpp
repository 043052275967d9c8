#include "ossod/annotations.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ossod/errors.hpp"

namespace ossod {

namespace {

using nlohmann::json;

const json& expect_field(const json& obj, const char* key, const char* where) {
    auto it = obj.find(key);
    require(it != obj.end(), errc::schema,
            std::string(where) + ": missing field '" + key + "'");
    return *it;
}

int expect_int(const json& obj, const char* key, const char* where) {
    const json& v = expect_field(obj, key, where);
    require(v.is_number_integer(), errc::schema,
            std::string(where) + ": field '" + key + "' must be an integer");
    return v.get<int>();
}

double expect_number(const json& v, const char* what) {
    require(v.is_number(), errc::schema, std::string(what) + " must be a number");
    return v.get<double>();
}

std::string expect_string(const json& obj, const char* key, const char* where) {
    const json& v = expect_field(obj, key, where);
    require(v.is_string(), errc::schema,
            std::string(where) + ": field '" + key + "' must be a string");
    return v.get<std::string>();
}

const json& expect_array(const json& obj, const char* key, const char* where) {
    const json& v = expect_field(obj, key, where);
    require(v.is_array(), errc::schema,
            std::string(where) + ": field '" + key + "' must be an array");
    return v;
}

json annotation_to_json(const Annotation& a) {
    json j;
    j["id"] = a.id;
    j["image_id"] = a.image_id;
    j["category_id"] = a.category_id;
    j["bbox"] = a.bbox;
    if (a.score) j["score"] = *a.score;
    return j;
}

}  // namespace

const ImageInfo* AnnotationSet::find_image(int id) const {
    for (const ImageInfo& im : images) {
        if (im.id == id) return &im;
    }
    return nullptr;
}

const Category* AnnotationSet::find_category(int id) const {
    for (const Category& c : categories) {
        if (c.id == id) return &c;
    }
    return nullptr;
}

void AnnotationSet::validate() const {
    std::map<int, const ImageInfo*> image_by_id;
    for (const ImageInfo& im : images) {
        require(im.width > 0 && im.height > 0, errc::validation,
                "image " + std::to_string(im.id) + ": non-positive dimensions");
        require(!im.file_name.empty(), errc::validation,
                "image " + std::to_string(im.id) + ": empty file_name");
        require(image_by_id.emplace(im.id, &im).second, errc::validation,
                "duplicate image id " + std::to_string(im.id));
    }
    std::set<int> category_ids;
    for (const Category& c : categories) {
        require(c.id >= 0, errc::validation, "category ids must be >= 0");
        require(!c.name.empty(), errc::validation,
                "category " + std::to_string(c.id) + ": empty name");
        require(category_ids.insert(c.id).second, errc::validation,
                "duplicate category id " + std::to_string(c.id));
    }
    std::set<int> annotation_ids;
    for (const Annotation& a : annotations) {
        const std::string tag = "annotation " + std::to_string(a.id);
        require(annotation_ids.insert(a.id).second, errc::validation,
                "duplicate annotation id " + std::to_string(a.id));
        auto im = image_by_id.find(a.image_id);
        require(im != image_by_id.end(), errc::validation,
                tag + ": unknown image_id " + std::to_string(a.image_id));
        require(category_ids.count(a.category_id) != 0, errc::validation,
                tag + ": unknown category_id " + std::to_string(a.category_id));
        const auto& b = a.bbox;
        require(b[2] > 0.0 && b[3] > 0.0, errc::validation, tag + ": box has non-positive size");
        require(b[0] >= 0.0 && b[1] >= 0.0 && b[0] + b[2] <= im->second->width &&
                    b[1] + b[3] <= im->second->height,
                errc::validation, tag + ": box exceeds image bounds");
        if (a.score) {
            require(*a.score >= 0.0 && *a.score <= 1.0, errc::validation,
                    tag + ": score outside [0, 1]");
        }
    }
}

AnnotationSet parse_annotation_set_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(errc::parse, std::string("annotations: malformed JSON: ") + e.what());
    }
    require(root.is_object(), errc::schema, "annotations: top level must be an object");

    AnnotationSet set;
    for (const json& j : expect_array(root, "images", "annotations")) {
        require(j.is_object(), errc::schema, "annotations: image entries must be objects");
        ImageInfo im;
        im.id = expect_int(j, "id", "image");
        im.width = expect_int(j, "width", "image");
        im.height = expect_int(j, "height", "image");
        im.file_name = expect_string(j, "file_name", "image");
        set.images.push_back(std::move(im));
    }
    for (const json& j : expect_array(root, "categories", "annotations")) {
        require(j.is_object(), errc::schema, "annotations: category entries must be objects");
        Category c;
        c.id = expect_int(j, "id", "category");
        c.name = expect_string(j, "name", "category");
        set.categories.push_back(std::move(c));
    }
    for (const json& j : expect_array(root, "annotations", "annotations")) {
        require(j.is_object(), errc::schema, "annotations: annotation entries must be objects");
        Annotation a;
        a.id = expect_int(j, "id", "annotation");
        a.image_id = expect_int(j, "image_id", "annotation");
        a.category_id = expect_int(j, "category_id", "annotation");
        const json& bbox = expect_field(j, "bbox", "annotation");
        require(bbox.is_array() && bbox.size() == 4, errc::schema,
                "annotation: bbox must be an array of 4 numbers");
        for (std::size_t i = 0; i < 4; ++i) {
            a.bbox[i] = expect_number(bbox[i], "annotation: bbox element");
        }
        if (auto it = j.find("score"); it != j.end()) {
            a.score = expect_number(*it, "annotation: score");
        }
        set.annotations.push_back(std::move(a));
    }
    set.validate();
    return set;
}

AnnotationSet parse_annotation_set(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), errc::io, "annotations: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_annotation_set_text(buf.str());
}

std::string serialize_annotation_set(const AnnotationSet& set) {
    json root;
    root["images"] = json::array();
    for (const ImageInfo& im : set.images) {
        root["images"].push_back({{"id", im.id},
                                  {"width", im.width},
                                  {"height", im.height},
                                  {"file_name", im.file_name}});
    }
    root["categories"] = json::array();
    for (const Category& c : set.categories) {
        root["categories"].push_back({{"id", c.id}, {"name", c.name}});
    }
    root["annotations"] = json::array();
    for (const Annotation& a : set.annotations) {
        root["annotations"].push_back(annotation_to_json(a));
    }
    return root.dump(2) + "\n";
}

void save_annotation_set(const AnnotationSet& set, const std::filesystem::path& path) {
    set.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), errc::io, "annotations: cannot open for write: " + path.string());
    out << serialize_annotation_set(set);
    out.flush();
    require(out.good(), errc::io, "annotations: write failed: " + path.string());
}

ClassStats class_frequencies(const AnnotationSet& set) {
    std::map<int, std::int64_t> counts;
    for (const Category& c : set.categories) {
        if (c.id != kUnknownCategoryId) counts[c.id] = 0;
    }
    std::int64_t total = 0;
    for (const Annotation& a : set.annotations) {
        if (a.category_id == kUnknownCategoryId) continue;
        auto it = counts.find(a.category_id);
        require(it != counts.end(), errc::validation,
                "class_frequencies: annotation references unlisted category " +
                    std::to_string(a.category_id));
        ++it->second;
        ++total;
    }
    ClassStats stats;
    stats.total = total;
    for (const auto& [id, count] : counts) {
        const double pct = total > 0 ? 100.0 * static_cast<double>(count) / total : 0.0;
        stats.per_class.push_back({id, count, pct});
    }
    return stats;
}

AnnotationSet filter_by_confidence(const AnnotationSet& set, double tau) {
    require(tau >= 0.0 && tau <= 1.0, errc::validation,
            "filter_by_confidence: tau must be in [0, 1]");
    AnnotationSet out;
    out.images = set.images;
    out.categories = set.categories;
    for (const Annotation& a : set.annotations) {
        if (!a.score || *a.score >= tau) out.annotations.push_back(a);
    }
    return out;
}

AnnotationSet merge_sets(const AnnotationSet& a, const AnnotationSet& b) {
    auto sorted_categories = [](const AnnotationSet& s) {
        std::vector<Category> c = s.categories;
        std::sort(c.begin(), c.end(), [](const Category& x, const Category& y) {
            return x.id < y.id;
        });
        return c;
    };
    require(sorted_categories(a) == sorted_categories(b), errc::validation,
            "merge_sets: category tables differ");

    AnnotationSet out;
    out.categories = a.categories;
    out.images = a.images;
    for (const ImageInfo& im : b.images) {
        const ImageInfo* existing = out.find_image(im.id);
        if (existing) {
            require(*existing == im, errc::validation,
                    "merge_sets: image id " + std::to_string(im.id) +
                        " present in both sets with different entries");
        } else {
            out.images.push_back(im);
        }
    }
    int next_id = 1;
    for (const AnnotationSet* s : {&a, &b}) {
        for (const Annotation& ann : s->annotations) {
            Annotation copy = ann;
            copy.id = next_id++;
            out.annotations.push_back(copy);
        }
    }
    out.validate();
    return out;
}

}  // namespace ossod

#include "ossod/cce.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ossod/errors.hpp"
#include "ossod/rng.hpp"

namespace ossod {

namespace {

PixelRect snap_bbox(const std::array<double, 4>& bbox) {
    return PixelRect{static_cast<int>(std::llround(bbox[0])), static_cast<int>(std::llround(bbox[1])),
                     static_cast<int>(std::llround(bbox[2])), static_cast<int>(std::llround(bbox[3]))};
}

}  // namespace

std::map<int, std::int64_t> ForegroundLibrary::frequencies() const {
    std::map<int, std::int64_t> f;
    for (const auto& [id, segs] : segments_by_class) {
        f[id] = static_cast<std::int64_t>(segs.size());
    }
    return f;
}

double ForegroundLibrary::f_target() const {
    std::int64_t total = 0;
    std::int64_t classes = 0;
    for (const auto& [id, segs] : segments_by_class) {
        if (segs.empty()) continue;
        total += static_cast<std::int64_t>(segs.size());
        ++classes;
    }
    if (classes == 0) return 0.0;
    return static_cast<double>(total) / static_cast<double>(classes);
}

std::int64_t ForegroundLibrary::target_count() const {
    return std::llround(f_target());
}

std::map<int, double> ForegroundLibrary::alpha() const {
    const double target = f_target();
    std::map<int, double> a;
    for (const auto& [id, segs] : segments_by_class) {
        if (!segs.empty()) a[id] = target / static_cast<double>(segs.size());
    }
    return a;
}

std::size_t ForegroundLibrary::total_segments() const {
    std::size_t n = 0;
    for (const auto& [id, segs] : segments_by_class) n += segs.size();
    return n;
}

ForegroundLibrary build_library(const AnnotationSet& labeled, const ImageProvider& images) {
    labeled.validate();
    ForegroundLibrary lib;
    for (const Annotation& a : labeled.annotations) {
        if (a.category_id == kUnknownCategoryId) continue;
        const RasterImage& img = images(a.image_id);
        const PixelRect rect = snap_bbox(a.bbox);
        require(rect.w > 0 && rect.h > 0, errc::validation,
                "build_library: annotation " + std::to_string(a.id) + " has a degenerate box");
        require(rect.x >= 0 && rect.y >= 0 && rect.x + rect.w <= img.width() &&
                    rect.y + rect.h <= img.height(),
                errc::validation,
                "build_library: annotation " + std::to_string(a.id) + " exceeds image bounds");
        ForegroundSegment seg;
        seg.crop = crop(img, rect);
        seg.category_id = a.category_id;
        seg.source_image_id = a.image_id;
        seg.source_bbox = Box{static_cast<double>(rect.x), static_cast<double>(rect.y),
                              static_cast<double>(rect.w), static_cast<double>(rect.h)};
        lib.segments_by_class[a.category_id].push_back(std::move(seg));
    }
    return lib;
}

ForegroundLibrary balance_library(const ForegroundLibrary& lib, std::uint64_t seed) {
    require(lib.total_segments() > 0, errc::validation, "balance_library: empty library");
    const std::int64_t target = lib.target_count();
    const Rng root(mix_seed(seed));

    ForegroundLibrary out;
    for (const auto& [class_id, segs] : lib.segments_by_class) {
        if (segs.empty()) continue;
        Rng rng = root.fork(static_cast<std::uint64_t>(class_id));
        std::vector<ForegroundSegment>& dst = out.segments_by_class[class_id];
        const std::int64_t n = static_cast<std::int64_t>(segs.size());
        if (n >= target) {
            // Uniform subsample without replacement, keeping original order.
            std::vector<std::size_t> idx(segs.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            for (std::int64_t k = 0; k < target; ++k) {
                const std::size_t j =
                    static_cast<std::size_t>(k) +
                    static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(idx.size() - k)));
                std::swap(idx[k], idx[j]);
            }
            idx.resize(static_cast<std::size_t>(target));
            std::sort(idx.begin(), idx.end());
            for (std::size_t i : idx) dst.push_back(segs[i]);
        } else {
            dst = segs;
            for (std::int64_t k = n; k < target; ++k) {
                const std::size_t pick =
                    static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(segs.size())));
                ForegroundSegment dup = segs[pick];
                if (rng.chance(0.5)) dup.crop = flip_horizontal(dup.crop);
                dst.push_back(std::move(dup));
            }
        }
    }
    return out;
}

void save_library(const ForegroundLibrary& lib, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, errc::io, "library: cannot create directory " + dir.string());

    nlohmann::json manifest;
    manifest["segments"] = nlohmann::json::array();
    int index = 0;
    for (const auto& [class_id, segs] : lib.segments_by_class) {
        for (const ForegroundSegment& seg : segs) {
            char name[32];
            std::snprintf(name, sizeof(name), "seg_%05d.ppm", index++);
            save_ppm(seg.crop, dir / name);
            manifest["segments"].push_back(
                {{"file", name},
                 {"category_id", seg.category_id},
                 {"source_image_id", seg.source_image_id},
                 {"source_bbox", bbox_from_box(seg.source_bbox)}});
        }
    }
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    require(out.good(), errc::io, "library: cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
    out.flush();
    require(out.good(), errc::io, "library: manifest write failed in " + dir.string());
}

ForegroundLibrary load_library(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    require(in.good(), errc::io, "library: cannot open manifest in " + dir.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
        fail(errc::parse, std::string("library: malformed manifest: ") + e.what());
    }
    require(manifest.is_object() && manifest.contains("segments") &&
                manifest["segments"].is_array(),
            errc::schema, "library: manifest must contain a 'segments' array");

    ForegroundLibrary lib;
    for (const nlohmann::json& j : manifest["segments"]) {
        require(j.is_object(), errc::schema, "library: segment entries must be objects");
        require(j.contains("file") && j["file"].is_string(), errc::schema,
                "library: segment missing 'file'");
        require(j.contains("category_id") && j["category_id"].is_number_integer(), errc::schema,
                "library: segment missing 'category_id'");
        require(j.contains("source_image_id") && j["source_image_id"].is_number_integer(),
                errc::schema, "library: segment missing 'source_image_id'");
        require(j.contains("source_bbox") && j["source_bbox"].is_array() &&
                    j["source_bbox"].size() == 4,
                errc::schema, "library: segment missing 4-element 'source_bbox'");
        ForegroundSegment seg;
        seg.category_id = j["category_id"].get<int>();
        require(seg.category_id >= 1, errc::validation,
                "library: segment category ids must be >= 1");
        seg.source_image_id = j["source_image_id"].get<int>();
        std::array<double, 4> bbox{};
        for (std::size_t i = 0; i < 4; ++i) {
            require(j["source_bbox"][i].is_number(), errc::schema,
                    "library: source_bbox entries must be numbers");
            bbox[i] = j["source_bbox"][i].get<double>();
        }
        seg.source_bbox = box_from_bbox(bbox);
        seg.crop = load_ppm(dir / j["file"].get<std::string>());
        lib.segments_by_class[seg.category_id].push_back(std::move(seg));
    }
    return lib;
}

void SynthesisConfig::validate() const {
    require(beta >= 0.0 && beta <= 1.0, errc::config, "synthesis: beta must be in [0, 1]");
    require(synthetic_score >= 0.0 && synthetic_score <= 1.0, errc::config,
            "synthesis: synthetic_score must be in [0, 1]");
    require(placements_per_image >= 1, errc::config,
            "synthesis: placements_per_image must be >= 1");
}

SynthesisResult synthesize(const ForegroundLibrary& balanced, const AnnotationSet& unlabeled,
                           const ImageProvider& images, const SynthesisConfig& cfg) {
    cfg.validate();
    require(!unlabeled.images.empty(), errc::validation, "synthesize: no unlabeled images");
    for (const auto& [class_id, segs] : balanced.segments_by_class) {
        if (!segs.empty()) {
            require(unlabeled.find_category(class_id) != nullptr, errc::validation,
                    "synthesize: unlabeled set lacks category " + std::to_string(class_id));
        }
    }

    // Flatten in class-id order so segment indices (and their RNG streams)
    // are stable regardless of how the library was built.
    std::vector<const ForegroundSegment*> flat;
    for (const auto& [class_id, segs] : balanced.segments_by_class) {
        for (const ForegroundSegment& seg : segs) flat.push_back(&seg);
    }

    SynthesisResult result;
    result.annotations.images = unlabeled.images;
    result.annotations.categories = unlabeled.categories;

    const Rng root(mix_seed(cfg.seed));
    Rng group_rng = root.fork("group-image");
    int next_ann_id = 1;
    int group_image_id = 0;

    for (std::size_t i = 0; i < flat.size(); ++i) {
        const ForegroundSegment& seg = *flat[i];
        if (i % static_cast<std::size_t>(cfg.placements_per_image) == 0) {
            group_image_id =
                unlabeled.images[group_rng.below(unlabeled.images.size())].id;
        }
        Rng seg_rng = root.fork(i);

        const ImageInfo* target = result.annotations.find_image(group_image_id);
        if (seg.crop.width() > target->width || seg.crop.height() > target->height) {
            // Fall back to a uniformly chosen image that can hold the crop.
            std::vector<const ImageInfo*> fits;
            for (const ImageInfo& im : unlabeled.images) {
                if (seg.crop.width() <= im.width && seg.crop.height() <= im.height) {
                    fits.push_back(&im);
                }
            }
            if (fits.empty()) {
                ++result.skipped_segments;
                continue;
            }
            target = fits[seg_rng.below(fits.size())];
        }

        const int max_x = target->width - seg.crop.width();
        const int max_y = target->height - seg.crop.height();
        const int x = static_cast<int>(seg_rng.below(static_cast<std::uint64_t>(max_x) + 1));
        const int y = static_cast<int>(seg_rng.below(static_cast<std::uint64_t>(max_y) + 1));

        auto it = result.images.find(target->id);
        if (it == result.images.end()) {
            it = result.images.emplace(target->id, images(target->id)).first;
        }
        it->second = blend_region(it->second, seg.crop, x, y, cfg.beta);

        Annotation ann;
        ann.id = next_ann_id++;
        ann.image_id = target->id;
        ann.category_id = seg.category_id;
        ann.bbox = {static_cast<double>(x), static_cast<double>(y),
                    static_cast<double>(seg.crop.width()), static_cast<double>(seg.crop.height())};
        ann.score = cfg.synthetic_score;
        result.annotations.annotations.push_back(ann);
    }
    result.annotations.validate();
    return result;
}

}  // namespace ossod

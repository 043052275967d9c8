#pragma once

// Shared fixtures for the unit tests: a temp-directory guard and small
// builders for annotation sets and solid-shape raster images.

#include <unistd.h>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ossod/annotations.hpp"
#include "ossod/raster.hpp"

namespace testsupport {

// Unique directory under the system temp root, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        const auto base = std::filesystem::temp_directory_path();
        for (int i = 0;; ++i) {
            std::filesystem::path candidate =
                base / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(i));
            std::error_code ec;
            if (std::filesystem::create_directory(candidate, ec)) {
                path_ = candidate;
                return;
            }
        }
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

inline ossod::ImageInfo image_info(int id, int w, int h) {
    return ossod::ImageInfo{id, w, h, "img_" + std::to_string(id) + ".ppm"};
}

inline ossod::Annotation annotation(int id, int image_id, int category_id,
                                    std::array<double, 4> bbox,
                                    std::optional<double> score = std::nullopt) {
    ossod::Annotation a;
    a.id = id;
    a.image_id = image_id;
    a.category_id = category_id;
    a.bbox = bbox;
    a.score = score;
    return a;
}

// Fills a solid axis-aligned rectangle into an image.
inline void paint_rect(ossod::RasterImage& img, int x, int y, int w, int h, ossod::Rgb color) {
    for (int yy = y; yy < y + h; ++yy) {
        for (int xx = x; xx < x + w; ++xx) {
            img.at(xx, yy) = color;
        }
    }
}

// One-image set with the given categories and annotations, sized to fit.
inline ossod::AnnotationSet one_image_set(int width, int height,
                                          std::vector<ossod::Category> categories,
                                          std::vector<ossod::Annotation> annotations) {
    ossod::AnnotationSet set;
    set.images = {image_info(1, width, height)};
    set.categories = std::move(categories);
    set.annotations = std::move(annotations);
    return set;
}

}  // namespace testsupport

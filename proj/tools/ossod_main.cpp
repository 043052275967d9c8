// ossod — command-line front end for the open-set semi-supervised detection
// toolkit. Subcommands cover the offline data path (stats, build-library,
// balance-library, synthesize), label fusion (fuse), evaluation (eval), and
// the end-to-end ablation harness (simulate). Every report is available both
// as a human-readable table and as JSON.

#include <cctype>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "ossod/annotations.hpp"
#include "ossod/cce.hpp"
#include "ossod/errors.hpp"
#include "ossod/harness.hpp"
#include "ossod/metrics.hpp"
#include "ossod/oodfc.hpp"
#include "ossod/raster.hpp"

namespace {

using nlohmann::json;

int exit_code_for(ossod::errc c) {
    switch (c) {
        case ossod::errc::parse: return 3;
        case ossod::errc::schema: return 4;
        case ossod::errc::validation: return 5;
        case ossod::errc::io: return 6;
        case ossod::errc::config: return 7;
        case ossod::errc::internal: return 8;
    }
    return 8;
}

// error::what() is already "<category>: message"; strip the prefix so the
// CLI banner does not repeat it.
std::string message_body(const ossod::error& e) {
    std::string what = e.what();
    std::string prefix = std::string(ossod::errc_name(e.code())) + ": ";
    if (what.rfind(prefix, 0) == 0) return what.substr(prefix.size());
    return what;
}

// Lazy PPM loader resolving image ids through a set's image table. Loaded
// pixels are cached so repeated lookups (library building, synthesis) do not
// re-read files; the cache lives in the returned closure.
ossod::ImageProvider directory_provider(const ossod::AnnotationSet& set,
                                        const std::filesystem::path& dir) {
    auto names = std::make_shared<std::map<int, std::string>>();
    for (const ossod::ImageInfo& img : set.images) (*names)[img.id] = img.file_name;
    auto cache = std::make_shared<std::map<int, ossod::RasterImage>>();
    return [names, cache, dir](int image_id) -> const ossod::RasterImage& {
        auto hit = cache->find(image_id);
        if (hit != cache->end()) return hit->second;
        auto name = names->find(image_id);
        ossod::require(name != names->end(), ossod::errc::validation,
                       "images: id " + std::to_string(image_id) + " missing from image table");
        ossod::RasterImage img = ossod::load_ppm(dir / name->second);
        return cache->emplace(image_id, std::move(img)).first->second;
    };
}

void emit(const json& j) { std::printf("%s\n", j.dump(2).c_str()); }

std::string category_name(const ossod::AnnotationSet& set, int id) {
    const ossod::Category* cat = set.find_category(id);
    return cat != nullptr ? cat->name : "class " + std::to_string(id);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::string token;
    std::string padded = text + ",";
    for (char ch : padded) {
        if (ch != ',') {
            if (!std::isspace(static_cast<unsigned char>(ch))) token.push_back(ch);
            continue;
        }
        ossod::require(!token.empty(), ossod::errc::config, "seeds: empty entry in list");
        std::uint64_t value = 0;
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
        ossod::require(ec == std::errc() && ptr == token.data() + token.size(),
                       ossod::errc::config, "seeds: '" + token + "' is not an unsigned integer");
        seeds.push_back(value);
        token.clear();
    }
    ossod::require(!seeds.empty(), ossod::errc::config, "seeds: list is empty");
    return seeds;
}

// ---------------------------------------------------------------------------
// stats

int run_stats(const std::string& annotations, bool as_json) {
    ossod::AnnotationSet set = ossod::parse_annotation_set(annotations);
    ossod::ClassStats stats = ossod::class_frequencies(set);
    if (as_json) {
        json per = json::array();
        for (const auto& e : stats.per_class) {
            per.push_back({{"category_id", e.category_id},
                           {"name", category_name(set, e.category_id)},
                           {"count", e.count},
                           {"percentage", e.percentage}});
        }
        emit({{"total", stats.total}, {"per_class", per}});
        return 0;
    }
    std::printf("%4s  %-16s %8s %9s\n", "id", "class", "count", "share");
    for (const auto& e : stats.per_class) {
        std::printf("%4d  %-16s %8" PRId64 " %8.2f%%\n", e.category_id,
                    category_name(set, e.category_id).c_str(), e.count, e.percentage);
    }
    std::printf("%4s  %-16s %8" PRId64 "\n", "", "total", stats.total);
    return 0;
}

// ---------------------------------------------------------------------------
// build-library / balance-library

json library_counts_json(const ossod::ForegroundLibrary& lib) {
    json per = json::object();
    for (const auto& [id, count] : lib.frequencies()) per[std::to_string(id)] = count;
    return per;
}

void print_library_table(const ossod::ForegroundLibrary& lib) {
    std::map<int, double> alpha = lib.alpha();
    std::printf("%4s %8s %8s\n", "id", "count", "alpha");
    for (const auto& [id, count] : lib.frequencies()) {
        auto a = alpha.find(id);
        if (a != alpha.end())
            std::printf("%4d %8" PRId64 " %8.4f\n", id, count, a->second);
        else
            std::printf("%4d %8" PRId64 " %8s\n", id, count, "-");
    }
    std::printf("f_target %.6f  (target count %" PRId64 ")\n", lib.f_target(),
                lib.target_count());
}

int run_build_library(const std::string& annotations, const std::string& images_dir,
                      const std::string& out, bool as_json) {
    ossod::AnnotationSet labeled = ossod::parse_annotation_set(annotations);
    ossod::ImageProvider provider = directory_provider(labeled, images_dir);
    ossod::ForegroundLibrary lib = ossod::build_library(labeled, provider);
    ossod::save_library(lib, out);
    if (as_json) {
        emit({{"segments", lib.total_segments()},
              {"per_class", library_counts_json(lib)},
              {"f_target", lib.f_target()},
              {"target_count", lib.target_count()},
              {"library", out}});
        return 0;
    }
    print_library_table(lib);
    std::printf("library written to %s (%zu segments)\n", out.c_str(), lib.total_segments());
    return 0;
}

int run_balance_library(const std::string& library, std::uint64_t seed, const std::string& out,
                        bool as_json) {
    ossod::ForegroundLibrary lib = ossod::load_library(library);
    ossod::ForegroundLibrary balanced = ossod::balance_library(lib, seed);
    ossod::save_library(balanced, out);
    if (as_json) {
        emit({{"before", library_counts_json(lib)},
              {"after", library_counts_json(balanced)},
              {"f_target", lib.f_target()},
              {"target_count", lib.target_count()},
              {"seed", seed},
              {"library", out}});
        return 0;
    }
    std::map<int, std::int64_t> after = balanced.frequencies();
    std::printf("%4s %8s %8s\n", "id", "before", "after");
    for (const auto& [id, count] : lib.frequencies())
        std::printf("%4d %8" PRId64 " %8" PRId64 "\n", id, count, after[id]);
    std::printf("target %" PRId64 " per class; balanced library written to %s\n",
                lib.target_count(), out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// synthesize

int run_synthesize(const std::string& library, const std::string& unlabeled_path,
                   const std::string& images_dir, const ossod::SynthesisConfig& cfg,
                   const std::string& out, bool as_json) {
    ossod::ForegroundLibrary lib = ossod::load_library(library);
    ossod::AnnotationSet unlabeled = ossod::parse_annotation_set(unlabeled_path);
    ossod::ImageProvider provider = directory_provider(unlabeled, images_dir);
    ossod::SynthesisResult result = ossod::synthesize(lib, unlabeled, provider, cfg);

    std::filesystem::path out_dir(out);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    ossod::require(!ec, ossod::errc::io, "cannot create " + (out_dir / "images").string());
    ossod::save_annotation_set(result.annotations, out_dir / "synthetic.json");
    for (const auto& [image_id, pixels] : result.images) {
        const ossod::ImageInfo* info = result.annotations.find_image(image_id);
        ossod::require(info != nullptr, ossod::errc::internal,
                       "composited image missing from table");
        ossod::save_ppm(pixels, out_dir / "images" / info->file_name);
    }
    if (as_json) {
        emit({{"placed", result.annotations.annotations.size()},
              {"skipped_segments", result.skipped_segments},
              {"composited_images", result.images.size()},
              {"annotations", (out_dir / "synthetic.json").string()},
              {"images", (out_dir / "images").string()}});
        return 0;
    }
    std::printf("placed %zu segments across %zu images (%d skipped)\n",
                result.annotations.annotations.size(), result.images.size(),
                result.skipped_segments);
    std::printf("annotations: %s\nimages:      %s\n",
                (out_dir / "synthetic.json").string().c_str(),
                (out_dir / "images").string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// fuse

int run_fuse(const std::string& known_path, const std::string& unknown_path,
             const std::string& ap_path, const ossod::FusionConfig& cfg, const std::string& out,
             bool as_json) {
    ossod::AnnotationSet known = ossod::parse_annotation_set(known_path);
    ossod::AnnotationSet unknown = ossod::parse_annotation_set(unknown_path);
    ossod::ApTable ap = ossod::load_ap_table(ap_path);
    ossod::ThresholdTable thresholds = ossod::build_threshold_table(ap, cfg);
    ossod::AnnotationSet fused = ossod::fuse(known, unknown, thresholds, cfg);
    ossod::save_annotation_set(fused, out);

    std::size_t accepted = fused.annotations.size() - known.annotations.size();
    if (as_json) {
        json per = json::object();
        for (const auto& [id, t] : thresholds.per_class) per[std::to_string(id)] = t;
        emit({{"thresholds", per},
              {"fallback", thresholds.fallback},
              {"known", known.annotations.size()},
              {"unknown_candidates", unknown.annotations.size()},
              {"accepted_unknown", accepted},
              {"fused", fused.annotations.size()},
              {"out", out}});
        return 0;
    }
    std::printf("%4s %12s\n", "id", "threshold");
    for (const auto& [id, t] : thresholds.per_class) std::printf("%4d %12.6f\n", id, t);
    std::printf("%4s %12.6f\n", "*", thresholds.fallback);
    std::printf("known %zu, unknown candidates %zu, accepted %zu -> %zu fused (%s)\n",
                known.annotations.size(), unknown.annotations.size(), accepted,
                fused.annotations.size(), out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int run_eval(const std::string& gt_path, const std::string& pred_path, double iou,
             const std::string& out, bool as_json) {
    ossod::AnnotationSet gt = ossod::parse_annotation_set(gt_path);
    ossod::AnnotationSet preds = ossod::parse_annotation_set(pred_path);
    ossod::ApTable table = ossod::evaluate(gt, preds, iou);
    if (!out.empty()) ossod::save_ap_table(table, out);
    if (as_json) {
        std::printf("%s", ossod::ap_table_to_json(table).c_str());
        return 0;
    }
    std::printf("%4s  %-16s %10s\n", "id", "class", "AP");
    for (const auto& [id, ap] : table.per_class)
        std::printf("%4d  %-16s %10.6f\n", id, category_name(gt, id).c_str(), ap);
    std::printf("%4s  %-16s %10.6f\n", "", "mAP", table.map);
    if (!out.empty()) std::printf("report written to %s\n", out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// simulate

int run_simulate(const std::string& config_path, const std::string& seeds_text,
                 const std::string& out, bool as_json) {
    ossod::RunConfig base = ossod::load_run_config(config_path);
    std::vector<std::uint64_t> seeds = parse_seed_list(seeds_text);
    ossod::AblationReport report = ossod::run_simulation(base, seeds, out);
    if (as_json) {
        std::printf("%s", ossod::ablation_report_to_json(report).c_str());
    } else {
        std::printf("%s", ossod::ablation_report_to_text(report).c_str());
        std::printf("artifacts written to %s\n", out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"open-set semi-supervised detection toolkit"};
    app.require_subcommand(1);
    int rc = 0;

    // stats
    auto* stats = app.add_subcommand("stats", "per-class annotation counts and shares");
    std::string stats_annotations;
    bool stats_json = false;
    stats->add_option("--annotations", stats_annotations, "annotation JSON file")->required();
    stats->add_flag("--json", stats_json, "emit JSON instead of a table");
    stats->callback([&] { rc = run_stats(stats_annotations, stats_json); });

    // build-library
    auto* build = app.add_subcommand("build-library",
                                     "extract per-class foreground crops from labeled data");
    std::string build_annotations, build_images, build_out;
    bool build_json = false;
    build->add_option("--annotations", build_annotations, "labeled annotation JSON")->required();
    build->add_option("--images", build_images, "directory of PPM images")->required();
    build->add_option("--out", build_out, "library output directory")->required();
    build->add_flag("--json", build_json, "emit JSON instead of a table");
    build->callback([&] { rc = run_build_library(build_annotations, build_images, build_out,
                                                 build_json); });

    // balance-library
    auto* balance = app.add_subcommand("balance-library",
                                       "resample a library to equal per-class counts");
    std::string balance_library_dir, balance_out;
    std::uint64_t balance_seed = 0;
    bool balance_json = false;
    balance->add_option("--library", balance_library_dir, "library directory")->required();
    balance->add_option("--seed", balance_seed, "resampling seed");
    balance->add_option("--out", balance_out, "balanced library output directory")->required();
    balance->add_flag("--json", balance_json, "emit JSON instead of a table");
    balance->callback([&] { rc = run_balance_library(balance_library_dir, balance_seed,
                                                     balance_out, balance_json); });

    // synthesize
    auto* synth = app.add_subcommand("synthesize",
                                     "paste balanced crops into unlabeled images");
    std::string synth_library, synth_unlabeled, synth_images, synth_out;
    ossod::SynthesisConfig synth_cfg;
    bool synth_json = false;
    synth->add_option("--library", synth_library, "balanced library directory")->required();
    synth->add_option("--unlabeled", synth_unlabeled, "unlabeled annotation JSON")->required();
    synth->add_option("--images", synth_images, "directory of PPM images")->required();
    synth->add_option("--beta", synth_cfg.beta, "blend weight in [0, 1]");
    synth->add_option("--score", synth_cfg.synthetic_score, "score stamped on synthetic labels");
    synth->add_option("--placements", synth_cfg.placements_per_image,
                      "segments grouped per target image");
    synth->add_option("--seed", synth_cfg.seed, "placement seed");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_flag("--json", synth_json, "emit JSON instead of a table");
    synth->callback([&] { rc = run_synthesize(synth_library, synth_unlabeled, synth_images,
                                              synth_cfg, synth_out, synth_json); });

    // fuse
    auto* fuse = app.add_subcommand("fuse",
                                    "append qualifying unknown boxes to known pseudo-labels");
    std::string fuse_known, fuse_unknown, fuse_ap, fuse_out;
    ossod::FusionConfig fuse_cfg;
    bool fuse_json = false;
    fuse->add_option("--known", fuse_known, "known-class prediction JSON")->required();
    fuse->add_option("--unknown", fuse_unknown, "unknown-tagged prediction JSON")->required();
    fuse->add_option("--ap", fuse_ap, "per-class AP report from `eval`")->required();
    fuse->add_option("--gamma", fuse_cfg.gamma, "threshold sharpness");
    fuse->add_option("--iou-gate", fuse_cfg.iou_gate, "IoU must exceed this to use a class gate");
    fuse->add_option("--base-threshold", fuse_cfg.base_unknown_threshold,
                     "threshold for boxes overlapping no known class");
    fuse->add_option("--out", fuse_out, "fused annotation JSON output")->required();
    fuse->add_flag("--json", fuse_json, "emit JSON instead of a table");
    fuse->callback([&] { rc = run_fuse(fuse_known, fuse_unknown, fuse_ap, fuse_cfg, fuse_out,
                                       fuse_json); });

    // eval
    auto* eval = app.add_subcommand("eval", "per-class average precision and mAP");
    std::string eval_gt, eval_pred, eval_out;
    double eval_iou = 0.5;
    bool eval_json = false;
    eval->add_option("--ground-truth", eval_gt, "ground-truth annotation JSON")->required();
    eval->add_option("--predictions", eval_pred, "scored prediction JSON")->required();
    eval->add_option("--iou", eval_iou, "IoU match threshold");
    eval->add_option("--out", eval_out, "also write the JSON report here");
    eval->add_flag("--json", eval_json, "emit JSON instead of a table");
    eval->callback([&] { rc = run_eval(eval_gt, eval_pred, eval_iou, eval_out, eval_json); });

    // simulate
    auto* sim = app.add_subcommand("simulate",
                                   "end-to-end ablation over a synthetic detection world");
    std::string sim_config, sim_seeds = "1,2,3,4,5", sim_out;
    bool sim_json = false;
    sim->add_option("--config", sim_config, "run config (flat key=value lines)")->required();
    sim->add_option("--seeds", sim_seeds, "comma-separated world seeds");
    sim->add_option("--out", sim_out, "artifact output directory")->required();
    sim->add_flag("--json", sim_json, "emit JSON instead of a table");
    sim->callback([&] { rc = run_simulate(sim_config, sim_seeds, sim_out, sim_json); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ossod::error& e) {
        std::fprintf(stderr, "error[%s]: %s\n", ossod::errc_name(e.code()),
                     message_body(e).c_str());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[internal]: %s\n", e.what());
        return 8;
    }
    return rc;
}

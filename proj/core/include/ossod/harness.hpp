#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ossod/annotations.hpp"
#include "ossod/cce.hpp"
#include "ossod/ema.hpp"
#include "ossod/metrics.hpp"
#include "ossod/oodfc.hpp"
#include "ossod/raster.hpp"
#include "ossod/toy_world.hpp"

namespace ossod {

// ---- loss accounting --------------------------------------------------------

// One iteration's loss diagnostics. The composition identities
//   supervised    = classification + localization
//   unsupervised  = consistency + pseudo_label
//   total         = supervised + lambda * unsupervised
// hold exactly: assemble() computes the three sums from the four components.
struct LossReport {
    double classification = 0.0;
    double localization = 0.0;
    double supervised = 0.0;
    double consistency = 0.0;
    double pseudo_label = 0.0;
    double unsupervised = 0.0;
    double lambda = 1.0;
    double total = 0.0;

    static LossReport assemble(double classification, double localization, double consistency,
                               double pseudo_label, double lambda);
};

struct SupervisedLoss {
    double classification = 0.0;  // mean cross-entropy over matched ground truth
    double localization = 0.0;    // mean (1 - IoU), unmatched ground truth costs 1
};

// Diagnostic supervised losses of one image's closed-set detections against
// its ground truth. Detections are matched greedily (confidence-ranked, IoU
// >= iou_thresh); each matched ground-truth box contributes the cross-
// entropy -log(score of its class) and (1 - IoU); each unmatched one
// contributes the localization ceiling 1. class_ids gives the index order
// of DetectionResult::class_scores. Returns zeros when there is no usable
// ground truth.
SupervisedLoss supervised_loss(const std::vector<DetectionResult>& detections,
                               const std::vector<Annotation>& ground_truth,
                               const std::vector<int>& class_ids, double iou_thresh);

// Consistency between two views' detections of one image. preds_weak must
// already be in the reference frame; preds_strong boxes are mapped back
// through the inverse of coord_map first. Pairs are matched greedily by
// descending IoU (>= 0.5); a matched pair contributes the squared L2
// distance between its score vectors, and an unmatched detection on either
// side contributes the squared norm of its own score vector (the other view
// scored that object as nothing). Returns the sum; symmetric in the two
// lists once both are in the same frame, and 0 iff they agree.
double consistency_loss(const std::vector<DetectionResult>& preds_weak,
                        const std::vector<DetectionResult>& preds_strong,
                        const CoordinateMap& coord_map);

// Cross-entropy of closed-set detections against the known-class
// pseudo-labels of one image (greedy confidence-ranked matching at IoU >=
// 0.5; mean over matched pseudo-boxes; 0 when nothing matches or the set has
// no known-class labels). Score vectors are indexed by the set's known
// category ids in ascending order; unknown-tagged entries are ignored. All
// pseudo annotations must belong to one shared image.
double pseudo_loss(const std::vector<DetectionResult>& student_preds,
                   const AnnotationSet& pseudo);

// ---- run configuration ------------------------------------------------------

struct RunConfig {
    WorldConfig world;
    int iterations = 30;                  // pseudo-label refreshes
    double lambda = 1.0;                  // unsupervised weight
    double ema_alpha = kDefaultEmaAlpha;  // teacher smoothing
    double pseudo_threshold = 0.7;        // confidence filter on pseudo-labels
    bool enable_cce = false;              // class-balanced synthesis
    bool enable_oodfc = false;            // unknown fusion + conflict suppression
    FusionConfig fusion;
    SynthesisConfig synthesis;  // its seed field is ignored; `seed` is used
    std::uint64_t seed = 1;     // training-side randomness (augmentations, batch order)
    bool log_pseudo_sets = false;  // keep per-iteration pseudo-label sets
    bool log_params = false;       // keep the per-step student parameter series

    void validate() const;
};

// Flat "key = value" config text ('#' starts a comment; later keys win).
// Keys mirror the field paths: world.image_width, world.known_classes, ...,
// iterations, lambda, ema_alpha, pseudo_threshold, enable_cce, enable_oodfc,
// fusion.gamma, fusion.iou_gate, fusion.base_threshold, synthesis.beta,
// synthesis.score, synthesis.placements_per_image, seed, log_pseudo_sets,
// log_params. Unknown keys or malformed values are config errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& cfg);

// ---- training harness ---------------------------------------------------------

struct RunResult {
    DetectorModel supervised_model;  // static snapshot after the supervised fit
    DetectorModel student;
    DetectorModel teacher;           // EMA model used for final predictions
    ApTable supervised_train_ap;     // labeled split; source of dynamic thresholds
    ThresholdTable thresholds;
    std::vector<LossReport> losses;  // one entry per iteration
    AnnotationSet test_predictions;  // open-set predictions on the test split
    ApTable test_ap;                 // known-class AP at IoU 0.5
    int majority_category = 0;       // most frequent class in the labeled split
    int unknown_as_majority = 0;     // test unknowns claimed by the majority class
    int synthetic_annotations = 0;   // pasted by CCE (0 unless enable_cce)
    // With log_pseudo_sets: the confidence-filtered pseudo-labels of every
    // iteration, and (when enable_oodfc) the fused stream alongside — their
    // known-class restriction must agree, fusion being append-only.
    std::vector<AnnotationSet> pseudo_log;
    std::vector<AnnotationSet> fused_log;
    // With log_params: student parameters after every EMA step, plus the
    // teacher's starting point, enabling a closed-form EMA replay check.
    ParamVector teacher_initial_params;
    std::vector<ParamVector> student_param_log;
};

// Mean-teacher training on the shape world. Stages: optional class-balanced
// synthesis into the supervised stream; supervised fit (student = teacher);
// per iteration: the teacher pseudo-labels a weakly augmented view of every
// unlabeled image, labels are confidence-filtered, optionally fused with the
// static supervised model's unknown-tagged detections (conflicting known
// labels are suppressed for training only), and the student consumes
// labeled+pseudo mini-batches with an EMA teacher update after every batch.
// Deterministic given cfg (and the world's own seed).
RunResult train_run(const RunConfig& cfg);                      // generates the world
RunResult train_run(const RunConfig& cfg, const World& world);  // shares a world

// ---- pieces exposed for direct verification ----------------------------------

// Detections of several images as an annotation set (score = confidence,
// annotation ids issued 1.. in image order then detection order). The
// category table must cover every emitted category id.
AnnotationSet predictions_to_set(const std::vector<ImageInfo>& images,
                                 const std::vector<Category>& categories,
                                 const std::map<int, std::vector<DetectionResult>>& by_image);

// Training-batch view of a fused pseudo-label set: known-class annotations
// that overlap an unknown-tagged annotation of the same image with IoU
// strictly above iou_gate are dropped ("marked as both known and unknown"
// means the box must not teach the known class). Logged/filed pseudo-label
// sets are never filtered this way — only the batches fed to the updater.
AnnotationSet suppress_conflicting_known(const AnnotationSet& fused, double iou_gate);

// Most frequent known class of the labeled split (ties: lower id).
int majority_category(const AnnotationSet& labeled);

// How many unknown-tagged ground-truth boxes are claimed by a prediction of
// the given category at IoU >= iou_thresh (one or more hits count once).
int count_unknown_matched_as(const AnnotationSet& ground_truth,
                             const AnnotationSet& predictions, int category_id,
                             double iou_thresh = 0.5);

// The two scarcest known classes of a labeled split (ties: the higher id is
// considered rarer). Returned with the lower id first.
std::pair<int, int> rare_class_pair(const AnnotationSet& labeled);

double median(std::vector<double> values);  // empty -> 0

// ---- ablation ----------------------------------------------------------------

// Variant order: baseline, cce, oodfc, cce_oodfc.
extern const std::array<const char*, 4> kAblationVariants;

struct VariantOutcome {
    std::string variant;
    ApTable test_ap;
    ApTable supervised_train_ap;
    std::vector<LossReport> losses;
    AnnotationSet test_predictions;
    int unknown_as_majority = 0;
};

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::pair<int, int> rare_pair{0, 0};
    std::vector<VariantOutcome> variants;
};

struct AblationReport {
    std::vector<SeedOutcome> seeds;
    // Medians across seeds, keyed by variant name.
    std::map<std::string, double> median_map;
    std::map<std::string, double> median_rare_ap;  // mean AP over the rare pair
    std::map<std::string, double> median_unknown_as_majority;

    void recompute_summary();
};

// Runs the four ablation variants for every seed (one generated world per
// seed, shared by its variants; the seed overrides both cfg.seed and
// cfg.world.seed). The base config's enable_* flags are ignored.
AblationReport run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds);

std::string ablation_report_to_json(const AblationReport& report);
std::string ablation_report_to_text(const AblationReport& report);

// run_ablation plus artifact files under out_dir: config.txt, ablation.json,
// ablation.txt, and per seed/variant predictions, AP tables, and loss
// curves. Existing files are overwritten; byte-identical for equal inputs.
AblationReport run_simulation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                              const std::filesystem::path& out_dir);

}  // namespace ossod

#pragma once

#include <string>
#include <vector>

#include "implantformer/heatmap.hpp"
#include "implantformer/io_json.hpp"

namespace implantformer {

struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

// Axis-aligned box of side `size` centered on the point.
Box keypoint_box(double x, double y, double size = 21.0);

double iou(const Box& a, const Box& b);

// Greedy matching outcome for one slice: every prediction labeled TP/FP
// plus the count of unmatched ground truths.
struct PredLabel {
  double confidence = 0.0;
  double x = 0.0, y = 0.0;  // kept for deterministic tie-breaking
  bool tp = false;
};

struct MatchResult {
  std::vector<PredLabel> labels;
  int missed = 0;    // FN
  int gt_count = 0;
};

// Predictions in descending confidence claim the unmatched ground truth of
// highest IoU at or above the threshold; each ground truth matches once.
MatchResult match_predictions(const std::vector<Detection>& preds,
                              const std::vector<std::pair<double, double>>& gts,
                              double iou_threshold, double box_size);

struct PrPoint {
  double recall = 0.0, precision = 0.0;
};

struct ApResult {
  double ap = 0.0;
  std::vector<PrPoint> curve;
};

enum class ApInterpolation { all_point, eleven_point };

// AP over the pooled match results: area under the precision envelope swept
// in descending confidence (all-point interpolation), or the classic mean
// of envelope precisions at recalls {0, 0.1, ..., 1}.
ApResult average_precision(const std::vector<MatchResult>& matches,
                           ApInterpolation interp = ApInterpolation::all_point);

struct DistanceHistogram {
  double bin_width = 5.0;
  std::vector<int64_t> counts;  // [0,w), [w,2w), ...
  int64_t total = 0;
};

// Distance of each slice's top-1 prediction to that slice's ground truth.
DistanceHistogram distance_histogram(
    const std::vector<std::pair<Detection, std::pair<double, double>>>& pairs,
    double bin_width = 5.0);

// Patient-level split: seeded shuffle, sizes differing by at most one.
std::vector<std::vector<std::string>> five_fold_split(std::vector<std::string> patient_ids,
                                                      uint64_t seed);

struct FoldAp {
  int fold = -1;
  std::vector<double> ap;  // parallel to thresholds
};

struct EvalReport {
  double box_size = 21.0;
  std::vector<double> thresholds;
  std::vector<double> ap;                  // pooled, parallel to thresholds
  std::vector<std::vector<PrPoint>> pr;    // parallel to thresholds
  DistanceHistogram histogram;
  std::vector<FoldAp> folds;               // present when inputs are fold-tagged
  std::vector<double> ap_mean, ap_std;     // across folds, parallel to thresholds

  std::string to_json() const;
  static EvalReport from_json_text(const std::string& text);
};

// Pairs prediction files with ground-truth tracks by patient id and runs
// the full protocol. Ground-truth tracks supply one keypoint per slice.
EvalReport evaluate(const std::vector<DetectionFile>& preds,
                    const std::vector<KeypointTrack>& gts,
                    std::vector<double> thresholds = {0.5, 0.75},
                    double box_size = 21.0, double bin_width = 5.0,
                    ApInterpolation interp = ApInterpolation::all_point);

// Formats "34.3±2.2684"-style percent summaries.
std::string format_mean_std(double mean_fraction, double std_fraction);

void write_histogram_csv(const EvalReport& report, const std::string& csv_path);
void write_histogram_svg(const EvalReport& report, const std::string& svg_path);

}  // namespace implantformer

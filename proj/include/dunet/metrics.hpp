#pragma once

#include <map>
#include <string>
#include <vector>

#include "dunet/geometry.hpp"

namespace dunet {

struct ClassCounts {
  int tp = 0, fp = 0, fn = 0;
};

struct EvalResult {
  std::map<int, double> ap;  // class id -> average precision
  std::map<int, ClassCounts> counts;
  double map = 0;
  int tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, accuracy = 0;
};

enum class ApInterp { all_points, eleven_point };

// Greedy VOC-style matching for one image and one class. Detections must be
// sorted by descending score; each claims the highest-IoU unclaimed gt at or
// above the threshold. Returns per-detection TP flags; misses are FN.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts,
                                   double iou_threshold = 0.5);

// AP from a score-sorted TP/FP sequence. All-point interpolation integrates
// the precision envelope over recall; 11-point follows VOC07.
double average_precision(const std::vector<std::pair<double, bool>>& scored_tp,
                         int num_gt, ApInterp interp = ApInterp::all_points);

// Per-image detections paired with per-image ground truth, one class.
struct ClassEval {
  std::vector<std::pair<double, bool>> scored;  // (score, is_tp) sorted desc
  int num_gt = 0;
};

struct EvalThresholds {
  double iou = 0.5;
  double count_score = 0.5;  // operating point for the tp/fp/fn triple
  ApInterp interp = ApInterp::all_points;
};

// Aggregates detections over a set of frames into per-class AP, mAP and the
// precision/recall/accuracy triple at the counting score threshold.
// detections[i] belongs to gt frame i.
EvalResult evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<std::vector<std::pair<int, Box>>>& gts,
                               int num_classes, const EvalThresholds& th);

// class,ap,tp,fp,fn rows plus a mAP footer.
void write_eval_csv(const std::string& path, const EvalResult& r,
                    const std::vector<std::string>& label_map);

}  // namespace dunet

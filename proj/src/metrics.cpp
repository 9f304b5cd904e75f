#include "dunet/metrics.hpp"

#include <algorithm>
#include <fstream>

namespace dunet {

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts, double iou_threshold) {
  std::vector<bool> tp(dets.size(), false);
  std::vector<bool> claimed(gts.size(), false);
  for (size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double ov = iou(dets[d].box, gts[g]);
      if (ov >= iou_threshold && ov > best_iou) {
        best_iou = ov;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      claimed[static_cast<size_t>(best)] = true;
      tp[d] = true;
    }
  }
  return tp;
}

double average_precision(const std::vector<std::pair<double, bool>>& scored_tp_in,
                         int num_gt, ApInterp interp) {
  if (num_gt <= 0) return 0.0;
  auto scored = scored_tp_in;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& [score, is_tp] : scored) {
    (void)score;
    is_tp ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }

  if (interp == ApInterp::eleven_point) {
    double ap = 0;
    for (int i = 0; i <= 10; ++i) {
      const double r = i / 10.0;
      double p = 0;
      for (size_t k = 0; k < recall.size(); ++k)
        if (recall[k] >= r) p = std::max(p, precision[k]);
      ap += p / 11.0;
    }
    return ap;
  }

  // All-point: integrate the running-max precision envelope over recall.
  double ap = 0, prev_recall = 0;
  for (size_t k = 0; k < recall.size(); ++k) {
    double env = 0;
    for (size_t j = k; j < precision.size(); ++j) env = std::max(env, precision[j]);
    ap += (recall[k] - prev_recall) * env;
    prev_recall = recall[k];
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<std::vector<std::pair<int, Box>>>& gts,
                               int num_classes, const EvalThresholds& th) {
  EvalResult r;
  for (int cls = 1; cls <= num_classes; ++cls) {
    ClassEval ce;
    int count_tp = 0, count_fp = 0, count_gt = 0;
    for (size_t f = 0; f < detections.size(); ++f) {
      std::vector<Detection> dets, counted;
      for (const Detection& d : detections[f])
        if (d.class_id == cls) dets.push_back(d);
      std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.anchor_index < b.anchor_index;
      });
      std::vector<Box> gt_boxes;
      if (f < gts.size())
        for (const auto& [c, b] : gts[f])
          if (c == cls) gt_boxes.push_back(b);
      ce.num_gt += static_cast<int>(gt_boxes.size());
      count_gt += static_cast<int>(gt_boxes.size());

      const auto tp_flags = match_detections(dets, gt_boxes, th.iou);
      for (size_t d = 0; d < dets.size(); ++d)
        ce.scored.emplace_back(dets[d].score, tp_flags[d]);

      // Operating-point counts use only confident detections, rematched.
      for (const Detection& d : dets)
        if (d.score >= th.count_score) counted.push_back(d);
      const auto counted_tp = match_detections(counted, gt_boxes, th.iou);
      for (bool t : counted_tp) t ? ++count_tp : ++count_fp;
    }
    r.ap[cls] = average_precision(ce.scored, ce.num_gt, th.interp);
    r.counts[cls] = {count_tp, count_fp, count_gt - count_tp};
    r.tp += count_tp;
    r.fp += count_fp;
    r.fn += count_gt - count_tp;
    if (ce.num_gt == 0) r.ap.erase(cls);  // class absent from ground truth
  }

  double sum = 0;
  for (const auto& [cls, ap] : r.ap) sum += ap;
  r.map = r.ap.empty() ? 0.0 : sum / static_cast<double>(r.ap.size());
  r.precision = (r.tp + r.fp) ? static_cast<double>(r.tp) / (r.tp + r.fp) : 0.0;
  r.recall = (r.tp + r.fn) ? static_cast<double>(r.tp) / (r.tp + r.fn) : 0.0;
  r.accuracy = (r.tp + r.fp + r.fn) ? static_cast<double>(r.tp) / (r.tp + r.fp + r.fn) : 0.0;
  return r;
}

void write_eval_csv(const std::string& path, const EvalResult& r,
                    const std::vector<std::string>& label_map) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_eval_csv: cannot open " + path);
  os << "class,ap,tp,fp,fn\n";
  for (const auto& [cls, ap] : r.ap) {
    const std::string name = (cls >= 1 && cls <= static_cast<int>(label_map.size()))
                                 ? label_map[static_cast<size_t>(cls - 1)]
                                 : std::to_string(cls);
    ClassCounts c;
    if (auto it = r.counts.find(cls); it != r.counts.end()) c = it->second;
    os << name << "," << ap << "," << c.tp << "," << c.fp << "," << c.fn << "\n";
  }
  os << "overall," << r.map << "," << r.tp << "," << r.fp << "," << r.fn << "\n";
}

}  // namespace dunet

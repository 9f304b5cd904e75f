#pragma once

#include <array>
#include <vector>

#include "dunet/model.hpp"
#include "dunet/tensor.hpp"

namespace dunet {

// Axis-aligned rectangle in normalized image coordinates.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double w() const { return xmax - xmin; }
  double h() const { return ymax - ymin; }
  double area() const { return w() * h(); }
  double cx() const { return 0.5 * (xmin + xmax); }
  double cy() const { return 0.5 * (ymin + ymax); }

  bool operator==(const Box&) const = default;

  Box clipped() const {
    auto cl = [](double v) { return v < 0 ? 0 : (v > 1 ? 1.0 : v); };
    return {cl(xmin), cl(ymin), cl(xmax), cl(ymax)};
  }
};

struct Anchor {
  double cx = 0, cy = 0, w = 0, h = 0;
  int head = 0;   // pyramid level, 0 = stride 4
  int cell = 0;   // row-major cell index within the head

  Box to_box() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

struct Detection {
  Box box;
  int class_id = 0;  // 1..K; 0 is background and never emitted
  double score = 0;
  int anchor_index = 0;  // deterministic NMS tie-break
};

// Per-anchor matching result.
struct MatchLabel {
  int gt_index = -1;  // -1 = negative
  bool positive() const { return gt_index >= 0; }
};

double iou(const Box& a, const Box& b);

// SSD-style anchor inventory: per head a scale linearly spaced in
// [0.1, 0.8], per cell aspect ratios {1, 2, 1/2} plus ratio 1 at the
// geometric mean of this and the next head's scale (0.95 past the last).
// Order: head-major, row-major cells, anchor index minor.
std::vector<Anchor> generate_anchors(const DUNetConfig& cfg);

// Two-stage matching: every gt claims its best unclaimed anchor (forced
// positive, processed in gt order, IoU ties to the lowest anchor index);
// then any unclaimed anchor with best-gt IoU >= pos_threshold is positive.
std::vector<MatchLabel> match(const std::vector<Anchor>& anchors,
                              const std::vector<Box>& gt_boxes,
                              double pos_threshold = 0.5);

inline constexpr double kVarianceCenter = 0.1;
inline constexpr double kVarianceSize = 0.2;

// SSD offset encoding; decode is the exact inverse.
std::array<double, 4> encode_box(const Box& gt, const Anchor& anchor);
Box decode_box(const std::array<double, 4>& offsets, const Anchor& anchor);

// Greedy per-class NMS; input need not be sorted. Ties broken by lower
// anchor index; output sorted by descending score.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.45,
                           int max_out = 200);

struct DecodeParams {
  double score_threshold = 0.01;
  double nms_iou = 0.45;
  int max_per_class = 200;
};

// Softmax over class logits, background discarded, per-class threshold + NMS.
// conf/loc are the flattened head outputs for a single image.
std::vector<Detection> decode_detections(const Tensor& conf_flat, const Tensor& loc_flat,
                                         const std::vector<Anchor>& anchors,
                                         const DecodeParams& params);

}  // namespace dunet

#include "dunet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dunet {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;  // degenerate zero-area boxes
  return inter / uni;
}

std::vector<Anchor> generate_anchors(const DUNetConfig& cfg) {
  cfg.validate();
  const auto grids = cfg.grid_sizes();
  std::vector<double> scales(5);
  for (int h = 0; h < 4; ++h) scales[h] = 0.1 + (0.8 - 0.1) * h / 3.0;
  scales[4] = 0.95;

  std::vector<Anchor> anchors;
  anchors.reserve(static_cast<size_t>(cfg.total_anchors()));
  const double sqrt2 = std::sqrt(2.0);
  for (int h = 0; h < 4; ++h) {
    const int g = grids[h];
    const double s = scales[h];
    const double s_prime = std::sqrt(scales[h] * scales[h + 1]);
    for (int row = 0; row < g; ++row) {
      for (int col = 0; col < g; ++col) {
        const double cx = (col + 0.5) / g, cy = (row + 0.5) / g;
        const int cell = row * g + col;
        std::array<std::array<double, 2>, 4> shapes = {{
            {s, s},
            {s * sqrt2, s / sqrt2},
            {s / sqrt2, s * sqrt2},
            {s_prime, s_prime},
        }};
        for (int a = 0; a < cfg.anchors_per_cell; ++a) {
          const auto& sh = shapes[static_cast<size_t>(a % 4)];
          anchors.push_back({cx, cy, sh[0], sh[1], h, cell});
        }
      }
    }
  }
  return anchors;
}

std::vector<MatchLabel> match(const std::vector<Anchor>& anchors,
                              const std::vector<Box>& gt_boxes, double pos_threshold) {
  const size_t A = anchors.size(), G = gt_boxes.size();
  std::vector<MatchLabel> labels(A);
  if (G == 0) return labels;

  std::vector<double> overlap(A * G);
  for (size_t a = 0; a < A; ++a) {
    const Box ab = anchors[a].to_box();
    for (size_t g = 0; g < G; ++g) overlap[a * G + g] = iou(ab, gt_boxes[g]);
  }

  // Stage 1: each gt gets its best still-unclaimed anchor, in gt order.
  std::vector<bool> claimed(A, false);
  for (size_t g = 0; g < G; ++g) {
    size_t best = A;
    double best_iou = -1;
    for (size_t a = 0; a < A; ++a) {
      if (claimed[a]) continue;
      if (overlap[a * G + g] > best_iou) {  // strict: lowest index wins ties
        best_iou = overlap[a * G + g];
        best = a;
      }
    }
    if (best < A) {
      claimed[best] = true;
      labels[best].gt_index = static_cast<int>(g);
    }
  }

  // Stage 2: threshold matching for the rest.
  for (size_t a = 0; a < A; ++a) {
    if (claimed[a]) continue;
    size_t best_g = 0;
    double best_iou = overlap[a * G];
    for (size_t g = 1; g < G; ++g)
      if (overlap[a * G + g] > best_iou) {
        best_iou = overlap[a * G + g];
        best_g = g;
      }
    if (best_iou >= pos_threshold) labels[a].gt_index = static_cast<int>(best_g);
  }
  return labels;
}

std::array<double, 4> encode_box(const Box& gt, const Anchor& anchor) {
  if (gt.w() <= 0 || gt.h() <= 0)
    throw std::invalid_argument("encode_box: ground-truth box has non-positive extent");
  return {(gt.cx() - anchor.cx) / (anchor.w * kVarianceCenter),
          (gt.cy() - anchor.cy) / (anchor.h * kVarianceCenter),
          std::log(gt.w() / anchor.w) / kVarianceSize,
          std::log(gt.h() / anchor.h) / kVarianceSize};
}

Box decode_box(const std::array<double, 4>& t, const Anchor& anchor) {
  const double cx = t[0] * kVarianceCenter * anchor.w + anchor.cx;
  const double cy = t[1] * kVarianceCenter * anchor.h + anchor.cy;
  const double w = anchor.w * std::exp(t[2] * kVarianceSize);
  const double h = anchor.h * std::exp(t[3] * kVarianceSize);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, int max_out) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor_index < b.anchor_index;
  });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    if (static_cast<int>(kept.size()) >= max_out) break;
    bool suppressed = false;
    for (const Detection& k : kept)
      if (iou(d.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode_detections(const Tensor& conf_flat, const Tensor& loc_flat,
                                         const std::vector<Anchor>& anchors,
                                         const DecodeParams& params) {
  const int64_t M = static_cast<int64_t>(anchors.size());
  if (conf_flat.rank() != 2 || conf_flat.shape()[0] != M)
    throw DimensionError("decode_detections: conf rows " + conf_flat.shape_str() +
                         " != anchor count " + std::to_string(M));
  if (loc_flat.rank() != 2 || loc_flat.shape()[0] != M || loc_flat.shape()[1] != 4)
    throw DimensionError("decode_detections: loc must be [" + std::to_string(M) + ",4]");
  const int64_t C = conf_flat.shape()[1];  // K+1

  std::vector<std::vector<Detection>> per_class(static_cast<size_t>(C));
  std::vector<double> probs(static_cast<size_t>(C));
  for (int64_t i = 0; i < M; ++i) {
    const double* logits = conf_flat.data() + i * C;
    double mx = logits[0];
    for (int64_t k = 1; k < C; ++k) mx = std::max(mx, logits[k]);
    double z = 0;
    for (int64_t k = 0; k < C; ++k) {
      probs[static_cast<size_t>(k)] = std::exp(logits[k] - mx);
      z += probs[static_cast<size_t>(k)];
    }
    Box decoded;
    bool have_box = false;
    for (int64_t k = 1; k < C; ++k) {
      const double score = probs[static_cast<size_t>(k)] / z;
      if (score < params.score_threshold) continue;
      if (!have_box) {
        decoded = decode_box({loc_flat[i * 4], loc_flat[i * 4 + 1], loc_flat[i * 4 + 2],
                              loc_flat[i * 4 + 3]},
                             anchors[static_cast<size_t>(i)])
                      .clipped();
        have_box = true;
      }
      per_class[static_cast<size_t>(k)].push_back(
          {decoded, static_cast<int>(k), score, static_cast<int>(i)});
    }
  }

  std::vector<Detection> out;
  for (int64_t k = 1; k < C; ++k) {
    auto kept = nms(std::move(per_class[static_cast<size_t>(k)]), params.nms_iou,
                    params.max_per_class);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.anchor_index < b.anchor_index;
  });
  return out;
}

}  // namespace dunet

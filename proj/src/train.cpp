#include "dunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "dunet/checkpoint.hpp"

namespace dunet {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (lr_schedule.empty()) throw std::invalid_argument("TrainConfig: empty lr schedule");
  for (const auto& [step, rate] : lr_schedule)
    if (rate <= 0) throw std::invalid_argument("TrainConfig: rates must be positive");
  if (neg_pos_ratio <= 0) throw std::invalid_argument("TrainConfig: neg_pos_ratio must be > 0");
  if (max_steps < 1) throw std::invalid_argument("TrainConfig: max_steps must be >= 1");
}

double TrainConfig::rate_at(int step) const {
  double rate = lr_schedule.front().second;
  for (const auto& [s, r] : lr_schedule)
    if (step >= s) rate = r;
  return rate;
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double rate,
              double weight_decay, double momentum) {
  if (!param.same_shape(grad))
    throw DimensionError("sgd_step: grad shape " + grad.shape_str() +
                         " != param shape " + param.shape_str());
  if (velocity.shape() != param.shape()) velocity = Tensor(param.shape());
  for (int64_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= rate * velocity[i];
  }
}

std::pair<Tensor, std::vector<GtBox>> load_training_frame(const AnnotatedDataset& ds,
                                                          const FrameRecord& frame,
                                                          int input_size) {
  Image img = read_image(ds.image_file(frame));
  if (img.width == input_size && img.height == input_size)
    return {image_to_tensor(img), frame.boxes};
  Letterbox lb = letterbox(img, input_size);
  std::vector<GtBox> boxes;
  boxes.reserve(frame.boxes.size());
  for (const GtBox& gb : frame.boxes) {
    Box b{lb.offset_x + gb.box.xmin * lb.scale_x, lb.offset_y + gb.box.ymin * lb.scale_y,
          lb.offset_x + gb.box.xmax * lb.scale_x, lb.offset_y + gb.box.ymax * lb.scale_y};
    boxes.push_back({gb.class_id, b});
  }
  return {image_to_tensor(lb.image), boxes};
}

TrainResult train(DUNetModel& model, const AnnotatedDataset& ds,
                  const std::vector<int>& frame_indices, const TrainConfig& cfg,
                  const std::string& out_dir) {
  cfg.validate();
  if (frame_indices.empty()) throw std::runtime_error("train: empty dataset");
  if (model.batch != cfg.batch_size)
    throw std::invalid_argument("train: model batch != cfg.batch_size");
  std::filesystem::create_directories(out_dir);

  Graph& g = *model.graph;
  MultiboxLossNode* loss =
      g.multibox_loss(model.conf_flat, model.loc_flat, cfg.neg_pos_ratio, cfg.loc_weight);
  const auto anchors = generate_anchors(model.cfg);
  const int64_t n_anchors = static_cast<int64_t>(anchors.size());
  const int S = model.cfg.input_size;

  // Cache decoded frames; the desk-scale datasets fit comfortably in memory.
  std::vector<std::pair<Tensor, std::vector<GtBox>>> cache(frame_indices.size());
  std::vector<bool> cached(frame_indices.size(), false);

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(frame_indices.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;

  std::vector<Tensor> velocities(g.params().size());
  std::vector<std::array<double, 3>> curve;  // total, conf, loc
  curve.reserve(static_cast<size_t>(cfg.max_steps));

  TrainResult result;
  double last_finite = 0;
  auto state = g.named_state();

  auto save = [&] {
    save_checkpoint(out_dir + "/model.ckpt", state);
    std::ofstream os(out_dir + "/model.json");
    os << model.cfg.to_json() << "\n";
  };

  for (int step = 0; step < cfg.max_steps; ++step) {
    Tensor batch({cfg.batch_size, 3, S, S});
    std::vector<int> labels(static_cast<size_t>(cfg.batch_size * n_anchors), 0);
    std::vector<std::array<double, 4>> targets(labels.size(), {0, 0, 0, 0});

    for (int n = 0; n < cfg.batch_size; ++n) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const size_t slot = order[cursor++];
      if (!cached[slot]) {
        cache[slot] = load_training_frame(
            ds, ds.frames[static_cast<size_t>(frame_indices[slot])], S);
        cached[slot] = true;
      }
      const auto& [img, orig_gt] = cache[slot];
      std::vector<GtBox> gt = orig_gt;

      bool flip = false;
      int dx = 0, dy = 0;
      if (cfg.augment) {
        flip = (rng() & 1) != 0;
        const int max_shift = static_cast<int>(cfg.max_shift_frac * S);
        if (max_shift > 0) {
          std::uniform_int_distribution<int> shift(-max_shift, max_shift);
          dx = shift(rng);
          dy = shift(rng);
        }
      }
      if (!flip && dx == 0 && dy == 0) {
        std::memcpy(&batch.at4(n, 0, 0, 0), img.data(),
                    static_cast<size_t>(img.size()) * sizeof(double));
      } else {
        // Sample (x,y) from the source image; out-of-frame pixels take the
        // letterbox gray. Horizontal flip is applied before the shift.
        const double pad = 114.0 / 255.0;
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
              int64_t sx = x - dx, sy = y - dy;
              if (flip) sx = S - 1 - sx;
              batch.at4(n, c, y, x) = (sx >= 0 && sx < S && sy >= 0 && sy < S)
                                          ? img.at4(0, c, sy, sx)
                                          : pad;
            }
        std::vector<GtBox> moved;
        for (GtBox gb : gt) {
          Box b = gb.box;
          if (flip) b = {1.0 - gb.box.xmax, gb.box.ymin, 1.0 - gb.box.xmin, gb.box.ymax};
          b = Box{b.xmin + static_cast<double>(dx) / S, b.ymin + static_cast<double>(dy) / S,
                  b.xmax + static_cast<double>(dx) / S, b.ymax + static_cast<double>(dy) / S}
                  .clipped();
          // Keep a shifted box only while most of the object stays in frame.
          if (b.w() * b.h() >= 0.5 * gb.box.w() * gb.box.h()) {
            gb.box = b;
            moved.push_back(gb);
          }
        }
        gt = std::move(moved);
      }

      std::vector<Box> gt_boxes;
      for (const GtBox& b : gt) gt_boxes.push_back(b.box);
      const auto match_labels = match(anchors, gt_boxes, cfg.pos_iou_threshold);
      for (int64_t a = 0; a < n_anchors; ++a) {
        if (!match_labels[static_cast<size_t>(a)].positive()) continue;
        const int gi = match_labels[static_cast<size_t>(a)].gt_index;
        const size_t row = static_cast<size_t>(n * n_anchors + a);
        labels[row] = gt[static_cast<size_t>(gi)].class_id;
        targets[row] =
            encode_box(gt[static_cast<size_t>(gi)].box, anchors[static_cast<size_t>(a)]);
      }
    }

    model.image->set(std::move(batch));
    loss->set_targets(std::move(labels), std::move(targets));
    g.forward(true);

    const double total = loss->value()[0];
    if (!std::isfinite(total)) throw NanLossError(step, last_finite);
    last_finite = total;
    curve.push_back({total, loss->conf_loss(), loss->loc_loss()});
    if (step == 0) result.initial_loss = total;

    g.zero_grad();
    g.backward(loss);
    const double rate = cfg.rate_at(step);
    const auto& params = g.params();
    for (size_t p = 0; p < params.size(); ++p) {
      // BN scale/shift and biases are excluded from weight decay.
      const bool decay = params[p]->value().rank() == 4;
      sgd_step(params[p]->value(), params[p]->grad(), velocities[p], rate,
               decay ? cfg.weight_decay : 0.0, cfg.momentum);
    }

    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) save();
  }

  save();
  {
    std::ofstream os(out_dir + "/loss.csv");
    os << "step,total_loss,conf_loss,loc_loss\n";
    os.precision(17);
    for (size_t i = 0; i < curve.size(); ++i)
      os << i << "," << curve[i][0] << "," << curve[i][1] << "," << curve[i][2] << "\n";
  }
  result.final_loss = curve.back()[0];
  result.steps = cfg.max_steps;
  return result;
}

}  // namespace dunet

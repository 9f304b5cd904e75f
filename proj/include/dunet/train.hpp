#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dunet/dataset.hpp"
#include "dunet/geometry.hpp"
#include "dunet/model.hpp"

namespace dunet {

struct TrainConfig {
  int batch_size = 8;
  // (step, rate) pairs; each rate applies from its step onward.
  std::vector<std::pair<int, double>> lr_schedule = {{0, 0.05}};
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double neg_pos_ratio = 3.0;
  double loc_weight = 1.0;
  double pos_iou_threshold = 0.5;
  int max_steps = 2000;
  int checkpoint_interval = 500;
  uint64_t seed = 1;
  // Train-time augmentation: random horizontal flip plus a translation jitter
  // of up to max_shift_frac of the image in each axis (0 disables shifting).
  bool augment = true;
  double max_shift_frac = 0.1;

  void validate() const;
  double rate_at(int step) const;
};

// v <- mu*v + g + lambda*w;  w <- w - eta*v
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double rate,
              double weight_decay, double momentum);

// Raised when the loss goes non-finite; carries the failing step.
struct NanLossError : std::runtime_error {
  NanLossError(int step, double last_finite)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                           " (last finite loss " + std::to_string(last_finite) + ")"),
        step(step),
        last_finite_loss(last_finite) {}
  int step;
  double last_finite_loss;
};

struct TrainResult {
  double initial_loss = 0;
  double final_loss = 0;
  int steps = 0;
};

// Reads a frame, letterboxes it to the model input size and maps its boxes
// into model coordinates.
std::pair<Tensor, std::vector<GtBox>> load_training_frame(const AnnotatedDataset& ds,
                                                          const FrameRecord& frame,
                                                          int input_size);

// From-scratch minibatch training over the given frame indices. Writes
// model.ckpt + model.json under out_dir every checkpoint_interval steps and
// loss.csv (step,total_loss,conf_loss,loc_loss) at the end.
TrainResult train(DUNetModel& model, const AnnotatedDataset& ds,
                  const std::vector<int>& frame_indices, const TrainConfig& cfg,
                  const std::string& out_dir);

}  // namespace dunet

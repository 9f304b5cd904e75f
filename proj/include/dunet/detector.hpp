#pragma once

#include <string>
#include <vector>

#include "dunet/geometry.hpp"
#include "dunet/image.hpp"
#include "dunet/model.hpp"

namespace dunet {

// Batch-1 inference wrapper: letterboxes a frame, runs the graph and maps
// detections back to frame coordinates.
class Detector {
 public:
  Detector(DUNetConfig cfg, uint64_t seed = 0);

  // Loads model.json + model.ckpt written by training; ckpt_path names the
  // .ckpt file, the config sidecar sits next to it.
  static Detector load(const std::string& ckpt_path);

  std::vector<Detection> detect(const Image& frame);

  const DUNetConfig& config() const { return model_.cfg; }
  DUNetModel& model() { return model_; }
  DecodeParams& decode_params() { return decode_; }

 private:
  DUNetModel model_;
  std::vector<Anchor> anchors_;
  DecodeParams decode_;
};

}  // namespace dunet

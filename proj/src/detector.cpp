#include "dunet/detector.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dunet/checkpoint.hpp"

namespace dunet {

Detector::Detector(DUNetConfig cfg, uint64_t seed) {
  std::mt19937 rng(static_cast<uint32_t>(seed));
  model_ = build_dunet(cfg, 1, rng);
  anchors_ = generate_anchors(cfg);
}

Detector Detector::load(const std::string& ckpt_path) {
  const std::string cfg_path =
      (std::filesystem::path(ckpt_path).parent_path() / "model.json").string();
  std::ifstream is(cfg_path);
  if (!is) throw std::runtime_error("Detector::load: missing config sidecar " + cfg_path);
  std::ostringstream buf;
  buf << is.rdbuf();
  Detector det(DUNetConfig::from_json(buf.str()));
  auto state = det.model_.graph->named_state();
  load_checkpoint(ckpt_path, state);
  return det;
}

std::vector<Detection> Detector::detect(const Image& frame) {
  const int S = model_.cfg.input_size;
  Letterbox lb;
  if (frame.width == S && frame.height == S) {
    model_.forward_infer(image_to_tensor(frame));
    lb.scale_x = lb.scale_y = 1;
  } else {
    lb = letterbox(frame, S);
    model_.forward_infer(image_to_tensor(lb.image));
  }
  auto dets = decode_detections(model_.conf_flat->value(), model_.loc_flat->value(),
                                anchors_, decode_);
  if (lb.scale_x != 1 || lb.scale_y != 1 || lb.offset_x != 0 || lb.offset_y != 0) {
    for (Detection& d : dets) {
      d.box.xmin = (d.box.xmin - lb.offset_x) / lb.scale_x;
      d.box.xmax = (d.box.xmax - lb.offset_x) / lb.scale_x;
      d.box.ymin = (d.box.ymin - lb.offset_y) / lb.scale_y;
      d.box.ymax = (d.box.ymax - lb.offset_y) / lb.scale_y;
      d.box = d.box.clipped();
    }
  }
  return dets;
}

}  // namespace dunet

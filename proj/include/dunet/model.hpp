#pragma once

#include <array>
#include <memory>
#include <string>

#include "dunet/graph.hpp"

namespace dunet {

struct DUNetConfig {
  int input_size = 320;
  int stem_filters = 64;
  std::array<int, 4> block_layers = {5, 7, 7, 7};
  int growth_rate = 32;
  int bottleneck_filters = 64;
  int lateral_channels = 128;
  int anchors_per_cell = 4;
  int num_classes = 20;
  int head_count = 4;      // fixed by the architecture
  bool top_down = true;    // false ablates the upscaling pathway

  // Small variant that trains from scratch in minutes on a CPU.
  static DUNetConfig desk(int num_classes);

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  std::string to_json() const;
  static DUNetConfig from_json(const std::string& text);

  std::array<int, 4> grid_sizes() const {
    // Strides 4, 8, 16, 32 relative to the input.
    return {input_size / 4, input_size / 8, input_size / 16, input_size / 32};
  }
  int total_anchors() const {
    int total = 0;
    for (int g : grid_sizes()) total += anchors_per_cell * g * g;
    return total;
  }
};

// Built DUNet graph. head index 0 is the highest-resolution level (stride 4).
struct DUNetModel {
  DUNetConfig cfg;
  int batch = 1;
  std::unique_ptr<Graph> graph;
  InputNode* image = nullptr;
  std::array<Node*, 4> head_scores{};   // [N, A*(K+1), g, g]
  std::array<Node*, 4> head_offsets{};  // [N, A*4, g, g]
  FlattenHeadsNode* conf_flat = nullptr;  // [N*total_anchors, K+1]
  FlattenHeadsNode* loc_flat = nullptr;   // [N*total_anchors, 4]
  std::array<int, 4> block_out_channels{};

  // Runs inference on one batch; input [batch,3,S,S].
  void forward_infer(Tensor image_batch);
};

DUNetModel build_dunet(const DUNetConfig& cfg, int batch, std::mt19937& rng);

}  // namespace dunet

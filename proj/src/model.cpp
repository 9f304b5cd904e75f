#include "dunet/model.hpp"

#include <nlohmann/json.hpp>
#include <stdexcept>

namespace dunet {

using json = nlohmann::json;

DUNetConfig DUNetConfig::desk(int num_classes) {
  DUNetConfig cfg;
  cfg.input_size = 64;
  cfg.stem_filters = 16;
  cfg.block_layers = {2, 3, 3, 3};
  cfg.growth_rate = 8;
  cfg.bottleneck_filters = 16;
  cfg.lateral_channels = 32;
  cfg.anchors_per_cell = 4;
  cfg.num_classes = num_classes;
  return cfg;
}

void DUNetConfig::validate() const {
  if (input_size < 32 || input_size % 32 != 0)
    throw std::invalid_argument("DUNetConfig: input_size must be a positive multiple of 32");
  if (head_count != 4) throw std::invalid_argument("DUNetConfig: head_count is fixed at 4");
  for (int l : block_layers)
    if (l < 1) throw std::invalid_argument("DUNetConfig: block_layers entries must be >= 1");
  if (growth_rate < 1) throw std::invalid_argument("DUNetConfig: growth_rate must be >= 1");
  if (stem_filters < 1 || bottleneck_filters < 1 || lateral_channels < 1)
    throw std::invalid_argument("DUNetConfig: filter counts must be >= 1");
  if (anchors_per_cell < 1)
    throw std::invalid_argument("DUNetConfig: anchors_per_cell must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("DUNetConfig: num_classes must be >= 1");
}

std::string DUNetConfig::to_json() const {
  json j{{"input_size", input_size},
         {"stem_filters", stem_filters},
         {"block_layers", block_layers},
         {"growth_rate", growth_rate},
         {"bottleneck_filters", bottleneck_filters},
         {"lateral_channels", lateral_channels},
         {"anchors_per_cell", anchors_per_cell},
         {"num_classes", num_classes},
         {"head_count", head_count},
         {"top_down", top_down}};
  return j.dump(2);
}

DUNetConfig DUNetConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  DUNetConfig cfg;
  cfg.input_size = j.value("input_size", cfg.input_size);
  cfg.stem_filters = j.value("stem_filters", cfg.stem_filters);
  cfg.block_layers = j.value("block_layers", cfg.block_layers);
  cfg.growth_rate = j.value("growth_rate", cfg.growth_rate);
  cfg.bottleneck_filters = j.value("bottleneck_filters", cfg.bottleneck_filters);
  cfg.lateral_channels = j.value("lateral_channels", cfg.lateral_channels);
  cfg.anchors_per_cell = j.value("anchors_per_cell", cfg.anchors_per_cell);
  cfg.num_classes = j.at("num_classes");
  cfg.head_count = j.value("head_count", 4);
  cfg.top_down = j.value("top_down", true);
  cfg.validate();
  return cfg;
}

namespace {

// BN -> ReLU -> conv, the layer ordering used throughout the network.
Node* bn_relu_conv(Graph& g, Node* x, const std::string& name, int64_t in_ch,
                   int64_t out_ch, int ksize, int stride, int pad, std::mt19937& rng) {
  Node* h = g.batchnorm(x, name + ".bn", in_ch);
  h = g.relu(h);
  ParamNode* w = g.param(name + ".w", he_uniform({out_ch, in_ch, ksize, ksize}, rng));
  ParamNode* b = g.param(name + ".b", Tensor({out_ch}));
  return g.conv2d(h, w, b, stride, pad);
}

// Dense block: layer l consumes the concat of the block input and all
// previous layer outputs; each layer is a 1x1 bottleneck then a 3x3 conv
// emitting growth_rate channels.
Node* dense_block(Graph& g, Node* input, const std::string& name, int64_t in_ch,
                  int layers, int growth, int bottleneck, std::mt19937& rng) {
  std::vector<Node*> features{input};
  int64_t ch = in_ch;
  for (int l = 0; l < layers; ++l) {
    Node* cat = features.size() == 1 ? features[0] : g.concat_channels(features);
    const std::string ln = name + ".layer" + std::to_string(l);
    Node* h = bn_relu_conv(g, cat, ln + ".squeeze", ch, bottleneck, 1, 1, 0, rng);
    h = bn_relu_conv(g, h, ln + ".conv", bottleneck, growth, 3, 1, 1, rng);
    features.push_back(h);
    ch += growth;
  }
  return g.concat_channels(features);
}

}  // namespace

DUNetModel build_dunet(const DUNetConfig& cfg, int batch, std::mt19937& rng) {
  cfg.validate();
  if (batch < 1) throw std::invalid_argument("build_dunet: batch must be >= 1");

  DUNetModel m;
  m.cfg = cfg;
  m.batch = batch;
  m.graph = std::make_unique<Graph>();
  Graph& g = *m.graph;

  const int64_t S = cfg.input_size;
  m.image = g.input({batch, 3, S, S});

  // Stem: conv3x3/s2 + BN/ReLU + avgpool2 -> total stride 4.
  ParamNode* stem_w = g.param("stem.w", he_uniform({cfg.stem_filters, 3, 3, 3}, rng));
  ParamNode* stem_b = g.param("stem.b", Tensor({cfg.stem_filters}));
  Node* h = g.conv2d(m.image, stem_w, stem_b, 2, 1);
  h = g.batchnorm(h, "stem.bn", cfg.stem_filters);
  h = g.relu(h);
  h = g.avgpool(h, 2, 2);

  // Bottom-up pathway: four dense blocks with maxpool transitions.
  std::array<Node*, 4> blocks{};
  int64_t ch = cfg.stem_filters;
  for (int b = 0; b < 4; ++b) {
    if (b > 0) h = g.maxpool(h, 2, 2);
    h = dense_block(g, h, "block" + std::to_string(b + 1), ch, cfg.block_layers[b],
                    cfg.growth_rate, cfg.bottleneck_filters, rng);
    ch += static_cast<int64_t>(cfg.block_layers[b]) * cfg.growth_rate;
    blocks[b] = h;
    m.block_out_channels[b] = static_cast<int>(ch);
  }

  // Lateral 1x1 projections to a common width.
  std::array<Node*, 4> lateral{};
  {
    int64_t c = cfg.stem_filters;
    for (int b = 0; b < 4; ++b) {
      c += static_cast<int64_t>(cfg.block_layers[b]) * cfg.growth_rate;
      lateral[b] = bn_relu_conv(g, blocks[b], "lateral" + std::to_string(b + 1), c,
                                cfg.lateral_channels, 1, 1, 0, rng);
    }
  }

  // Pre-draw the head weights so the top-down and ablated variants share
  // identical initialization for every common parameter (the smoothing convs
  // below exist only in the top-down variant and draw from the rng last).
  const int64_t cls_ch = static_cast<int64_t>(cfg.anchors_per_cell) * (cfg.num_classes + 1);
  const int64_t box_ch = static_cast<int64_t>(cfg.anchors_per_cell) * 4;
  std::array<Tensor, 4> cls_w_init, box_w_init;
  for (int b = 0; b < 4; ++b) {
    cls_w_init[static_cast<size_t>(b)] =
        he_uniform({cls_ch, cfg.lateral_channels, 3, 3}, rng);
    box_w_init[static_cast<size_t>(b)] =
        he_uniform({box_ch, cfg.lateral_channels, 3, 3}, rng);
  }

  // Top-down pathway: upscale, sum, then a 3x3 smoothing conv that lets the
  // head unmix the shallow detail from the upsampled context (and damps
  // upsampling aliasing). Ablated variant keeps the laterals only.
  std::array<Node*, 4> merged{};
  merged[3] = lateral[3];
  for (int b = 2; b >= 0; --b) {
    if (cfg.top_down) {
      Node* sum = g.add(lateral[b], g.upsample2(merged[b + 1]));
      merged[b] = bn_relu_conv(g, sum, "smooth" + std::to_string(b + 1),
                               cfg.lateral_channels, cfg.lateral_channels, 3, 1, 1, rng);
    } else {
      merged[b] = lateral[b];
    }
  }

  // Prediction heads: shared BN/ReLU, then parallel class and box 3x3 convs.
  for (int b = 0; b < 4; ++b) {
    const std::string hn = "head" + std::to_string(b + 1);
    Node* f = g.batchnorm(merged[b], hn + ".bn", cfg.lateral_channels);
    f = g.relu(f);
    ParamNode* cw = g.param(hn + ".cls.w", cls_w_init[static_cast<size_t>(b)]);
    ParamNode* cb = g.param(hn + ".cls.b", Tensor({cls_ch}));
    ParamNode* bw = g.param(hn + ".box.w", box_w_init[static_cast<size_t>(b)]);
    ParamNode* bb = g.param(hn + ".box.b", Tensor({box_ch}));
    m.head_scores[b] = g.conv2d(f, cw, cb, 1, 1);
    m.head_offsets[b] = g.conv2d(f, bw, bb, 1, 1);
  }

  m.conf_flat = g.flatten_heads({m.head_scores.begin(), m.head_scores.end()},
                                cfg.num_classes + 1);
  m.loc_flat = g.flatten_heads({m.head_offsets.begin(), m.head_offsets.end()}, 4);
  return m;
}

void DUNetModel::forward_infer(Tensor image_batch) {
  image->set(std::move(image_batch));
  graph->forward(false);
}

}  // namespace dunet

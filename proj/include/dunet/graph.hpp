#pragma once

#include <array>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dunet/tensor.hpp"

namespace dunet {

enum class OpKind {
  input,
  param,
  conv2d,
  batchnorm,
  relu,
  maxpool,
  avgpool,
  upsample2,
  concat_channels,
  add,
  flatten_heads,
  softmax_ce,
  smooth_l1,
  multibox_loss,
};

class Graph;

class Node {
 public:
  Node(OpKind kind, std::vector<Node*> inputs, std::vector<int64_t> out_shape)
      : kind_(kind), inputs_(std::move(inputs)), out_shape_(std::move(out_shape)) {}
  virtual ~Node() = default;

  OpKind kind() const { return kind_; }
  const std::vector<Node*>& inputs() const { return inputs_; }
  const std::vector<int64_t>& out_shape() const { return out_shape_; }

  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }
  Tensor& grad() { return grad_; }
  const Tensor& grad() const { return grad_; }

  bool has_grad() const { return grad_.size() > 0; }
  // Allocates a zero gradient of the output shape if none exists.
  Tensor& ensure_grad();
  void zero_grad() { grad_ = Tensor(); }

  virtual void forward(bool training) = 0;
  virtual void backward() = 0;

 protected:
  void alloc_value() {
    if (value_.shape() != out_shape_) value_ = Tensor(out_shape_);
  }

  OpKind kind_;
  std::vector<Node*> inputs_;
  std::vector<int64_t> out_shape_;
  Tensor value_;
  Tensor grad_;
};

class InputNode final : public Node {
 public:
  explicit InputNode(std::vector<int64_t> shape) : Node(OpKind::input, {}, shape) {
    value_ = Tensor(std::move(shape));
  }
  void forward(bool) override {}
  void backward() override {}
  void set(Tensor t);
};

class ParamNode final : public Node {
 public:
  ParamNode(std::string name, Tensor init)
      : Node(OpKind::param, {}, init.shape()), name_(std::move(name)) {
    value_ = std::move(init);
  }
  const std::string& name() const { return name_; }
  void forward(bool) override {}
  void backward() override {}

 private:
  std::string name_;
};

class Conv2dNode final : public Node {
 public:
  Conv2dNode(Node* x, ParamNode* w, ParamNode* b, int stride, int pad);
  void forward(bool training) override;
  void backward() override;

 private:
  int stride_, pad_;
  std::vector<double> col_;  // im2col scratch, reused across calls
};

class BatchNormNode final : public Node {
 public:
  BatchNormNode(Node* x, ParamNode* scale, ParamNode* shift, double eps, double momentum);
  void forward(bool training) override;
  void backward() override;

  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  double eps_, momentum_;
  Tensor running_mean_, running_var_;
  Tensor xhat_;                       // cached normalized input
  std::vector<double> mean_, inv_std_;
  bool trained_forward_ = false;      // stats of last forward were batch stats
};

class ReluNode final : public Node {
 public:
  explicit ReluNode(Node* x);
  void forward(bool training) override;
  void backward() override;
};

class PoolNode final : public Node {
 public:
  PoolNode(Node* x, bool is_max, int k, int stride);
  void forward(bool training) override;
  void backward() override;

 private:
  bool is_max_;
  int k_, stride_;
  std::vector<int64_t> argmax_;
};

class Upsample2Node final : public Node {
 public:
  explicit Upsample2Node(Node* x);
  void forward(bool training) override;
  void backward() override;
};

class ConcatChannelsNode final : public Node {
 public:
  explicit ConcatChannelsNode(std::vector<Node*> xs);
  void forward(bool training) override;
  void backward() override;
};

class AddNode final : public Node {
 public:
  AddNode(Node* a, Node* b);
  void forward(bool training) override;
  void backward() override;
};

// Reorders detection-head maps [N, A*item, g, g] into one matrix [M, item]
// with rows ordered batch-major, then head-major, then cell row-major, then
// anchor index. Matches the anchor ordering of generate_anchors().
class FlattenHeadsNode final : public Node {
 public:
  FlattenHeadsNode(std::vector<Node*> heads, int64_t item);
  void forward(bool training) override;
  void backward() override;

 private:
  int64_t item_;
  void scatter(bool to_grad);
};

// Sum of per-row softmax cross-entropy losses. Rows with label < 0 are ignored.
class SoftmaxCENode final : public Node {
 public:
  explicit SoftmaxCENode(Node* logits);
  void set_labels(std::vector<int> labels) { labels_ = std::move(labels); }
  void forward(bool training) override;
  void backward() override;

 private:
  std::vector<int> labels_;
  std::vector<double> probs_;
};

// Sum of elementwise smooth-L1 between input and a fixed target tensor.
class SmoothL1Node final : public Node {
 public:
  explicit SmoothL1Node(Node* pred);
  void set_target(Tensor t) { target_ = std::move(t); }
  void forward(bool training) override;
  void backward() override;

 private:
  Tensor target_;
};

// SSD multibox objective over flattened head outputs.
// conf: [M, K+1] logits, loc: [M, 4] offsets. Per-anchor class labels:
// 0 = background, >0 = positive of that class. Positives also carry an
// encoded 4-vector regression target.
class MultiboxLossNode final : public Node {
 public:
  MultiboxLossNode(Node* conf, Node* loc, double neg_pos_ratio, double loc_weight);

  void set_targets(std::vector<int> labels, std::vector<std::array<double, 4>> loc_targets);

  void forward(bool training) override;
  void backward() override;

  double conf_loss() const { return conf_loss_; }
  double loc_loss() const { return loc_loss_; }
  int num_positives() const { return num_pos_; }
  int num_selected_negatives() const { return static_cast<int>(selected_neg_.size()); }

 private:
  double neg_pos_ratio_, loc_weight_;
  std::vector<int> labels_;
  std::vector<std::array<double, 4>> loc_targets_;
  std::vector<int64_t> positives_, selected_neg_;
  std::vector<double> probs_;  // softmax rows for selected anchors, M x (K+1)
  double conf_loss_ = 0, loc_loss_ = 0;
  int num_pos_ = 0;
};

// Owns nodes in topological (insertion) order and drives forward/backward.
class Graph {
 public:
  InputNode* input(std::vector<int64_t> shape);
  ParamNode* param(const std::string& name, Tensor init);

  Node* conv2d(Node* x, ParamNode* w, ParamNode* b, int stride, int pad);
  BatchNormNode* batchnorm(Node* x, const std::string& name_prefix, int64_t channels,
                           double eps = 1e-5, double momentum = 0.9);
  Node* relu(Node* x);
  Node* maxpool(Node* x, int k, int stride);
  Node* avgpool(Node* x, int k, int stride);
  Node* upsample2(Node* x);
  Node* concat_channels(std::vector<Node*> xs);
  Node* add(Node* a, Node* b);
  FlattenHeadsNode* flatten_heads(std::vector<Node*> heads, int64_t item);
  SoftmaxCENode* softmax_ce(Node* logits);
  SmoothL1Node* smooth_l1(Node* pred);
  MultiboxLossNode* multibox_loss(Node* conf, Node* loc, double neg_pos_ratio,
                                  double loc_weight);

  void forward(bool training);
  void backward(Node* loss);
  void zero_grad();

  const std::vector<ParamNode*>& params() const { return params_; }
  int64_t count_parameters() const;

  // Trainable parameters plus batchnorm running statistics, by name.
  std::map<std::string, Tensor*> named_state();

 private:
  template <typename T, typename... Args>
  T* emplace(Args&&... args) {
    auto node = std::make_unique<T>(std::forward<Args>(args)...);
    T* p = node.get();
    nodes_.push_back(std::move(node));
    return p;
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<ParamNode*> params_;
  std::map<std::string, Tensor*> buffers_;
  bool forward_done_ = false;
};

// He-uniform conv weight init: U(-limit, limit), limit = sqrt(6 / fan_in).
Tensor he_uniform(const std::vector<int64_t>& shape, std::mt19937& rng);

}  // namespace dunet

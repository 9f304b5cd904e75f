#include "dunet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dunet {

namespace {

void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n) {
  // c[m,n] += a[m,k] * b[n,k]^T
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n) {
  // c[m,n] = a[k,m]^T * b[k,n]
  std::fill(c, c + m * n, 0.0);
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

[[noreturn]] void dim_error(const std::string& op, const std::string& detail) {
  throw DimensionError(op + ": " + detail);
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad_.shape() != out_shape_) grad_ = Tensor(out_shape_);
  return grad_;
}

void InputNode::set(Tensor t) {
  if (t.shape() != out_shape_)
    dim_error("input", "expected " + value_.shape_str() + ", got " + t.shape_str());
  value_ = std::move(t);
}

// ---------------------------------------------------------------------------
// Conv2d: cross-correlation via im2col + gemm.

static std::vector<int64_t> conv_out_shape(Node* x, ParamNode* w, int stride, int pad) {
  const auto& xs = x->out_shape();
  const auto& ws = w->out_shape();
  if (xs.size() != 4 || ws.size() != 4) dim_error("conv2d", "inputs must be rank 4");
  if (ws[1] != xs[1])
    dim_error("conv2d", "weight in-channels " + std::to_string(ws[1]) +
                            " != input channels " + std::to_string(xs[1]));
  const int64_t kh = ws[2], kw = ws[3];
  if (kh % 2 == 0 || kw % 2 == 0) dim_error("conv2d", "kernel dims must be odd");
  if (stride < 1 || pad < 0) dim_error("conv2d", "bad stride/pad");
  const int64_t oh = (xs[2] + 2 * pad - kh) / stride + 1;
  const int64_t ow = (xs[3] + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) dim_error("conv2d", "kernel larger than padded input");
  return {xs[0], ws[0], oh, ow};
}

Conv2dNode::Conv2dNode(Node* x, ParamNode* w, ParamNode* b, int stride, int pad)
    : Node(OpKind::conv2d, {x, w, b}, conv_out_shape(x, w, stride, pad)),
      stride_(stride),
      pad_(pad) {
  if (b->out_shape() != std::vector<int64_t>{w->out_shape()[0]})
    dim_error("conv2d", "bias length must equal filter count");
}

static void im2col(const Tensor& x, int64_t n, int64_t kh, int64_t kw, int stride,
                   int pad, int64_t oh, int64_t ow, double* col) {
  const int64_t C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  // col layout: [C*kh*kw, oh*ow]
  int64_t row = 0;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t dy = 0; dy < kh; ++dy) {
      for (int64_t dx = 0; dx < kw; ++dx, ++row) {
        double* dst = col + row * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          const int64_t sy = y * stride + dy - pad;
          if (sy < 0 || sy >= H) {
            std::fill(dst + y * ow, dst + (y + 1) * ow, 0.0);
            continue;
          }
          const double* src = &x.at4(n, c, sy, 0);
          for (int64_t xo = 0; xo < ow; ++xo) {
            const int64_t sx = xo * stride + dx - pad;
            dst[y * ow + xo] = (sx < 0 || sx >= W) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

static void col2im_add(const double* col, int64_t kh, int64_t kw, int stride, int pad,
                       int64_t oh, int64_t ow, Tensor& dx, int64_t n) {
  const int64_t C = dx.shape()[1], H = dx.shape()[2], W = dx.shape()[3];
  int64_t row = 0;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t dy = 0; dy < kh; ++dy) {
      for (int64_t dxk = 0; dxk < kw; ++dxk, ++row) {
        const double* src = col + row * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          const int64_t sy = y * stride + dy - pad;
          if (sy < 0 || sy >= H) continue;
          for (int64_t xo = 0; xo < ow; ++xo) {
            const int64_t sx = xo * stride + dxk - pad;
            if (sx < 0 || sx >= W) continue;
            dx.at4(n, c, sy, sx) += src[y * ow + xo];
          }
        }
      }
    }
  }
}

void Conv2dNode::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  const Tensor& w = inputs_[1]->value();
  const Tensor& b = inputs_[2]->value();
  const int64_t N = x.shape()[0], F = w.shape()[0];
  const int64_t kh = w.shape()[2], kw = w.shape()[3];
  const int64_t oh = out_shape_[2], ow = out_shape_[3];
  const int64_t ckk = x.shape()[1] * kh * kw;
  col_.resize(static_cast<size_t>(ckk * oh * ow));
  for (int64_t n = 0; n < N; ++n) {
    im2col(x, n, kh, kw, stride_, pad_, oh, ow, col_.data());
    double* out = &value_.at4(n, 0, 0, 0);
    gemm(w.data(), col_.data(), out, F, ckk, oh * ow);
    for (int64_t f = 0; f < F; ++f) {
      double* dst = out + f * oh * ow;
      const double bv = b[f];
      if (bv != 0.0)
        for (int64_t i = 0; i < oh * ow; ++i) dst[i] += bv;
    }
  }
}

void Conv2dNode::backward() {
  const Tensor& x = inputs_[0]->value();
  const Tensor& w = inputs_[1]->value();
  Tensor& dx = inputs_[0]->ensure_grad();
  Tensor& dw = inputs_[1]->ensure_grad();
  Tensor& db = inputs_[2]->ensure_grad();
  const int64_t N = x.shape()[0], F = w.shape()[0];
  const int64_t kh = w.shape()[2], kw = w.shape()[3];
  const int64_t oh = out_shape_[2], ow = out_shape_[3];
  const int64_t ckk = x.shape()[1] * kh * kw;
  col_.resize(static_cast<size_t>(ckk * oh * ow));
  std::vector<double> dcol(static_cast<size_t>(ckk * oh * ow));
  for (int64_t n = 0; n < N; ++n) {
    const double* dout = &grad_.at4(n, 0, 0, 0);
    im2col(x, n, kh, kw, stride_, pad_, oh, ow, col_.data());
    gemm_nt(dout, col_.data(), dw.data(), F, oh * ow, ckk);
    gemm_tn(w.data(), dout, dcol.data(), ckk, F, oh * ow);
    col2im_add(dcol.data(), kh, kw, stride_, pad_, oh, ow, dx, n);
    for (int64_t f = 0; f < F; ++f) {
      double acc = 0;
      const double* src = dout + f * oh * ow;
      for (int64_t i = 0; i < oh * ow; ++i) acc += src[i];
      db[f] += acc;
    }
  }
}

// ---------------------------------------------------------------------------
// BatchNorm over (N,H,W) per channel.

BatchNormNode::BatchNormNode(Node* x, ParamNode* scale, ParamNode* shift, double eps,
                             double momentum)
    : Node(OpKind::batchnorm, {x, scale, shift}, x->out_shape()),
      eps_(eps),
      momentum_(momentum) {
  if (x->out_shape().size() != 4) dim_error("batchnorm", "input must be rank 4");
  const int64_t C = x->out_shape()[1];
  if (scale->out_shape() != std::vector<int64_t>{C} ||
      shift->out_shape() != std::vector<int64_t>{C})
    dim_error("batchnorm", "scale/shift length must equal channel count " +
                               std::to_string(C));
  if (eps <= 0) throw std::invalid_argument("batchnorm: eps must be positive");
  running_mean_ = Tensor({C});
  running_var_ = Tensor({C}, 1.0);
}

void BatchNormNode::forward(bool training) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  const Tensor& scale = inputs_[1]->value();
  const Tensor& shift = inputs_[2]->value();
  const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t plane = H * W;
  const double count = static_cast<double>(N * plane);
  mean_.assign(static_cast<size_t>(C), 0.0);
  inv_std_.assign(static_cast<size_t>(C), 0.0);
  if (xhat_.shape() != x.shape()) xhat_ = Tensor(x.shape());
  trained_forward_ = training;

  for (int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      double s = 0, s2 = 0;
      for (int64_t n = 0; n < N; ++n) {
        const double* src = &x.at4(n, c, 0, 0);
        for (int64_t i = 0; i < plane; ++i) {
          s += src[i];
          s2 += src[i] * src[i];
        }
      }
      mu = s / count;
      var = s2 / count - mu * mu;
      if (var < 0) var = 0;  // numeric guard
      running_mean_[c] = momentum_ * running_mean_[c] + (1 - momentum_) * mu;
      running_var_[c] = momentum_ * running_var_[c] + (1 - momentum_) * var;
    } else {
      mu = running_mean_[c];
      var = running_var_[c];
    }
    mean_[static_cast<size_t>(c)] = mu;
    const double istd = 1.0 / std::sqrt(var + eps_);
    inv_std_[static_cast<size_t>(c)] = istd;
    const double g = scale[c], b = shift[c];
    for (int64_t n = 0; n < N; ++n) {
      const double* src = &x.at4(n, c, 0, 0);
      double* xh = &xhat_.at4(n, c, 0, 0);
      double* dst = &value_.at4(n, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mu) * istd;
        dst[i] = g * xh[i] + b;
      }
    }
  }
}

void BatchNormNode::backward() {
  const Tensor& x = inputs_[0]->value();
  const Tensor& scale = inputs_[1]->value();
  Tensor& dx = inputs_[0]->ensure_grad();
  Tensor& dscale = inputs_[1]->ensure_grad();
  Tensor& dshift = inputs_[2]->ensure_grad();
  const int64_t N = x.shape()[0], C = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  const double count = static_cast<double>(N * plane);

  for (int64_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int64_t n = 0; n < N; ++n) {
      const double* dy = &grad_.at4(n, c, 0, 0);
      const double* xh = &xhat_.at4(n, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    dscale[c] += sum_dy_xhat;
    dshift[c] += sum_dy;
    const double g = scale[c], istd = inv_std_[static_cast<size_t>(c)];
    if (trained_forward_) {
      const double m_dy = sum_dy / count, m_dy_xhat = sum_dy_xhat / count;
      for (int64_t n = 0; n < N; ++n) {
        const double* dy = &grad_.at4(n, c, 0, 0);
        const double* xh = &xhat_.at4(n, c, 0, 0);
        double* dst = &dx.at4(n, c, 0, 0);
        for (int64_t i = 0; i < plane; ++i)
          dst[i] += g * istd * (dy[i] - m_dy - xh[i] * m_dy_xhat);
      }
    } else {
      for (int64_t n = 0; n < N; ++n) {
        const double* dy = &grad_.at4(n, c, 0, 0);
        double* dst = &dx.at4(n, c, 0, 0);
        for (int64_t i = 0; i < plane; ++i) dst[i] += g * istd * dy[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------

ReluNode::ReluNode(Node* x) : Node(OpKind::relu, {x}, x->out_shape()) {}

void ReluNode::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  for (int64_t i = 0; i < x.size(); ++i) value_[i] = x[i] > 0 ? x[i] : 0.0;
}

void ReluNode::backward() {
  const Tensor& x = inputs_[0]->value();
  Tensor& dx = inputs_[0]->ensure_grad();
  for (int64_t i = 0; i < x.size(); ++i)
    if (x[i] > 0) dx[i] += grad_[i];
}

// ---------------------------------------------------------------------------

static std::vector<int64_t> pool_out_shape(Node* x, int k, int stride) {
  const auto& xs = x->out_shape();
  if (xs.size() != 4) dim_error("pool", "input must be rank 4");
  if (k < 1 || stride < 1) dim_error("pool", "bad k/stride");
  if (xs[2] < k || xs[3] < k)
    dim_error("pool", "window " + std::to_string(k) + " larger than input " +
                          std::to_string(xs[2]) + "x" + std::to_string(xs[3]));
  return {xs[0], xs[1], (xs[2] - k) / stride + 1, (xs[3] - k) / stride + 1};
}

PoolNode::PoolNode(Node* x, bool is_max, int k, int stride)
    : Node(is_max ? OpKind::maxpool : OpKind::avgpool, {x}, pool_out_shape(x, k, stride)),
      is_max_(is_max),
      k_(k),
      stride_(stride) {}

void PoolNode::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const int64_t oh = out_shape_[2], ow = out_shape_[3];
  if (is_max_) argmax_.assign(static_cast<size_t>(value_.size()), 0);
  int64_t oi = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xo = 0; xo < ow; ++xo, ++oi) {
          if (is_max_) {
            double best = -1e308;
            int64_t best_idx = -1;
            for (int64_t dy = 0; dy < k_; ++dy)
              for (int64_t dx = 0; dx < k_; ++dx) {
                const int64_t sy = y * stride_ + dy, sx = xo * stride_ + dx;
                const double v = x.at4(n, c, sy, sx);
                if (v > best) {  // strict: first index wins ties
                  best = v;
                  best_idx = ((n * C + c) * x.shape()[2] + sy) * x.shape()[3] + sx;
                }
              }
            value_[oi] = best;
            argmax_[static_cast<size_t>(oi)] = best_idx;
          } else {
            double s = 0;
            for (int64_t dy = 0; dy < k_; ++dy)
              for (int64_t dx = 0; dx < k_; ++dx)
                s += x.at4(n, c, y * stride_ + dy, xo * stride_ + dx);
            value_[oi] = s / (k_ * k_);
          }
        }
}

void PoolNode::backward() {
  Tensor& dx = inputs_[0]->ensure_grad();
  if (is_max_) {
    for (int64_t i = 0; i < value_.size(); ++i)
      dx[argmax_[static_cast<size_t>(i)]] += grad_[i];
    return;
  }
  const Tensor& x = inputs_[0]->value();
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const int64_t oh = out_shape_[2], ow = out_shape_[3];
  const double inv = 1.0 / (k_ * k_);
  int64_t oi = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xo = 0; xo < ow; ++xo, ++oi) {
          const double g = grad_[oi] * inv;
          for (int64_t dy = 0; dy < k_; ++dy)
            for (int64_t dx2 = 0; dx2 < k_; ++dx2)
              dx.at4(n, c, y * stride_ + dy, xo * stride_ + dx2) += g;
        }
}

// ---------------------------------------------------------------------------

static std::vector<int64_t> up2_shape(Node* x) {
  auto s = x->out_shape();
  if (s.size() != 4) dim_error("upsample2", "input must be rank 4");
  s[2] *= 2;
  s[3] *= 2;
  return s;
}

Upsample2Node::Upsample2Node(Node* x) : Node(OpKind::upsample2, {x}, up2_shape(x)) {}

void Upsample2Node::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xo = 0; xo < W; ++xo) {
          const double v = x.at4(n, c, y, xo);
          value_.at4(n, c, 2 * y, 2 * xo) = v;
          value_.at4(n, c, 2 * y, 2 * xo + 1) = v;
          value_.at4(n, c, 2 * y + 1, 2 * xo) = v;
          value_.at4(n, c, 2 * y + 1, 2 * xo + 1) = v;
        }
}

void Upsample2Node::backward() {
  Tensor& dx = inputs_[0]->ensure_grad();
  const int64_t N = dx.shape()[0], C = dx.shape()[1], H = dx.shape()[2], W = dx.shape()[3];
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xo = 0; xo < W; ++xo)
          dx.at4(n, c, y, xo) += grad_.at4(n, c, 2 * y, 2 * xo) +
                                 grad_.at4(n, c, 2 * y, 2 * xo + 1) +
                                 grad_.at4(n, c, 2 * y + 1, 2 * xo) +
                                 grad_.at4(n, c, 2 * y + 1, 2 * xo + 1);
}

// ---------------------------------------------------------------------------

static std::vector<int64_t> concat_shape(const std::vector<Node*>& xs) {
  if (xs.empty()) dim_error("concat", "no inputs");
  auto s = xs[0]->out_shape();
  if (s.size() != 4) dim_error("concat", "inputs must be rank 4");
  for (size_t i = 1; i < xs.size(); ++i) {
    const auto& o = xs[i]->out_shape();
    if (o.size() != 4 || o[0] != s[0] || o[2] != s[2] || o[3] != s[3])
      dim_error("concat", "input " + std::to_string(i) + " spatial/batch mismatch");
    s[1] += o[1];
  }
  return s;
}

ConcatChannelsNode::ConcatChannelsNode(std::vector<Node*> xs)
    : Node(OpKind::concat_channels, xs, concat_shape(xs)) {}

void ConcatChannelsNode::forward(bool) {
  alloc_value();
  const int64_t N = out_shape_[0], plane = out_shape_[2] * out_shape_[3];
  for (int64_t n = 0; n < N; ++n) {
    int64_t coff = 0;
    for (Node* in : inputs_) {
      const Tensor& x = in->value();
      const int64_t C = x.shape()[1];
      std::memcpy(&value_.at4(n, coff, 0, 0), &x.at4(n, 0, 0, 0),
                  static_cast<size_t>(C * plane) * sizeof(double));
      coff += C;
    }
  }
}

void ConcatChannelsNode::backward() {
  const int64_t N = out_shape_[0], plane = out_shape_[2] * out_shape_[3];
  for (int64_t n = 0; n < N; ++n) {
    int64_t coff = 0;
    for (Node* in : inputs_) {
      Tensor& dx = in->ensure_grad();
      const int64_t C = dx.shape()[1];
      const double* src = &grad_.at4(n, coff, 0, 0);
      double* dst = &dx.at4(n, 0, 0, 0);
      for (int64_t i = 0; i < C * plane; ++i) dst[i] += src[i];
      coff += C;
    }
  }
}

// ---------------------------------------------------------------------------

AddNode::AddNode(Node* a, Node* b) : Node(OpKind::add, {a, b}, a->out_shape()) {
  if (a->out_shape() != b->out_shape())
    dim_error("add", "shape mismatch " + Tensor(a->out_shape()).shape_str() + " vs " +
                         Tensor(b->out_shape()).shape_str());
}

void AddNode::forward(bool) {
  alloc_value();
  const Tensor& a = inputs_[0]->value();
  const Tensor& b = inputs_[1]->value();
  for (int64_t i = 0; i < a.size(); ++i) value_[i] = a[i] + b[i];
}

void AddNode::backward() {
  Tensor& da = inputs_[0]->ensure_grad();
  Tensor& db = inputs_[1]->ensure_grad();
  for (int64_t i = 0; i < grad_.size(); ++i) {
    da[i] += grad_[i];
    db[i] += grad_[i];
  }
}

// ---------------------------------------------------------------------------

static std::vector<int64_t> flatten_shape(const std::vector<Node*>& heads, int64_t item) {
  if (heads.empty()) dim_error("flatten_heads", "no inputs");
  int64_t rows = 0;
  const int64_t N = heads[0]->out_shape()[0];
  for (Node* h : heads) {
    const auto& s = h->out_shape();
    if (s.size() != 4 || s[0] != N) dim_error("flatten_heads", "batch mismatch");
    if (s[1] % item != 0)
      dim_error("flatten_heads", "channels " + std::to_string(s[1]) +
                                     " not a multiple of item size " + std::to_string(item));
    rows += (s[1] / item) * s[2] * s[3];
  }
  return {N * rows, item};
}

FlattenHeadsNode::FlattenHeadsNode(std::vector<Node*> heads, int64_t item)
    : Node(OpKind::flatten_heads, heads, flatten_shape(heads, item)),
      item_(item) {}

void FlattenHeadsNode::scatter(bool to_grad) {
  const int64_t N = inputs_[0]->out_shape()[0];
  int64_t row = 0;
  for (int64_t n = 0; n < N; ++n) {
    for (Node* h : inputs_) {
      const auto& s = h->out_shape();
      const int64_t A = s[1] / item_, g_h = s[2], g_w = s[3];
      for (int64_t y = 0; y < g_h; ++y)
        for (int64_t x = 0; x < g_w; ++x)
          for (int64_t a = 0; a < A; ++a, ++row)
            for (int64_t k = 0; k < item_; ++k) {
              if (to_grad) {
                h->ensure_grad().at4(n, a * item_ + k, y, x) += grad_[row * item_ + k];
              } else {
                value_[row * item_ + k] = h->value().at4(n, a * item_ + k, y, x);
              }
            }
    }
  }
}

void FlattenHeadsNode::forward(bool) {
  alloc_value();
  scatter(false);
}

void FlattenHeadsNode::backward() { scatter(true); }

// ---------------------------------------------------------------------------

static void softmax_row(const double* logits, int64_t c, double* out) {
  double mx = logits[0];
  for (int64_t k = 1; k < c; ++k) mx = std::max(mx, logits[k]);
  double z = 0;
  for (int64_t k = 0; k < c; ++k) {
    out[k] = std::exp(logits[k] - mx);
    z += out[k];
  }
  for (int64_t k = 0; k < c; ++k) out[k] /= z;
}

SoftmaxCENode::SoftmaxCENode(Node* logits) : Node(OpKind::softmax_ce, {logits}, {1}) {
  if (logits->out_shape().size() != 2) dim_error("softmax_ce", "logits must be rank 2");
}

void SoftmaxCENode::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  const int64_t M = x.shape()[0], C = x.shape()[1];
  if (static_cast<int64_t>(labels_.size()) != M)
    dim_error("softmax_ce", "label count != row count");
  probs_.assign(static_cast<size_t>(M * C), 0.0);
  double loss = 0;
  for (int64_t i = 0; i < M; ++i) {
    softmax_row(x.data() + i * C, C, probs_.data() + i * C);
    const int lbl = labels_[static_cast<size_t>(i)];
    if (lbl < 0) continue;
    loss += -std::log(std::max(probs_[static_cast<size_t>(i * C + lbl)], 1e-300));
  }
  value_[0] = loss;
}

void SoftmaxCENode::backward() {
  const Tensor& x = inputs_[0]->value();
  Tensor& dx = inputs_[0]->ensure_grad();
  const int64_t M = x.shape()[0], C = x.shape()[1];
  const double g = grad_[0];
  for (int64_t i = 0; i < M; ++i) {
    const int lbl = labels_[static_cast<size_t>(i)];
    if (lbl < 0) continue;
    for (int64_t k = 0; k < C; ++k)
      dx[i * C + k] += g * (probs_[static_cast<size_t>(i * C + k)] - (k == lbl ? 1.0 : 0.0));
  }
}

// ---------------------------------------------------------------------------

static double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

static double smooth_l1_grad(double d) { return d < -1.0 ? -1.0 : (d > 1.0 ? 1.0 : d); }

SmoothL1Node::SmoothL1Node(Node* pred) : Node(OpKind::smooth_l1, {pred}, {1}) {}

void SmoothL1Node::forward(bool) {
  alloc_value();
  const Tensor& x = inputs_[0]->value();
  if (!x.same_shape(target_)) dim_error("smooth_l1", "target shape mismatch");
  double loss = 0;
  for (int64_t i = 0; i < x.size(); ++i) loss += smooth_l1(x[i] - target_[i]);
  value_[0] = loss;
}

void SmoothL1Node::backward() {
  const Tensor& x = inputs_[0]->value();
  Tensor& dx = inputs_[0]->ensure_grad();
  for (int64_t i = 0; i < x.size(); ++i)
    dx[i] += grad_[0] * smooth_l1_grad(x[i] - target_[i]);
}

// ---------------------------------------------------------------------------

MultiboxLossNode::MultiboxLossNode(Node* conf, Node* loc, double neg_pos_ratio,
                                   double loc_weight)
    : Node(OpKind::multibox_loss, {conf, loc}, {1}),
      neg_pos_ratio_(neg_pos_ratio),
      loc_weight_(loc_weight) {
  const auto& cs = conf->out_shape();
  const auto& ls = loc->out_shape();
  if (cs.size() != 2 || ls.size() != 2 || ls[1] != 4 || cs[0] != ls[0])
    dim_error("multibox_loss", "conf [M,K+1] and loc [M,4] must agree on M");
}

void MultiboxLossNode::set_targets(std::vector<int> labels,
                                   std::vector<std::array<double, 4>> loc_targets) {
  labels_ = std::move(labels);
  loc_targets_ = std::move(loc_targets);
}

void MultiboxLossNode::forward(bool) {
  alloc_value();
  const Tensor& conf = inputs_[0]->value();
  const Tensor& loc = inputs_[1]->value();
  const int64_t M = conf.shape()[0], C = conf.shape()[1];
  if (static_cast<int64_t>(labels_.size()) != M)
    dim_error("multibox_loss", "label count != anchor count");

  probs_.assign(static_cast<size_t>(M * C), 0.0);
  positives_.clear();
  selected_neg_.clear();

  std::vector<std::pair<double, int64_t>> neg_losses;  // (-bg_loss, idx) for sorting
  for (int64_t i = 0; i < M; ++i) {
    softmax_row(conf.data() + i * C, C, probs_.data() + i * C);
    if (labels_[static_cast<size_t>(i)] > 0) {
      positives_.push_back(i);
    } else {
      const double bg_loss = -std::log(std::max(probs_[static_cast<size_t>(i * C)], 1e-300));
      neg_losses.emplace_back(-bg_loss, i);
    }
  }
  num_pos_ = static_cast<int>(positives_.size());

  // Hardest negatives at the configured ratio; at least one when no positives.
  size_t want = num_pos_ > 0 ? static_cast<size_t>(neg_pos_ratio_ * num_pos_)
                             : (neg_losses.empty() ? 0 : 1);
  want = std::min(want, neg_losses.size());
  std::sort(neg_losses.begin(), neg_losses.end());  // ascending -loss, ties by index
  for (size_t i = 0; i < want; ++i) selected_neg_.push_back(neg_losses[i].second);

  conf_loss_ = 0;
  loc_loss_ = 0;
  for (int64_t i : positives_) {
    const int lbl = labels_[static_cast<size_t>(i)];
    conf_loss_ += -std::log(std::max(probs_[static_cast<size_t>(i * C + lbl)], 1e-300));
    const auto& t = loc_targets_[static_cast<size_t>(i)];
    for (int k = 0; k < 4; ++k) loc_loss_ += smooth_l1(loc[i * 4 + k] - t[k]);
  }
  for (int64_t i : selected_neg_)
    conf_loss_ += -std::log(std::max(probs_[static_cast<size_t>(i * C)], 1e-300));

  const double denom = std::max(num_pos_, 1);
  conf_loss_ /= denom;
  loc_loss_ /= denom;
  value_[0] = conf_loss_ + loc_weight_ * loc_loss_;
}

void MultiboxLossNode::backward() {
  const Tensor& conf = inputs_[0]->value();
  const Tensor& loc = inputs_[1]->value();
  Tensor& dconf = inputs_[0]->ensure_grad();
  Tensor& dloc = inputs_[1]->ensure_grad();
  const int64_t C = conf.shape()[1];
  const double g = grad_[0] / std::max(num_pos_, 1);

  auto ce_grad = [&](int64_t i, int lbl) {
    for (int64_t k = 0; k < C; ++k)
      dconf[i * C + k] += g * (probs_[static_cast<size_t>(i * C + k)] - (k == lbl ? 1.0 : 0.0));
  };
  for (int64_t i : positives_) {
    ce_grad(i, labels_[static_cast<size_t>(i)]);
    const auto& t = loc_targets_[static_cast<size_t>(i)];
    for (int k = 0; k < 4; ++k)
      dloc[i * 4 + k] += g * loc_weight_ * smooth_l1_grad(loc[i * 4 + k] - t[k]);
  }
  for (int64_t i : selected_neg_) ce_grad(i, 0);
}

// ---------------------------------------------------------------------------
// Graph

InputNode* Graph::input(std::vector<int64_t> shape) {
  return emplace<InputNode>(std::move(shape));
}

ParamNode* Graph::param(const std::string& name, Tensor init) {
  auto* p = emplace<ParamNode>(name, std::move(init));
  params_.push_back(p);
  buffers_[name] = &p->value();
  return p;
}

Node* Graph::conv2d(Node* x, ParamNode* w, ParamNode* b, int stride, int pad) {
  return emplace<Conv2dNode>(x, w, b, stride, pad);
}

BatchNormNode* Graph::batchnorm(Node* x, const std::string& prefix, int64_t channels,
                                double eps, double momentum) {
  ParamNode* scale = param(prefix + ".scale", Tensor({channels}, 1.0));
  ParamNode* shift = param(prefix + ".shift", Tensor({channels}, 0.0));
  auto* bn = emplace<BatchNormNode>(x, scale, shift, eps, momentum);
  buffers_[prefix + ".running_mean"] = &bn->running_mean();
  buffers_[prefix + ".running_var"] = &bn->running_var();
  return bn;
}

Node* Graph::relu(Node* x) { return emplace<ReluNode>(x); }
Node* Graph::maxpool(Node* x, int k, int stride) { return emplace<PoolNode>(x, true, k, stride); }
Node* Graph::avgpool(Node* x, int k, int stride) { return emplace<PoolNode>(x, false, k, stride); }
Node* Graph::upsample2(Node* x) { return emplace<Upsample2Node>(x); }
Node* Graph::concat_channels(std::vector<Node*> xs) {
  return emplace<ConcatChannelsNode>(std::move(xs));
}
Node* Graph::add(Node* a, Node* b) { return emplace<AddNode>(a, b); }
FlattenHeadsNode* Graph::flatten_heads(std::vector<Node*> heads, int64_t item) {
  return emplace<FlattenHeadsNode>(std::move(heads), item);
}
SoftmaxCENode* Graph::softmax_ce(Node* logits) { return emplace<SoftmaxCENode>(logits); }
SmoothL1Node* Graph::smooth_l1(Node* pred) { return emplace<SmoothL1Node>(pred); }
MultiboxLossNode* Graph::multibox_loss(Node* conf, Node* loc, double ratio, double alpha) {
  return emplace<MultiboxLossNode>(conf, loc, ratio, alpha);
}

void Graph::forward(bool training) {
  for (auto& n : nodes_) n->forward(training);
  forward_done_ = true;
}

void Graph::backward(Node* loss) {
  if (!forward_done_) throw std::logic_error("backward called before forward");
  if (loss->value().size() != 1) throw std::logic_error("loss node must be scalar");
  // Intermediate grads are per-call scratch; parameter grads accumulate
  // across calls until zero_grad().
  for (auto& n : nodes_)
    if (n->kind() != OpKind::param) n->zero_grad();
  loss->ensure_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if ((*it)->has_grad()) (*it)->backward();
}

void Graph::zero_grad() {
  for (auto& n : nodes_) n->zero_grad();
}

int64_t Graph::count_parameters() const {
  int64_t total = 0;
  for (ParamNode* p : params_) total += p->value().size();
  return total;
}

std::map<std::string, Tensor*> Graph::named_state() { return buffers_; }

Tensor he_uniform(const std::vector<int64_t>& shape, std::mt19937& rng) {
  int64_t fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace dunet

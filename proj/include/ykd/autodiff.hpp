#pragma once

#include <array>
#include <deque>
#include <functional>
#include <vector>

#include "ykd/tensor.hpp"

namespace ykd::ad {

class Tape;

// Handle into a Tape node. Cheap to copy; valid as long as the tape lives.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  double scalar() const;
};

// Reverse-mode tape. Nodes are created in topological order by the op
// functions below; backward() walks them in reverse. One tape per
// forward pass (per image in training), discarded afterwards.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  Value leaf(Tensor v, bool requires_grad);
  Value constant(Tensor v) { return leaf(std::move(v), false); }

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Gradient of the last backward() root w.r.t. node id; zeros if the
  // node was not reached.
  const Tensor& grad(int id) { return grad_ref(id); }

  void backward(Value root);

  size_t size() const { return nodes_.size(); }

  // --- internal, used by op implementations ---
  Value make_node(Tensor v, const std::vector<int>& parents, BackFn backprop);
  Tensor& grad_ref(int id);  // allocates zeros on first touch

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    BackFn backprop;
  };
  // deque: references returned by value()/grad() stay valid while ops
  // append nodes.
  std::deque<Node> nodes_;
};

inline const Tensor& Value::val() const { return tape->value(id); }
inline double Value::scalar() const { return tape->value(id).data[0]; }

// --- elementwise / arithmetic ---
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value a, double s);
Value relu(Value a);
Value sigmoid(Value a);
// log(max(x, eps)); gradient is zero in the clamped region.
Value log_clamped(Value a, double eps = 1e-12);

// --- linear algebra ---
// x: R x K, w: N x K (one row per output unit), b: N. Returns R x N.
Value linear(Value x, Value w, Value b);
// A: R x C (variable) times const B: C x G. Returns R x G.
Value matmul_const(Value a, const Tensor& b);

// --- rows ops (2-D) ---
Value softmax_rows(Value x);
Value normalize_rows(Value x);  // divide each row by its sum
Value gather_cols(Value x, const std::vector<int>& idx);
Value gather_rows(Value x, const std::vector<int>& idx);

// --- conv stack (3-D feature maps C x H x W) ---
Value conv2d(Value x, Value w, Value b, int stride, int pad);
Value maxpool2(Value x);
// 2x2 stride-2 transposed convolution; w: I x O x 2 x 2.
Value deconv2x2(Value x, Value w, Value b);

// --- shape plumbing ---
Value reshape(Value x, std::vector<int> shape);  // same numel, zero-cost view
// [G*group, H, W] -> [G*H*W, group]; row order (g, y, x). Puts per-anchor
// RPN channels side by side.
Value channels_to_rows(Value x, int group);
Value select_image(Value x, int n);            // N x C x H x W -> C x H x W
Value stack_images(const std::vector<Value>& xs);  // inverse of select_image

// --- 4-D proposal stacks (N x C x H x W) ---
Value gather_channels(Value x, const std::vector<int>& idx);
// N x C x H x W -> (N*H*W) x C, so row ops apply per pixel.
Value pixels_as_rows(Value x);
// One bilinear sample per output bin. boxes are (x0,y0,x1,y1) in image
// coordinates; spatial_scale maps image to feature coordinates.
Value roi_align(Value feat, const std::vector<std::array<double, 4>>& boxes,
                int out_size, double spatial_scale);
// C x H x W -> 1 x C row of spatial means.
Value global_avg_pool(Value x);

// --- reductions / losses (all return scalar tensors {1}) ---
Value sum(Value x);
Value mean(Value x);
// sum_i w_i * x_i
Value dot_const(Value x, const Tensor& w);
// sum_i w_i * (x_i - t_i)^2 / norm
Value weighted_mse_const(Value x, const Tensor& t, const Tensor& w, double norm);
// smooth-L1 (Huber, beta): sum_i w_i * h(x_i - t_i) / norm
Value weighted_smooth_l1_const(Value x, const Tensor& t, const Tensor& w,
                               double beta, double norm);
// numerically stable binary cross entropy on logits
Value weighted_bce_logits_const(Value x, const Tensor& t, const Tensor& w,
                                double norm);
// fused log-softmax + NLL over rows; labels.size() == rows; weight per row
Value cross_entropy_rows(Value logits, const std::vector<int>& labels,
                         const Tensor& row_weights, double norm);

}  // namespace ykd::ad

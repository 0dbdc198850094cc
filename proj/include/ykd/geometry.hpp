#pragma once

#include <array>
#include <vector>

#include "ykd/rle.hpp"
#include "ykd/tensor.hpp"

namespace ykd {

// Axis-aligned box in continuous pixel coordinates. Pixel (x, y) covers
// [x, x+1) x [y, y+1), so the tight box of a mask has x1 = max_x + 1.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  std::array<double, 4> arr() const { return {x0, y0, x1, y1}; }

  bool valid() const { return x0 < x1 && y0 < y1; }
};

double box_iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

// Tight bounding box of a mask; requires at least one foreground pixel.
Box tight_box(const Mask& mask);

// Standard (dx, dy, dw, dh) parameterization between an anchor/proposal
// and a target box, with per-coordinate scaling weights.
struct BoxTransform {
  double wx = 10.0, wy = 10.0, ww = 5.0, wh = 5.0;

  std::array<double, 4> encode(const Box& src, const Box& target) const;
  Box decode(const Box& src, const std::array<double, 4>& deltas) const;
};

// Greedy NMS over boxes sorted by descending score; returns kept indices
// in that order. Assumes scores.size() == boxes.size().
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);

// Bilinearly resamples a soft mask (values in [0,1], given as out-of-box
// S x S grid) into image space over `box`, thresholds at 0.5.
Mask paste_mask(const Tensor& soft28, const Box& box, int image_w, int image_h,
                double thresh = 0.5);

// Nearest-neighbour crop-and-resize of a binary mask to S x S over `box`;
// used to build mask training targets.
Tensor crop_mask_to_grid(const Mask& mask, const Box& box, int size);

}  // namespace ykd

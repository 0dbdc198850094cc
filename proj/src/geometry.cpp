#include "ykd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ykd/common.hpp"

namespace ykd {

double box_iou(const Box& a, const Box& b) {
  double ix0 = std::max(a.x0, b.x0);
  double iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1);
  double iy1 = std::min(a.y1, b.y1);
  double iw = ix1 - ix0, ih = iy1 - iy0;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

Box clip_box(const Box& b, double width, double height) {
  Box out;
  out.x0 = std::min(std::max(b.x0, 0.0), width);
  out.y0 = std::min(std::max(b.y0, 0.0), height);
  out.x1 = std::min(std::max(b.x1, 0.0), width);
  out.y1 = std::min(std::max(b.y1, 0.0), height);
  return out;
}

Box tight_box(const Mask& mask) {
  int min_x = mask.width, min_y = mask.height, max_x = -1, max_y = -1;
  for (int y = 0; y < mask.height; ++y) {
    const uint8_t* row = &mask.data[static_cast<size_t>(y) * mask.width];
    for (int x = 0; x < mask.width; ++x) {
      if (row[x]) {
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
    }
  }
  YKD_CHECK(max_x >= 0, "tight_box: empty mask");
  return Box{static_cast<double>(min_x), static_cast<double>(min_y),
             static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
}

std::array<double, 4> BoxTransform::encode(const Box& src, const Box& target) const {
  double sw = std::max(src.width(), 1e-6);
  double sh = std::max(src.height(), 1e-6);
  double tw = std::max(target.width(), 1e-6);
  double th = std::max(target.height(), 1e-6);
  return {wx * (target.cx() - src.cx()) / sw, wy * (target.cy() - src.cy()) / sh,
          ww * std::log(tw / sw), wh * std::log(th / sh)};
}

Box BoxTransform::decode(const Box& src, const std::array<double, 4>& deltas) const {
  double sw = std::max(src.width(), 1e-6);
  double sh = std::max(src.height(), 1e-6);
  // Clamp growth the way detection codebases do, so early training
  // cannot explode box sizes.
  double dw = std::min(deltas[2] / ww, 4.0);
  double dh = std::min(deltas[3] / wh, 4.0);
  double cx = src.cx() + deltas[0] / wx * sw;
  double cy = src.cy() + deltas[1] / wy * sh;
  double w = sw * std::exp(dw);
  double h = sh * std::exp(dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  YKD_CHECK(boxes.size() == scores.size(), "nms: box/score count mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  std::vector<int> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (size_t i = 0; i < order.size(); ++i) {
    int a = order[i];
    if (removed[static_cast<size_t>(a)]) continue;
    keep.push_back(a);
    for (size_t j = i + 1; j < order.size(); ++j) {
      int b = order[j];
      if (removed[static_cast<size_t>(b)]) continue;
      if (box_iou(boxes[static_cast<size_t>(a)], boxes[static_cast<size_t>(b)]) > iou_thresh) {
        removed[static_cast<size_t>(b)] = 1;
      }
    }
  }
  return keep;
}

Mask paste_mask(const Tensor& soft, const Box& box, int image_w, int image_h,
                double thresh) {
  YKD_CHECK(soft.rank() == 2 && soft.dim(0) == soft.dim(1), "paste_mask: need square grid");
  int S = soft.dim(0);
  Mask out(image_w, image_h);
  Box b = clip_box(box, image_w, image_h);
  if (!b.valid()) return out;
  int px0 = static_cast<int>(std::floor(b.x0));
  int py0 = static_cast<int>(std::floor(b.y0));
  int px1 = static_cast<int>(std::ceil(b.x1));
  int py1 = static_cast<int>(std::ceil(b.y1));
  px1 = std::min(px1, image_w);
  py1 = std::min(py1, image_h);
  double bw = std::max(box.width(), 1e-6);
  double bh = std::max(box.height(), 1e-6);
  for (int y = py0; y < py1; ++y) {
    double gy = (y + 0.5 - box.y0) / bh * S - 0.5;
    gy = std::min(std::max(gy, 0.0), static_cast<double>(S - 1));
    int iy = static_cast<int>(gy);
    int iy1 = std::min(iy + 1, S - 1);
    double ly = gy - iy;
    for (int x = px0; x < px1; ++x) {
      double gx = (x + 0.5 - box.x0) / bw * S - 0.5;
      gx = std::min(std::max(gx, 0.0), static_cast<double>(S - 1));
      int ix = static_cast<int>(gx);
      int ix1 = std::min(ix + 1, S - 1);
      double lx = gx - ix;
      double v = (1 - ly) * ((1 - lx) * soft.at(iy, ix) + lx * soft.at(iy, ix1)) +
                 ly * ((1 - lx) * soft.at(iy1, ix) + lx * soft.at(iy1, ix1));
      if (v >= thresh) out.set(x, y, 1);
    }
  }
  return out;
}

Tensor crop_mask_to_grid(const Mask& mask, const Box& box, int size) {
  Tensor out({size, size});
  double bw = std::max(box.width(), 1e-6);
  double bh = std::max(box.height(), 1e-6);
  for (int gy = 0; gy < size; ++gy) {
    double sy = box.y0 + (gy + 0.5) / size * bh;
    int y = static_cast<int>(std::floor(sy));
    for (int gx = 0; gx < size; ++gx) {
      double sx = box.x0 + (gx + 0.5) / size * bw;
      int x = static_cast<int>(std::floor(sx));
      if (x >= 0 && x < mask.width && y >= 0 && y < mask.height && mask.at(x, y)) {
        out.at(gy, gx) = 1.0;
      }
    }
  }
  return out;
}

}  // namespace ykd

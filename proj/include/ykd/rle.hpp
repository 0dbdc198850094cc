#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ykd {

// Binary instance mask, row-major, one byte per pixel (0 background,
// 1 foreground).
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h, 0) {}

  uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  void set(int x, int y, uint8_t v) { data[static_cast<size_t>(y) * width + x] = v; }
  int64_t area() const;
  bool empty_mask() const { return area() == 0; }
};

// Row-major run-length encoding. The first count is the number of
// leading background pixels (possibly 0), then runs alternate
// foreground/background. Serialized as space-separated decimal counts.
std::vector<uint32_t> rle_encode(const Mask& mask);
Mask rle_decode(const std::vector<uint32_t>& counts, int width, int height);

std::string rle_to_string(const std::vector<uint32_t>& counts);
std::vector<uint32_t> rle_from_string(const std::string& s);

// Intersection-over-union of two masks of identical size.
double mask_iou(const Mask& a, const Mask& b);

}  // namespace ykd

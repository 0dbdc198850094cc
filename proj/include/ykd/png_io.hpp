#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ykd {

// Interleaved 8-bit RGB image.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // 3 * width * height

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(3) * w * h, 0) {}

  uint8_t* px(int x, int y) { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
  const uint8_t* px(int x, int y) const {
    return &rgb[(static_cast<size_t>(y) * width + x) * 3];
  }
};

// Minimal PNG codec (8-bit RGB, non-interlaced) over zlib. The writer
// always emits filter type 0 with a fixed compression level, so output
// bytes are a deterministic function of the pixels.
std::vector<uint8_t> png_encode(const ImageU8& img);
ImageU8 png_decode(const std::vector<uint8_t>& bytes);

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

}  // namespace ykd

#include "ykd/rle.hpp"

#include <sstream>

#include "ykd/common.hpp"

namespace ykd {

int64_t Mask::area() const {
  int64_t n = 0;
  for (uint8_t v : data) n += v ? 1 : 0;
  return n;
}

std::vector<uint32_t> rle_encode(const Mask& mask) {
  std::vector<uint32_t> counts;
  uint32_t run = 0;
  uint8_t cur = 0;  // encoding starts with a background run
  for (uint8_t px : mask.data) {
    uint8_t v = px ? 1 : 0;
    if (v != cur) {
      counts.push_back(run);
      run = 0;
      cur = v;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

Mask rle_decode(const std::vector<uint32_t>& counts, int width, int height) {
  YKD_CHECK(width > 0 && height > 0, "rle_decode: bad dimensions");
  Mask mask(width, height);
  size_t pos = 0;
  uint8_t cur = 0;
  size_t total = static_cast<size_t>(width) * height;
  for (uint32_t c : counts) {
    YKD_CHECK(pos + c <= total, "rle_decode: counts exceed mask size ", width, "x", height);
    if (cur) {
      for (uint32_t i = 0; i < c; ++i) mask.data[pos + i] = 1;
    }
    pos += c;
    cur = !cur;
  }
  YKD_CHECK(pos == total, "rle_decode: counts cover ", pos, " of ", total, " pixels");
  return mask;
}

std::string rle_to_string(const std::vector<uint32_t>& counts) {
  std::ostringstream os;
  for (size_t i = 0; i < counts.size(); ++i) {
    if (i) os << ' ';
    os << counts[i];
  }
  return os.str();
}

std::vector<uint32_t> rle_from_string(const std::string& s) {
  std::vector<uint32_t> counts;
  std::istringstream is(s);
  long long v;
  while (is >> v) {
    YKD_CHECK(v >= 0, "rle_from_string: negative count");
    counts.push_back(static_cast<uint32_t>(v));
  }
  YKD_CHECK(!is.fail() || is.eof(), "rle_from_string: malformed counts string");
  YKD_CHECK(!counts.empty(), "rle_from_string: empty counts string");
  return counts;
}

double mask_iou(const Mask& a, const Mask& b) {
  YKD_CHECK(a.width == b.width && a.height == b.height, "mask_iou: size mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace ykd

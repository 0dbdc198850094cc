#include "ykd/png_io.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "ykd/common.hpp"

namespace ykd {

namespace {

const uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
         uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, crc);
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

std::vector<uint8_t> png_encode(const ImageU8& img) {
  YKD_CHECK(img.width > 0 && img.height > 0, "png_encode: empty image");
  size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    uint8_t* row = &raw[(stride + 1) * y];
    row[0] = 0;  // filter type 0
    std::memcpy(row + 1, &img.rgb[stride * y], stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  int rc = compress2(compressed.data(), &bound, raw.data(),
                     static_cast<uLong>(raw.size()), 6);
  YKD_CHECK(rc == Z_OK, "png_encode: zlib compress failed (", rc, ")");
  compressed.resize(bound);

  std::vector<uint8_t> out(kSig, kSig + 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(img.width));
  put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  return out;
}

ImageU8 png_decode(const std::vector<uint8_t>& bytes) {
  YKD_CHECK(bytes.size() > 8 && std::memcmp(bytes.data(), kSig, 8) == 0,
            "png_decode: not a PNG file");
  size_t pos = 8;
  int width = 0, height = 0;
  std::vector<uint8_t> idat;
  bool seen_ihdr = false;
  while (pos + 12 <= bytes.size()) {
    uint32_t len = get_u32(&bytes[pos]);
    YKD_CHECK(pos + 12 + len <= bytes.size(), "png_decode: truncated chunk");
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* payload = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      YKD_CHECK(len == 13, "png_decode: bad IHDR");
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      YKD_CHECK(payload[8] == 8 && payload[9] == 2,
                "png_decode: only 8-bit RGB supported");
      YKD_CHECK(payload[12] == 0, "png_decode: interlaced PNG not supported");
      seen_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  YKD_CHECK(seen_ihdr && !idat.empty(), "png_decode: missing IHDR/IDAT");
  YKD_CHECK(width > 0 && height > 0, "png_decode: bad dimensions");

  size_t stride = static_cast<size_t>(width) * 3;
  std::vector<uint8_t> raw((stride + 1) * height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  YKD_CHECK(rc == Z_OK && raw_len == raw.size(), "png_decode: zlib inflate failed");

  ImageU8 img(width, height);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const uint8_t* row = &raw[(stride + 1) * y];
    uint8_t filter = row[0];
    uint8_t* cur = &img.rgb[stride * y];
    std::memcpy(cur, row + 1, stride);
    switch (filter) {
      case 0:
        break;
      case 1:  // Sub
        for (size_t i = 3; i < stride; ++i) cur[i] = uint8_t(cur[i] + cur[i - 3]);
        break;
      case 2:  // Up
        for (size_t i = 0; i < stride; ++i) cur[i] = uint8_t(cur[i] + prev[i]);
        break;
      case 3:  // Average
        for (size_t i = 0; i < stride; ++i) {
          int a = i >= 3 ? cur[i - 3] : 0;
          cur[i] = uint8_t(cur[i] + ((a + prev[i]) >> 1));
        }
        break;
      case 4:  // Paeth
        for (size_t i = 0; i < stride; ++i) {
          int a = i >= 3 ? cur[i - 3] : 0;
          int c = i >= 3 ? prev[i - 3] : 0;
          cur[i] = uint8_t(cur[i] + paeth(a, prev[i], c));
        }
        break;
      default:
        fail("png_decode: unknown filter type ", int(filter));
    }
    std::memcpy(prev.data(), cur, stride);
  }
  return img;
}

void write_png(const std::string& path, const ImageU8& img) {
  auto bytes = png_encode(img);
  std::ofstream f(path, std::ios::binary);
  YKD_CHECK(f.good(), "write_png: cannot open ", path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  YKD_CHECK(f.good(), "write_png: write failed for ", path);
}

ImageU8 read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  YKD_CHECK(f.good(), "read_png: cannot open ", path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return png_decode(bytes);
}

}  // namespace ykd

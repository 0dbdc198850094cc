#include "ykd/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ykd/common.hpp"
#include "ykd/rng.hpp"

namespace ykd {

namespace {

enum Family { kCircle = 0, kSquare = 1, kTriangle = 2, kCross = 3 };

struct ShapeClass {
  Family family;
  bool hollow;
  const char* name;
  uint8_t base_rgb[3];
};

const ShapeClass kClasses[8] = {
    {kCircle, false, "circle_solid", {230, 80, 80}},
    {kSquare, false, "square_solid", {80, 200, 90}},
    {kTriangle, false, "triangle_solid", {90, 110, 235}},
    {kCross, false, "cross_solid", {235, 210, 70}},
    {kCircle, true, "circle_hollow", {220, 90, 220}},
    {kSquare, true, "square_hollow", {80, 220, 220}},
    {kTriangle, true, "triangle_hollow", {245, 150, 60}},
    {kCross, true, "cross_hollow", {160, 235, 130}},
};

bool inside_family(Family f, double dx, double dy, double r) {
  switch (f) {
    case kCircle:
      return dx * dx + dy * dy <= r * r;
    case kSquare:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case kTriangle: {
      // Upward triangle inscribed in radius r.
      double x0 = 0.0, y0 = -r;
      double x1 = -0.95 * r, y1 = 0.75 * r;
      double x2 = 0.95 * r, y2 = 0.75 * r;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
      };
      double s0 = side(x0, y0, x1, y1);
      double s1 = side(x1, y1, x2, y2);
      double s2 = side(x2, y2, x0, y0);
      bool neg = s0 < 0 || s1 < 0 || s2 < 0;
      bool pos = s0 > 0 || s1 > 0 || s2 > 0;
      return !(neg && pos);
    }
    case kCross:
      return (std::abs(dx) <= 0.32 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.32 * r && std::abs(dx) <= r);
  }
  return false;
}

bool inside_shape(const ShapeClass& sc, double dx, double dy, double r) {
  if (!inside_family(sc.family, dx, dy, r)) return false;
  if (sc.hollow && inside_family(sc.family, dx, dy, 0.55 * r)) return false;
  return true;
}

Mask rasterize(const ShapeClass& sc, double cx, double cy, double r, int size) {
  Mask m(size, size);
  int lo_x = std::max(0, static_cast<int>(cx - r - 2));
  int hi_x = std::min(size - 1, static_cast<int>(cx + r + 2));
  int lo_y = std::max(0, static_cast<int>(cy - r - 2));
  int hi_y = std::min(size - 1, static_cast<int>(cy + r + 2));
  for (int y = lo_y; y <= hi_y; ++y) {
    for (int x = lo_x; x <= hi_x; ++x) {
      if (inside_shape(sc, x + 0.5 - cx, y + 0.5 - cy, r)) m.set(x, y, 1);
    }
  }
  return m;
}

uint8_t clamp_u8(int v) { return static_cast<uint8_t>(std::min(255, std::max(0, v))); }

}  // namespace

const std::map<int, std::string>& shapes_catalog() {
  static const std::map<int, std::string> catalog = [] {
    std::map<int, std::string> c;
    for (int i = 0; i < 8; ++i) c[i + 1] = kClasses[i].name;
    return c;
  }();
  return catalog;
}

Dataset generate_shapes_dataset(int num_images, const std::vector<int>& classes,
                                int image_size, uint64_t seed) {
  YKD_CHECK(num_images >= 1, "generate_shapes_dataset: num_images must be >= 1");
  YKD_CHECK(image_size >= 32, "generate_shapes_dataset: image_size must be >= 32");
  YKD_CHECK(!classes.empty(), "generate_shapes_dataset: empty class set");
  std::set<int> wanted(classes.begin(), classes.end());
  for (int c : wanted) {
    YKD_CHECK(shapes_catalog().count(c), "generate_shapes_dataset: class ", c,
              " outside supported catalog 1..", shapes_catalog().size());
  }

  Rng rng(seed);
  Dataset ds;
  for (int c : wanted) ds.class_catalog[c] = shapes_catalog().at(c);

  std::map<int, int> usage;
  for (int c : wanted) usage[c] = 0;
  const double r_min = std::max(4.0, 0.10 * image_size);
  const double r_max = 0.22 * image_size;

  for (int idx = 0; idx < num_images; ++idx) {
    ImageSample sample;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06d", idx);
    sample.image_id = buf;

    // Dark noisy background.
    int bg[3] = {rng.uniform_int(15, 60), rng.uniform_int(15, 60), rng.uniform_int(15, 60)};
    std::vector<uint8_t> pix(static_cast<size_t>(3) * image_size * image_size);
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        size_t o = (static_cast<size_t>(y) * image_size + x) * 3;
        for (int ch = 0; ch < 3; ++ch) {
          pix[o + static_cast<size_t>(ch)] = clamp_u8(bg[ch] + rng.uniform_int(-6, 6));
        }
      }
    }

    Mask occupied(image_size, image_size);
    int want_count = rng.uniform_int(1, 4);
    for (int inst = 0; inst < want_count; ++inst) {
      // Least-used class keeps frequencies balanced; ties broken randomly.
      int min_use = usage.begin()->second;
      for (auto& [c, n] : usage) min_use = std::min(min_use, n);
      std::vector<int> candidates;
      for (auto& [c, n] : usage) {
        if (n == min_use) candidates.push_back(c);
      }
      int cls = candidates[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
      const ShapeClass& sc = kClasses[cls - 1];

      bool placed = false;
      for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
        double r = rng.uniform(r_min, r_max);
        double cx = rng.uniform(r + 1.5, image_size - r - 1.5);
        double cy = rng.uniform(r + 1.5, image_size - r - 1.5);
        Mask m = rasterize(sc, cx, cy, r, image_size);
        if (m.empty_mask()) continue;
        bool overlap = false;
        for (size_t i = 0; i < m.data.size() && !overlap; ++i) {
          if (m.data[i] && occupied.data[i]) overlap = true;
        }
        if (overlap) continue;

        int col[3];
        for (int ch = 0; ch < 3; ++ch) {
          col[ch] = clamp_u8(static_cast<int>(sc.base_rgb[ch]) + rng.uniform_int(-30, 30));
        }
        for (int y = 0; y < image_size; ++y) {
          for (int x = 0; x < image_size; ++x) {
            if (!m.at(x, y)) continue;
            occupied.set(x, y, 1);
            size_t o = (static_cast<size_t>(y) * image_size + x) * 3;
            for (int ch = 0; ch < 3; ++ch) {
              pix[o + static_cast<size_t>(ch)] = clamp_u8(col[ch] + rng.uniform_int(-5, 5));
            }
          }
        }
        InstanceAnnotation ann;
        ann.class_id = cls;
        ann.mask = std::move(m);
        ann.box = tight_box(ann.mask);
        sample.annotations.push_back(std::move(ann));
        usage[cls] += 1;
        placed = true;
      }
      if (!placed) break;  // image is crowded; keep what fits
    }
    // The first placement on an empty canvas always succeeds for the
    // supported radius range, so every image has at least one instance.
    YKD_CHECK(!sample.annotations.empty(), "generate_shapes_dataset: internal placement bug");

    sample.pixels = Tensor({3, image_size, image_size});
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          size_t o = (static_cast<size_t>(y) * image_size + x) * 3 + static_cast<size_t>(ch);
          sample.pixels[(static_cast<int64_t>(ch) * image_size + y) * image_size + x] =
              pix[o] / 255.0;
        }
      }
    }
    ds.samples.push_back(std::move(sample));
  }
  validate_dataset(ds);
  return ds;
}

}  // namespace ykd

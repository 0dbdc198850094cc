#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "map_oracle.hpp"
#include "ykd/eval.hpp"
#include "ykd/rng.hpp"

using namespace ykd;
using namespace ykd::testing;

namespace {

constexpr int kGrid = 24;

Mask rect_mask(int x0, int y0, int x1, int y1) {
  Mask m(kGrid, kGrid);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y, 1);
  return m;
}

// Mask with exactly `inter` pixels shared with `other`, plus `extra`
// private pixels laid out after it.
Mask overlap_mask(const Mask& other, int inter, int extra) {
  Mask m(kGrid, kGrid);
  int placed = 0;
  for (size_t i = 0; i < other.data.size() && placed < inter; ++i) {
    if (other.data[i]) {
      m.data[i] = 1;
      ++placed;
    }
  }
  REQUIRE(placed == inter);
  int added = 0;
  for (size_t i = 0; i < other.data.size() && added < extra; ++i) {
    if (!other.data[i] && !m.data[i]) {
      m.data[i] = 1;
      ++added;
    }
  }
  REQUIRE(added == extra);
  return m;
}

struct Fixture {
  std::vector<OracleDet> dets;
  std::vector<OracleGt> gts;
};

// Library-side inputs from the oracle fixture (single class 1).
std::pair<std::vector<Detection>, Dataset> to_library(const Fixture& f) {
  Dataset ds;
  ds.class_catalog[1] = "c1";
  std::map<std::string, ImageSample> samples;
  for (const auto& g : f.gts) {
    auto& s = samples[g.image_id];
    if (s.image_id.empty()) {
      s.image_id = g.image_id;
      s.pixels = Tensor({3, kGrid, kGrid});
    }
    InstanceAnnotation a;
    a.class_id = 1;
    a.mask = g.mask;
    a.box = g.box;
    s.annotations.push_back(a);
  }
  // Detections may live on images that hold no ground truth.
  for (const auto& d : f.dets) {
    auto& s = samples[d.image_id];
    if (s.image_id.empty()) {
      s.image_id = d.image_id;
      s.pixels = Tensor({3, kGrid, kGrid});
    }
  }
  for (auto& [id, s] : samples) ds.samples.push_back(s);

  std::vector<Detection> dets;
  for (const auto& d : f.dets) {
    Detection det;
    det.image_id = d.image_id;
    det.class_id = 1;
    det.score = d.score;
    det.box = d.box;
    det.mask = d.mask;
    dets.push_back(det);
  }
  return {dets, ds};
}

OracleGt gt_of(const std::string& img, const Mask& m) {
  return {img, m, tight_box(m)};
}

OracleDet det_of(const std::string& img, double score, const Mask& m) {
  return {img, score, m, tight_box(m)};
}

void check_against_oracle(const Fixture& f, double thresh) {
  auto [dets, ds] = to_library(f);
  double lib = match_and_ap(dets, ds, 1, thresh, IouKind::kMask);
  double oracle = oracle_ap(f.dets, f.gts, thresh, IouKind::kMask);
  CHECK(lib == doctest::Approx(oracle).epsilon(1e-12));
}

}  // namespace

TEST_CASE("hand fixtures reproduce the expected AP values") {
  // 1 GT, 1 perfect detection -> AP 1.
  Mask g = rect_mask(2, 2, 12, 12);
  Fixture f1{{det_of("a", 0.9, g)}, {gt_of("a", g)}};
  auto [d1, ds1] = to_library(f1);
  CHECK(match_and_ap(d1, ds1, 1, 0.5, IouKind::kMask) == doctest::Approx(1.0));
  check_against_oracle(f1, 0.5);

  // Higher-scored det IoU 0.8, lower IoU 0.9: greedy gives TP then FP,
  // recall saturates at the first hit -> AP 1.
  Mask g2 = rect_mask(0, 0, 10, 10);                 // 100 px
  Mask d_hi = overlap_mask(g2, 90, 12);              // IoU 90/112 ~ 0.80
  Mask d_lo = overlap_mask(g2, 95, 5);               // IoU 95/105 ~ 0.90
  Fixture f2{{det_of("b", 0.9, d_hi), det_of("b", 0.5, d_lo)}, {gt_of("b", g2)}};
  auto [d2, ds2] = to_library(f2);
  CHECK(match_and_ap(d2, ds2, 1, 0.5, IouKind::kMask) == doctest::Approx(1.0));
  check_against_oracle(f2, 0.5);

  // 2 GT, 1 TP -> AP 0.5.
  Fixture f3{{det_of("c", 0.8, g)}, {gt_of("c", g), gt_of("c", rect_mask(14, 14, 22, 22))}};
  auto [d3, ds3] = to_library(f3);
  CHECK(match_and_ap(d3, ds3, 1, 0.5, IouKind::kMask) == doctest::Approx(0.5));
  check_against_oracle(f3, 0.5);
}

TEST_CASE("IoU exactly 0.6 scores mAP 0.3 over the threshold sweep") {
  Mask g = rect_mask(0, 0, 10, 10);        // 100 px
  Mask d = overlap_mask(g, 75, 25);        // IoU 75/125 = 0.6 exactly
  CHECK(mask_iou(d, g) == doctest::Approx(0.6).epsilon(1e-12));

  Fixture f{{det_of("a", 0.9, d)}, {gt_of("a", g)}};
  auto [dets, ds] = to_library(f);
  auto spec = build_scenario(1, 1, 1);
  EvalReport r = evaluate(dets, ds, spec, IouKind::kMask);
  // TP at 0.50 / 0.55 / 0.60, FP at the remaining seven thresholds.
  CHECK(r.per_class_map.at(1) == doctest::Approx(0.3).epsilon(1e-12));
  for (int i = 0; i < 10; ++i) {
    CHECK(r.per_class_ap.at(1)[static_cast<size_t>(i)] ==
          doctest::Approx(i < 3 ? 1.0 : 0.0));
  }
}

TEST_CASE("evaluator matches the brute-force oracle on random fixtures") {
  Rng rng(99);
  int checked = 0;
  for (int trial = 0; trial < 12; ++trial) {
    Fixture f;
    int images = rng.uniform_int(1, 3);
    for (int i = 0; i < images; ++i) {
      std::string img = "img" + std::to_string(i);
      int gts = rng.uniform_int(1, 2);
      for (int j = 0; j < gts; ++j) {
        int x0 = rng.uniform_int(0, 10), y0 = rng.uniform_int(0, 10);
        f.gts.push_back(gt_of(img, rect_mask(x0, y0, x0 + rng.uniform_int(5, 10),
                                             y0 + rng.uniform_int(5, 10))));
      }
    }
    int dets = rng.uniform_int(1, 5);
    for (int j = 0; j < dets; ++j) {
      const OracleGt& target = f.gts[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(f.gts.size()) - 1))];
      int64_t area = target.mask.area();
      int inter = rng.uniform_int(static_cast<int>(area / 3), static_cast<int>(area));
      int extra = rng.uniform_int(0, 20);
      f.dets.push_back(det_of(target.image_id, rng.uniform(0.05, 1.0),
                              overlap_mask(target.mask, inter, extra)));
    }
    for (double thresh : {0.5, 0.6, 0.75}) {
      check_against_oracle(f, thresh);
      ++checked;
    }
  }
  CHECK(checked >= 30);
}

TEST_CASE("mAP is invariant under positive score rescaling") {
  Rng rng(7);
  Mask g1 = rect_mask(1, 1, 11, 11);
  Mask g2 = rect_mask(12, 12, 22, 22);
  Fixture f{{det_of("a", 0.31, overlap_mask(g1, 80, 10)),
             det_of("a", 0.77, overlap_mask(g1, 60, 30)),
             det_of("a", 0.11, overlap_mask(g2, 99, 1))},
            {gt_of("a", g1), gt_of("a", g2)}};
  auto [dets, ds] = to_library(f);
  auto spec = build_scenario(1, 1, 1);
  EvalReport before = evaluate(dets, ds, spec);
  for (auto& d : dets) d.score *= 7.31;
  EvalReport after = evaluate(dets, ds, spec);
  CHECK(before.per_class_map.at(1) == doctest::Approx(after.per_class_map.at(1)).epsilon(1e-12));
}

TEST_CASE("group means re-average per-class values; absent classes are skipped") {
  // Scenario 2-1-1: base {1,2}, intermediary {3}, new {4}.
  auto spec = build_scenario(4, 2, 1);
  Mask g = rect_mask(2, 2, 12, 12);
  Fixture f;
  f.gts = {gt_of("a", g), gt_of("b", g), gt_of("c", g)};
  f.dets = {det_of("a", 0.9, g), det_of("b", 0.8, overlap_mask(g, 50, 50))};
  auto [dets, ds] = to_library(f);
  // Rebuild with separate classes 1, 2, 3; class 4 has no ground truth.
  ds.class_catalog = {{1, "c1"}, {2, "c2"}, {3, "c3"}, {4, "c4"}};
  int next = 1;
  for (auto& s : ds.samples) {
    for (auto& a : s.annotations) a.class_id = next;
    ++next;
  }
  dets[0].class_id = 1;  // perfect hit on class 1
  dets[1].class_id = 2;  // IoU 0.5 hit on class 2
  EvalReport r = evaluate(dets, ds, spec);

  CHECK(r.skipped_classes == std::vector<int>{4});
  CHECK(std::isnan(r.novel));
  double manual_base = (r.per_class_map.at(1) + r.per_class_map.at(2)) / 2.0;
  CHECK(r.base == doctest::Approx(manual_base).epsilon(1e-12));
  CHECK(r.intermediary == doctest::Approx(r.per_class_map.at(3)));
  double manual_all =
      (r.per_class_map.at(1) + r.per_class_map.at(2) + r.per_class_map.at(3)) / 3.0;
  CHECK(r.all == doctest::Approx(manual_all).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(match_and_ap(dets, ds, 4, 0.5, IouKind::kMask),
                       doctest::Contains("no ground truth"), Error);
}

TEST_CASE("ratio_to_joint reproduces the published ratios") {
  EvalReport ours, joint;
  ours.all = 0.388;
  joint.all = 0.399;
  GroupRatios r1 = ratio_to_joint(ours, joint);
  CHECK(std::round(r1.all * 1000.0) / 1000.0 == doctest::Approx(0.972));

  ours.all = 0.365;
  GroupRatios r2 = ratio_to_joint(ours, joint);
  CHECK(std::round(r2.all * 1000.0) / 1000.0 == doctest::Approx(0.915));

  EvalReport same = ours;
  GroupRatios r3 = ratio_to_joint(same, same);
  CHECK(r3.all == doctest::Approx(1.0));

  joint.all = 0.0;
  CHECK(std::isnan(ratio_to_joint(ours, joint).all));  // n/a
}

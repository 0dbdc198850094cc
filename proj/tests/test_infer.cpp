#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "ykd/infer.hpp"
#include "ykd/model.hpp"
#include "ykd/rng.hpp"
#include "ykd/shapes.hpp"

using namespace ykd;
namespace fs = std::filesystem;

namespace {

// Two-branch state (steps 0 and 1) with untethered random weights; the
// structural invariants hold regardless of training.
ModelState two_branch_state() {
  ArchConfig arch;
  auto m = build_model(std::vector<int>{1, 2, 3}, arch, 17);
  m.backbone_frozen = true;
  clone_branch(m, 0, 1, {4});
  m.heads.push_back(expand_head(m.heads[0], {4}, arch, 17));
  // Make the branches diverge so routing differences are visible.
  for (auto& v : m.fes[1].params.get("conv2.w").data) v += 0.05f;
  m.fes[1].frozen = true;
  return m;
}

std::string det_key(const Detection& d) {
  return str_cat(d.image_id, "|", d.class_id, "|", d.score, "|", d.box.x0, "|", d.box.y0,
                 "|", d.box.x1, "|", d.box.y1, "|", d.source_branch);
}

}  // namespace

TEST_CASE("domain purity and merge equivalence") {
  ModelState m = two_branch_state();
  auto ds = generate_shapes_dataset(6, {1, 2, 3, 4}, 32, 3);
  InferenceEngine engine(m);
  REQUIRE(engine.num_branches() == 2);
  CHECK(engine.heads_loaded() == 1);

  for (const auto& s : ds.samples) {
    auto merged = engine.infer(s);
    // Eq. 7: every detection's class belongs to its source branch.
    for (const auto& d : merged) {
      const auto& classes = m.fes[static_cast<size_t>(d.source_branch)].classes;
      CHECK(std::find(classes.begin(), classes.end(), d.class_id) != classes.end());
    }
    // Merged output equals the union of independently computed,
    // domain-filtered single-branch outputs.
    std::multiset<std::string> merged_keys;
    for (const auto& d : merged) merged_keys.insert(det_key(d));
    std::multiset<std::string> union_keys;
    for (int b = 0; b < 2; ++b) {
      InferenceEngine solo(m);
      InferOptions opt;
      opt.branches = std::vector<int>{b};
      for (const auto& d : solo.infer(s, opt)) union_keys.insert(det_key(d));
    }
    CHECK(merged_keys == union_keys);
  }
}

TEST_CASE("backbone runs once per image regardless of branch count") {
  ModelState m = two_branch_state();
  clone_branch(m, 1, 2, {5});  // third branch; head untouched is fine here
  auto ds = generate_shapes_dataset(3, {1, 2}, 32, 9);
  InferenceEngine engine(m);
  REQUIRE(engine.num_branches() == 3);
  for (const auto& s : ds.samples) engine.infer(s);
  CHECK(engine.stats().backbone_passes == 3);   // one per image
  CHECK(engine.stats().head_passes == 9);       // |branches| per image

  // Cache hits return value-identical features.
  const Tensor& a = engine.backbone_shared_pass(ds.samples[0]);
  const Tensor& b = engine.backbone_shared_pass(ds.samples[0]);
  CHECK(&a == &b);
  CHECK(engine.stats().backbone_passes == 3);
  const Tensor& c = engine.backbone_shared_pass(ds.samples[1]);
  CHECK(a.data != c.data);
}

TEST_CASE("branch subset selection and errors") {
  ModelState m = two_branch_state();
  auto ds = generate_shapes_dataset(2, {1, 2, 3, 4}, 32, 5);
  InferenceEngine engine(m);

  InferOptions last_only;
  last_only.branches = std::vector<int>{1};
  auto dets = engine.infer(ds.samples[0], last_only);
  for (const auto& d : dets) CHECK(d.class_id == 4);  // restricted to C^1
  auto direct = engine.infer_with_branch(ds.samples[0], 1, true);
  REQUIRE(dets.size() == direct.size());
  for (size_t i = 0; i < dets.size(); ++i) CHECK(det_key(dets[i]) == det_key(direct[i]));

  InferOptions empty;
  empty.branches = std::vector<int>{};
  CHECK_THROWS_WITH_AS(engine.infer(ds.samples[0], empty),
                       doctest::Contains("empty branch set"), Error);
  InferOptions bad;
  bad.branches = std::vector<int>{7};
  CHECK_THROWS_WITH_AS(engine.infer(ds.samples[0], bad), doctest::Contains("out of range"),
                       Error);
}

TEST_CASE("single-branch state reduces to plain detection") {
  ArchConfig arch;
  auto m = build_model(std::vector<int>{1, 2, 3}, arch, 29);
  auto ds = generate_shapes_dataset(2, {1, 2, 3}, 32, 11);
  InferenceEngine engine(m);
  auto merged = engine.infer(ds.samples[0]);
  auto plain = engine.infer_with_branch(ds.samples[0], 0, false);
  REQUIRE(merged.size() == plain.size());
  for (size_t i = 0; i < merged.size(); ++i) CHECK(det_key(merged[i]) == det_key(plain[i]));
}

TEST_CASE("compose routes FE x head and validates indices") {
  ModelState m = two_branch_state();
  auto ds = generate_shapes_dataset(2, {1, 2, 3, 4}, 32, 13);

  // compose(0, 0) equals the historical step-0 model.
  ModelState historical = build_model(std::vector<int>{1, 2, 3}, ArchConfig{}, 17);
  ComposedModel c00 = compose(m, 0, 0);
  InferenceEngine hist_engine(historical);
  for (const auto& s : ds.samples) {
    auto a = c00.infer(s);
    auto b = hist_engine.infer_with_branch(s, 0, false);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].class_id == b[i].class_id);
      CHECK(a[i].score == doctest::Approx(b[i].score).epsilon(1e-12));
    }
  }

  // compose(0, 1) and compose(1, 1) differ (branches diverged).
  auto d01 = compose(m, 0, 1).infer(ds.samples[0]);
  auto d11 = compose(m, 1, 1).infer(ds.samples[0]);
  bool differ = d01.size() != d11.size();
  for (size_t i = 0; !differ && i < d01.size(); ++i) {
    differ = det_key(d01[i]) != det_key(d11[i]);
  }
  CHECK(differ);

  CHECK_THROWS_AS(compose(m, 5, 1), Error);
  CHECK_THROWS_AS(compose(m, 0, 7), Error);
}

TEST_CASE("inference is deterministic and detections round-trip via JSONL") {
  ModelState m = two_branch_state();
  auto ds = generate_shapes_dataset(3, {1, 2, 3, 4}, 32, 23);
  InferenceEngine e1(m), e2(m);
  std::vector<Detection> all;
  for (const auto& s : ds.samples) {
    auto a = e1.infer(s);
    auto b = e2.infer(s);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(det_key(a[i]) == det_key(b[i]));
      CHECK(a[i].mask.data == b[i].mask.data);
    }
    all.insert(all.end(), a.begin(), a.end());
  }
  REQUIRE(!all.empty());

  fs::path dir = fs::temp_directory_path() / "ykd_det_test";
  fs::create_directories(dir);
  std::string path = (dir / "dets.jsonl").string();
  save_detections_jsonl(path, all);
  auto back = load_detections_jsonl(path, ds);
  REQUIRE(back.size() == all.size());
  for (size_t i = 0; i < all.size(); ++i) {
    CHECK(back[i].class_id == all[i].class_id);
    CHECK(back[i].mask.data == all[i].mask.data);
    CHECK(back[i].source_branch == all[i].source_branch);
  }
  fs::remove_all(dir);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "ykd/dataset_io.hpp"
#include "ykd/png_io.hpp"
#include "ykd/rng.hpp"
#include "ykd/scenario.hpp"
#include "ykd/shapes.hpp"

using namespace ykd;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.class_catalog != b.class_catalog) return false;
  if (a.samples.size() != b.samples.size()) return false;
  for (size_t i = 0; i < a.samples.size(); ++i) {
    const auto& sa = a.samples[i];
    const auto& sb = b.samples[i];
    if (sa.image_id != sb.image_id) return false;
    if (sa.pixels.shape != sb.pixels.shape || sa.pixels.data != sb.pixels.data) return false;
    if (sa.annotations.size() != sb.annotations.size()) return false;
    for (size_t j = 0; j < sa.annotations.size(); ++j) {
      const auto& x = sa.annotations[j];
      const auto& y = sb.annotations[j];
      if (x.class_id != y.class_id || x.mask.data != y.mask.data) return false;
      if (x.box.x0 != y.box.x0 || x.box.y0 != y.box.y0 || x.box.x1 != y.box.x1 ||
          x.box.y1 != y.box.y1)
        return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("rle round-trips random masks and starts with background count") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Mask m(17, 11);
    for (auto& v : m.data) v = rng.uniform() < 0.35 ? 1 : 0;
    auto counts = rle_encode(m);
    // First run is background: if pixel 0 is foreground the count is 0.
    if (m.data[0]) CHECK(counts[0] == 0);
    Mask back = rle_decode(counts, 17, 11);
    CHECK(back.data == m.data);
    auto text = rle_to_string(counts);
    CHECK(rle_from_string(text) == counts);
  }
  CHECK_THROWS_AS(rle_decode({5, 5}, 4, 2), Error);   // counts short
  CHECK_THROWS_AS(rle_decode({5, 500}, 4, 2), Error); // counts overflow
}

TEST_CASE("png round-trips pixel-exact") {
  Rng rng(6);
  ImageU8 img(37, 23);
  for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  auto bytes = png_encode(img);
  ImageU8 back = png_decode(bytes);
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  CHECK(back.rgb == img.rgb);
}

TEST_CASE("generator is deterministic and honours its contracts") {
  auto a = generate_shapes_dataset(40, {1, 2, 3}, 64, 7);
  auto b = generate_shapes_dataset(40, {1, 2, 3}, 64, 7);
  CHECK(datasets_equal(a, b));
  auto c = generate_shapes_dataset(40, {1, 2, 3}, 64, 8);
  CHECK(!datasets_equal(a, c));

  for (const auto& s : a.samples) {
    CHECK(s.annotations.size() >= 1);
    CHECK(s.annotations.size() <= 4);
    for (const auto& ann : s.annotations) {
      Box t = tight_box(ann.mask);  // generator boxes are exactly tight
      CHECK(t.x0 == ann.box.x0);
      CHECK(t.y0 == ann.box.y0);
      CHECK(t.x1 == ann.box.x1);
      CHECK(t.y1 == ann.box.y1);
    }
  }
  CHECK_THROWS_AS(generate_shapes_dataset(5, {9}, 64, 1), Error);
  CHECK_THROWS_AS(generate_shapes_dataset(5, {1}, 16, 1), Error);
  CHECK_THROWS_AS(generate_shapes_dataset(0, {1}, 64, 1), Error);
}

TEST_CASE("per-class instance counts stay within 30% of the mean") {
  auto ds = generate_shapes_dataset(1000, {1, 2, 3, 4, 5, 6, 7, 8}, 64, 1);
  std::map<int, int> counts;
  int total = 0;
  for (const auto& s : ds.samples) {
    for (const auto& a : s.annotations) {
      counts[a.class_id] += 1;
      ++total;
    }
  }
  REQUIRE(counts.size() == 8);
  double mean = total / 8.0;
  for (const auto& [cls, n] : counts) {
    CAPTURE(cls);
    CHECK(n >= 0.7 * mean);
    CHECK(n <= 1.3 * mean);
  }
}

TEST_CASE("dataset save/load round-trip") {
  fs::path dir = fs::temp_directory_path() / "ykd_io_test";
  fs::remove_all(dir);
  auto ds = generate_shapes_dataset(12, {1, 2, 5}, 48, 21);
  std::string ann = (dir / "annotations.json").string();
  std::string img_root = (dir / "images").string();
  save_dataset(ds, ann, img_root);

  Dataset loaded = load_dataset(ann, img_root);
  CHECK(datasets_equal(ds, loaded));

  // save(load(f)) reproduces f byte-for-byte.
  fs::path dir2 = dir / "resaved";
  std::string ann2 = (dir2 / "annotations.json").string();
  save_dataset(loaded, ann2, (dir2 / "images").string());
  CHECK(read_file(ann) == read_file(ann2));
  for (const auto& s : ds.samples) {
    CHECK(read_file((fs::path(img_root) / (s.image_id + ".png")).string()) ==
          read_file((dir2 / "images" / (s.image_id + ".png")).string()));
  }

  // Generator determinism extends to serialized bytes.
  fs::path dir3 = dir / "regen";
  auto again = generate_shapes_dataset(12, {1, 2, 5}, 48, 21);
  save_dataset(again, (dir3 / "annotations.json").string(), (dir3 / "images").string());
  CHECK(read_file(ann) == read_file((dir3 / "annotations.json").string()));
  fs::remove_all(dir);
}

TEST_CASE("loader rejects malformed records with context") {
  fs::path dir = fs::temp_directory_path() / "ykd_io_bad";
  fs::remove_all(dir);
  auto ds = generate_shapes_dataset(3, {1}, 48, 3);
  std::string ann = (dir / "annotations.json").string();
  std::string img_root = (dir / "images").string();
  save_dataset(ds, ann, img_root);

  // Invalid box: x0 >= x1.
  {
    std::string text = read_file(ann);
    auto pos = text.find("\"box\": [");
    REQUIRE(pos != std::string::npos);
    auto end = text.find(']', pos);
    text.replace(pos, end - pos + 1, "\"box\": [30.0,1.0,2.0,9.0]");
    std::ofstream(ann, std::ios::binary) << text;
    CHECK_THROWS_WITH_AS(load_dataset(ann, img_root), doctest::Contains("img_000000"),
                         Error);
  }
  // Missing image file.
  save_dataset(ds, ann, img_root);
  fs::remove(fs::path(img_root) / "img_000001.png");
  CHECK_THROWS_WITH_AS(load_dataset(ann, img_root), doctest::Contains("img_000001"), Error);
  fs::remove_all(dir);
}

TEST_CASE("negative images (no annotations) are accepted") {
  fs::path dir = fs::temp_directory_path() / "ykd_io_neg";
  fs::remove_all(dir);
  Dataset ds;
  ds.class_catalog[1] = "circle_solid";
  ImageSample s;
  s.image_id = "empty_one";
  s.pixels = Tensor({3, 32, 32});
  ds.samples.push_back(s);
  save_dataset(ds, (dir / "a.json").string(), (dir / "img").string());
  auto back = load_dataset((dir / "a.json").string(), (dir / "img").string());
  REQUIRE(back.samples.size() == 1);
  CHECK(back.samples[0].annotations.empty());
  fs::remove_all(dir);
}

#include "ykd/dataset_io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "ykd/common.hpp"
#include "ykd/png_io.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace ykd {

ImageU8 tensor_to_u8(const Tensor& pixels) {
  YKD_CHECK(pixels.rank() == 3 && pixels.dim(0) == 3, "tensor_to_u8: need 3xHxW");
  int h = pixels.dim(1), w = pixels.dim(2);
  ImageU8 img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = pixels[(static_cast<int64_t>(c) * h + y) * w + x];
        int q = static_cast<int>(std::lround(v * 255.0));
        img.px(x, y)[c] = static_cast<uint8_t>(std::min(255, std::max(0, q)));
      }
    }
  }
  return img;
}

Tensor u8_to_tensor(const ImageU8& img) {
  Tensor t({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        t[(static_cast<int64_t>(c) * img.height + y) * img.width + x] = p[c] / 255.0;
      }
    }
  }
  return t;
}

void save_dataset(const Dataset& ds, const std::string& annotation_file,
                  const std::string& image_root) {
  fs::create_directories(image_root);
  fs::path ann_path(annotation_file);
  if (ann_path.has_parent_path()) fs::create_directories(ann_path.parent_path());

  ordered_json root;
  root["images"] = ordered_json::array();
  root["annotations"] = ordered_json::array();
  root["categories"] = ordered_json::array();

  for (const auto& s : ds.samples) {
    std::string file = s.image_id + ".png";
    write_png((fs::path(image_root) / file).string(), tensor_to_u8(s.pixels));
    root["images"].push_back({{"id", s.image_id},
                              {"file", file},
                              {"width", s.width()},
                              {"height", s.height()}});
    for (const auto& a : s.annotations) {
      root["annotations"].push_back(
          {{"image_id", s.image_id},
           {"class_id", a.class_id},
           {"box", {a.box.x0, a.box.y0, a.box.x1, a.box.y1}},
           {"mask_rle", rle_to_string(rle_encode(a.mask))}});
    }
  }
  for (const auto& [id, name] : ds.class_catalog) {
    root["categories"].push_back({{"id", id}, {"name", name}});
  }

  std::ofstream f(annotation_file, std::ios::binary);
  YKD_CHECK(f.good(), "save_dataset: cannot open ", annotation_file);
  f << root.dump(2) << "\n";
  YKD_CHECK(f.good(), "save_dataset: write failed for ", annotation_file);
}

Dataset load_dataset(const std::string& annotation_file, const std::string& image_root) {
  std::ifstream f(annotation_file);
  YKD_CHECK(f.good(), "load_dataset: cannot open ", annotation_file);
  ordered_json root;
  try {
    f >> root;
  } catch (const std::exception& e) {
    fail("load_dataset: ", annotation_file, ": invalid JSON: ", e.what());
  }
  YKD_CHECK(root.contains("images") && root.contains("annotations") &&
                root.contains("categories"),
            "load_dataset: ", annotation_file,
            ": missing images/annotations/categories tables");

  Dataset ds;
  for (const auto& c : root["categories"]) {
    YKD_CHECK(c.contains("id") && c.contains("name"), "load_dataset: ", annotation_file,
              ": category without id/name");
    ds.class_catalog[c["id"].get<int>()] = c["name"].get<std::string>();
  }

  std::map<std::string, size_t> index;
  for (const auto& im : root["images"]) {
    YKD_CHECK(im.contains("id") && im.contains("file") && im.contains("width") &&
                  im.contains("height"),
              "load_dataset: ", annotation_file, ": image record missing fields");
    ImageSample s;
    s.image_id = im["id"].get<std::string>();
    YKD_CHECK(!index.count(s.image_id), "load_dataset: duplicate image_id ", s.image_id);
    fs::path img_path = fs::path(image_root) / im["file"].get<std::string>();
    YKD_CHECK(fs::exists(img_path), "load_dataset: image ", s.image_id,
              ": missing file ", img_path.string());
    ImageU8 img = read_png(img_path.string());
    YKD_CHECK(img.width == im["width"].get<int>() && img.height == im["height"].get<int>(),
              "load_dataset: image ", s.image_id, ": PNG size ", img.width, "x", img.height,
              " does not match record ", im["width"].get<int>(), "x",
              im["height"].get<int>());
    s.pixels = u8_to_tensor(img);
    index[s.image_id] = ds.samples.size();
    ds.samples.push_back(std::move(s));
  }

  for (const auto& a : root["annotations"]) {
    YKD_CHECK(a.contains("image_id") && a.contains("class_id") && a.contains("box") &&
                  a.contains("mask_rle"),
              "load_dataset: ", annotation_file, ": annotation record missing fields");
    std::string image_id = a["image_id"].get<std::string>();
    auto it = index.find(image_id);
    YKD_CHECK(it != index.end(), "load_dataset: annotation references unknown image_id ",
              image_id);
    ImageSample& s = ds.samples[it->second];
    InstanceAnnotation ann;
    ann.class_id = a["class_id"].get<int>();
    const auto& bx = a["box"];
    YKD_CHECK(bx.is_array() && bx.size() == 4, "load_dataset: image ", image_id,
              ": box must be [x0,y0,x1,y1]");
    ann.box = Box{bx[0].get<double>(), bx[1].get<double>(), bx[2].get<double>(),
                  bx[3].get<double>()};
    try {
      ann.mask = rle_decode(rle_from_string(a["mask_rle"].get<std::string>()),
                            s.width(), s.height());
      validate_annotation(ann, s.width(), s.height(), "image " + image_id);
    } catch (const Error& e) {
      fail("load_dataset: ", annotation_file, ": ", e.what());
    }
    YKD_CHECK(ds.class_catalog.count(ann.class_id), "load_dataset: image ", image_id,
              ": class ", ann.class_id, " not in categories");
    s.annotations.push_back(std::move(ann));
  }
  return ds;
}

}  // namespace ykd

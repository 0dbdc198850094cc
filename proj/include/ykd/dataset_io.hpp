#pragma once

#include <string>

#include "ykd/png_io.hpp"
#include "ykd/scenario.hpp"

namespace ykd {

// Annotation file layout: one JSON document with "images", "annotations"
// and "categories" tables; masks as row-major RLE starting with the
// background count; pixels as PNG files under image_root, referenced by
// relative path. save/load round-trip losslessly.
void save_dataset(const Dataset& ds, const std::string& annotation_file,
                  const std::string& image_root);
Dataset load_dataset(const std::string& annotation_file, const std::string& image_root);

// Tensor (3xHxW in [0,1]) <-> interleaved 8-bit conversion helpers.
ImageU8 tensor_to_u8(const Tensor& pixels);
Tensor u8_to_tensor(const ImageU8& img);

}  // namespace ykd

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ykd/scenario.hpp"

namespace ykd {

// Supported shape classes: family (circle, square, triangle, cross)
// crossed with fill style (solid, hollow), ids 1..8.
const std::map<int, std::string>& shapes_catalog();

// Deterministic toy dataset: each image holds 1-4 pixel-disjoint shape
// instances with exact masks and tight boxes. Class assignment is
// balanced (least-used class first), so per-class instance counts stay
// within one of each other.
Dataset generate_shapes_dataset(int num_images, const std::vector<int>& classes,
                                int image_size, uint64_t seed);

}  // namespace ykd

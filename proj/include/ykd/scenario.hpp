#pragma once

#include <map>
#include <string>
#include <vector>

#include "ykd/geometry.hpp"
#include "ykd/rle.hpp"
#include "ykd/tensor.hpp"

namespace ykd {

// Class partition of an N-k incremental scenario. Class ids are 1-based;
// 0 is reserved for background. steps[0] holds the N base classes and
// every later step holds k classes.
struct ScenarioSpec {
  int total_classes = 0;
  int base_count = 0;
  int increment_count = 0;
  std::vector<std::vector<int>> steps;

  int num_steps() const { return static_cast<int>(steps.size()); }
  int last_step() const { return num_steps() - 1; }

  // Classes introduced at steps 0..t inclusive, ascending.
  std::vector<int> classes_up_to(int t) const;
  const std::vector<int>& classes_of(int t) const;

  std::vector<int> base_classes() const { return steps.at(0); }
  std::vector<int> intermediary_classes() const;  // steps 1..T-1
  std::vector<int> new_classes() const { return steps.at(steps.size() - 1); }

  void validate() const;
};

ScenarioSpec build_scenario(int total_classes, int base_count, int increment_count);

// Parses "N-k", e.g. "15-5".
ScenarioSpec parse_scenario(const std::string& text, int total_classes);

struct InstanceAnnotation {
  int class_id = 0;
  Box box;
  Mask mask;
};

struct ImageSample {
  std::string image_id;
  Tensor pixels;  // 3 x H x W, values in [0, 1]
  std::vector<InstanceAnnotation> annotations;

  int width() const { return pixels.dim(2); }
  int height() const { return pixels.dim(1); }
};

struct Dataset {
  std::vector<ImageSample> samples;
  std::map<int, std::string> class_catalog;
};

// Checks a single annotation against the image extent: valid box inside
// bounds, non-empty mask, and box tight around the mask within 1 px per
// side. Throws with `context` in the message on violation.
void validate_annotation(const InstanceAnnotation& ann, int width, int height,
                         const std::string& context);
void validate_dataset(const Dataset& ds);

// Keeps the images that contain at least one instance of a step-t class
// and drops every annotation outside C^t (the background shift: old and
// future objects become unlabelled).
Dataset filter_step(const Dataset& dataset, const ScenarioSpec& spec, int t);

// Restricts to images that contain at least one annotation from `classes`,
// keeping only those annotations. Shared machinery behind filter_step.
Dataset filter_to_classes(const Dataset& dataset, const std::vector<int>& classes);

}  // namespace ykd

#include "ykd/scenario.hpp"

#include <algorithm>
#include <set>

#include "ykd/common.hpp"

namespace ykd {

std::vector<int> ScenarioSpec::classes_up_to(int t) const {
  YKD_CHECK(t >= 0 && t < num_steps(), "classes_up_to: step ", t, " out of range");
  std::vector<int> out;
  for (int i = 0; i <= t; ++i) {
    out.insert(out.end(), steps[static_cast<size_t>(i)].begin(),
               steps[static_cast<size_t>(i)].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

const std::vector<int>& ScenarioSpec::classes_of(int t) const {
  YKD_CHECK(t >= 0 && t < num_steps(), "classes_of: step ", t, " out of range");
  return steps[static_cast<size_t>(t)];
}

std::vector<int> ScenarioSpec::intermediary_classes() const {
  std::vector<int> out;
  for (int i = 1; i + 1 < num_steps(); ++i) {
    out.insert(out.end(), steps[static_cast<size_t>(i)].begin(),
               steps[static_cast<size_t>(i)].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void ScenarioSpec::validate() const {
  YKD_CHECK(!steps.empty(), "scenario: no steps");
  YKD_CHECK(static_cast<int>(steps[0].size()) == base_count,
            "scenario: |C^0| = ", steps[0].size(), " != N = ", base_count);
  std::set<int> seen;
  for (size_t t = 0; t < steps.size(); ++t) {
    if (t >= 1) {
      YKD_CHECK(static_cast<int>(steps[t].size()) == increment_count,
                "scenario: |C^", t, "| != k = ", increment_count);
    }
    for (int c : steps[t]) {
      YKD_CHECK(c >= 1 && c <= total_classes, "scenario: class id ", c, " out of range");
      YKD_CHECK(seen.insert(c).second, "scenario: class ", c, " appears in two steps");
    }
  }
  YKD_CHECK(static_cast<int>(seen.size()) == total_classes,
            "scenario: steps cover ", seen.size(), " of ", total_classes, " classes");
}

ScenarioSpec build_scenario(int total_classes, int base_count, int increment_count) {
  YKD_CHECK(total_classes >= 1, "build_scenario: total_classes must be positive");
  YKD_CHECK(base_count >= 1, "build_scenario: N must be >= 1");
  YKD_CHECK(increment_count >= 1, "build_scenario: k must be >= 1");
  YKD_CHECK(base_count <= total_classes, "build_scenario: N = ", base_count,
            " exceeds total classes ", total_classes);
  int rest = total_classes - base_count;
  YKD_CHECK(rest % increment_count == 0, "build_scenario: remaining classes (", rest,
            ") not divisible by k = ", increment_count, " with N = ", base_count,
            ", total = ", total_classes);
  ScenarioSpec spec;
  spec.total_classes = total_classes;
  spec.base_count = base_count;
  spec.increment_count = increment_count;
  std::vector<int> base;
  for (int c = 1; c <= base_count; ++c) base.push_back(c);
  spec.steps.push_back(std::move(base));
  for (int c = base_count + 1; c <= total_classes; c += increment_count) {
    std::vector<int> step;
    for (int j = 0; j < increment_count; ++j) step.push_back(c + j);
    spec.steps.push_back(std::move(step));
  }
  spec.validate();
  return spec;
}

ScenarioSpec parse_scenario(const std::string& text, int total_classes) {
  auto dash = text.find('-');
  YKD_CHECK(dash != std::string::npos, "parse_scenario: expected \"N-k\", got \"", text, "\"");
  int n = 0, k = 0;
  try {
    n = std::stoi(text.substr(0, dash));
    k = std::stoi(text.substr(dash + 1));
  } catch (const std::exception&) {
    fail("parse_scenario: expected \"N-k\", got \"", text, "\"");
  }
  return build_scenario(total_classes, n, k);
}

void validate_annotation(const InstanceAnnotation& ann, int width, int height,
                         const std::string& context) {
  YKD_CHECK(ann.class_id >= 1, context, ": class_id ", ann.class_id, " must be >= 1");
  YKD_CHECK(ann.box.x0 < ann.box.x1 && ann.box.y0 < ann.box.y1, context,
            ": degenerate box [", ann.box.x0, ",", ann.box.y0, ",", ann.box.x1, ",",
            ann.box.y1, "]");
  YKD_CHECK(ann.box.x0 >= 0 && ann.box.y0 >= 0 && ann.box.x1 <= width &&
                ann.box.y1 <= height,
            context, ": box outside image bounds ", width, "x", height);
  YKD_CHECK(ann.mask.width == width && ann.mask.height == height, context,
            ": mask size ", ann.mask.width, "x", ann.mask.height,
            " != image size ", width, "x", height);
  YKD_CHECK(!ann.mask.empty_mask(), context, ": empty mask");
  Box tight = tight_box(ann.mask);
  YKD_CHECK(std::abs(tight.x0 - ann.box.x0) <= 1.0 && std::abs(tight.y0 - ann.box.y0) <= 1.0 &&
                std::abs(tight.x1 - ann.box.x1) <= 1.0 && std::abs(tight.y1 - ann.box.y1) <= 1.0,
            context, ": box is not tight around mask (tight [", tight.x0, ",", tight.y0,
            ",", tight.x1, ",", tight.y1, "])");
}

void validate_dataset(const Dataset& ds) {
  std::set<std::string> ids;
  for (const auto& s : ds.samples) {
    YKD_CHECK(!s.image_id.empty(), "dataset: image with empty id");
    YKD_CHECK(ids.insert(s.image_id).second, "dataset: duplicate image_id ", s.image_id);
    YKD_CHECK(s.pixels.rank() == 3 && s.pixels.dim(0) == 3, "dataset: image ", s.image_id,
              " pixels must be 3xHxW");
    for (const auto& a : s.annotations) {
      validate_annotation(a, s.width(), s.height(), "image " + s.image_id);
      YKD_CHECK(ds.class_catalog.count(a.class_id), "dataset: image ", s.image_id,
                " uses class ", a.class_id, " missing from catalog");
    }
  }
}

Dataset filter_to_classes(const Dataset& dataset, const std::vector<int>& classes) {
  std::set<int> keep(classes.begin(), classes.end());
  Dataset out;
  out.class_catalog = dataset.class_catalog;
  for (const auto& s : dataset.samples) {
    bool has_current = false;
    for (const auto& a : s.annotations) {
      if (keep.count(a.class_id)) {
        has_current = true;
        break;
      }
    }
    if (!has_current) continue;
    ImageSample kept;
    kept.image_id = s.image_id;
    kept.pixels = s.pixels;
    for (const auto& a : s.annotations) {
      if (keep.count(a.class_id)) kept.annotations.push_back(a);
    }
    out.samples.push_back(std::move(kept));
  }
  return out;
}

Dataset filter_step(const Dataset& dataset, const ScenarioSpec& spec, int t) {
  YKD_CHECK(t >= 0 && t < spec.num_steps(), "filter_step: step ", t,
            " out of range [0, ", spec.last_step(), "]");
  return filter_to_classes(dataset, spec.classes_of(t));
}

}  // namespace ykd

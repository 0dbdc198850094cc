#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ykd/infer.hpp"
#include "ykd/scenario.hpp"

namespace ykd {

enum class IouKind { kMask, kBox };

// AP for one class at one IoU threshold: detections sorted by descending
// score, greedy one-to-one matching per image (highest IoU first), area
// under the precision-recall curve with the precision envelope
// (all-point interpolation). Throws when the split holds no ground truth
// of the class.
double match_and_ap(const std::vector<Detection>& detections, const Dataset& ground_truth,
                    int class_id, double iou_thresh, IouKind kind);

struct EvalReport {
  std::vector<double> iou_thresholds;
  // class -> AP at each threshold, and the mean across thresholds.
  std::map<int, std::vector<double>> per_class_ap;
  std::map<int, double> per_class_map;
  std::vector<int> skipped_classes;  // no ground truth in the split

  // Group means over member classes (NaN when the group is empty).
  double base = std::numeric_limits<double>::quiet_NaN();
  double intermediary = std::numeric_limits<double>::quiet_NaN();
  double novel = std::numeric_limits<double>::quiet_NaN();
  double all = std::numeric_limits<double>::quiet_NaN();
};

// mAP@{0.50:0.05:0.95} per class, grouped per the scenario split.
EvalReport evaluate(const std::vector<Detection>& detections, const Dataset& ground_truth,
                    const ScenarioSpec& spec, IouKind kind = IouKind::kMask);

struct GroupRatios {
  double base = std::numeric_limits<double>::quiet_NaN();
  double intermediary = std::numeric_limits<double>::quiet_NaN();
  double novel = std::numeric_limits<double>::quiet_NaN();
  double all = std::numeric_limits<double>::quiet_NaN();
};

// Element-wise CL/joint ratios; NaN marks n/a (joint value 0 or missing).
GroupRatios ratio_to_joint(const EvalReport& report, const EvalReport& joint_report);

void write_eval_csv(const std::string& path, const EvalReport& r);
std::string format_eval_table(const EvalReport& r);

}  // namespace ykd

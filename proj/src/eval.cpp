#include "ykd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "ykd/common.hpp"

namespace ykd {

namespace {

struct GtInstance {
  const InstanceAnnotation* ann;
  bool matched = false;
};

}  // namespace

double match_and_ap(const std::vector<Detection>& detections, const Dataset& ground_truth,
                    int class_id, double iou_thresh, IouKind kind) {
  // Collect ground truth of the class per image.
  std::map<std::string, std::vector<GtInstance>> gt;
  int total_gt = 0;
  for (const auto& s : ground_truth.samples) {
    for (const auto& a : s.annotations) {
      if (a.class_id == class_id) {
        gt[s.image_id].push_back({&a, false});
        ++total_gt;
      }
    }
  }
  YKD_CHECK(total_gt > 0, "match_and_ap: no ground truth for class ", class_id,
            " in the split");

  // Detections of the class, globally sorted by descending score with a
  // deterministic tiebreak.
  std::vector<const Detection*> dets;
  for (const auto& d : detections) {
    if (d.class_id == class_id) dets.push_back(&d);
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->image_id < b->image_id;
  });

  // Greedy matching in score order: each detection takes the unmatched
  // ground truth with the highest IoU above the threshold.
  std::vector<char> is_tp(dets.size(), 0);
  for (size_t i = 0; i < dets.size(); ++i) {
    auto it = gt.find(dets[i]->image_id);
    if (it == gt.end()) continue;
    double best = iou_thresh;
    int best_j = -1;
    for (size_t j = 0; j < it->second.size(); ++j) {
      if (it->second[j].matched) continue;
      double iou = kind == IouKind::kMask
                       ? mask_iou(dets[i]->mask, it->second[j].ann->mask)
                       : box_iou(dets[i]->box, it->second[j].ann->box);
      if (iou >= best) {
        // Strictly-better keeps the first (deterministic) on exact ties.
        if (best_j < 0 || iou > best) {
          best = iou;
          best_j = static_cast<int>(j);
        }
      }
    }
    if (best_j >= 0) {
      it->second[static_cast<size_t>(best_j)].matched = true;
      is_tp[i] = 1;
    }
  }

  // Precision envelope over the PR curve (all-point interpolation).
  std::vector<double> precision, recall;
  int tp = 0;
  for (size_t i = 0; i < dets.size(); ++i) {
    tp += is_tp[i];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    double env = 0.0;
    for (size_t j = i; j < precision.size(); ++j) env = std::max(env, precision[j]);
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * env;
      prev_recall = recall[i];
    }
  }
  return ap;
}

namespace {

double group_mean(const std::map<int, double>& per_class, const std::vector<int>& members) {
  double sum = 0.0;
  int n = 0;
  for (int c : members) {
    auto it = per_class.find(c);
    if (it != per_class.end()) {
      sum += it->second;
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

}  // namespace

EvalReport evaluate(const std::vector<Detection>& detections, const Dataset& ground_truth,
                    const ScenarioSpec& spec, IouKind kind) {
  EvalReport r;
  for (int i = 0; i < 10; ++i) r.iou_thresholds.push_back(0.50 + 0.05 * i);

  std::set<int> classes_with_gt;
  for (const auto& s : ground_truth.samples) {
    for (const auto& a : s.annotations) classes_with_gt.insert(a.class_id);
  }

  for (int t = 0; t < spec.num_steps(); ++t) {
    for (int cls : spec.classes_of(t)) {
      if (!classes_with_gt.count(cls)) {
        r.skipped_classes.push_back(cls);
        std::cerr << "[ykd] notice: class " << cls
                  << " has no ground truth in the split; excluded from means\n";
        continue;
      }
      std::vector<double> aps;
      for (double thr : r.iou_thresholds) {
        aps.push_back(match_and_ap(detections, ground_truth, cls, thr, kind));
      }
      double mean = std::accumulate(aps.begin(), aps.end(), 0.0) / aps.size();
      r.per_class_ap[cls] = std::move(aps);
      r.per_class_map[cls] = mean;
    }
  }
  std::vector<int> all_classes = spec.classes_up_to(spec.last_step());
  r.base = group_mean(r.per_class_map, spec.base_classes());
  r.intermediary = group_mean(r.per_class_map, spec.intermediary_classes());
  r.novel = group_mean(r.per_class_map, spec.new_classes());
  r.all = group_mean(r.per_class_map, all_classes);
  return r;
}

GroupRatios ratio_to_joint(const EvalReport& report, const EvalReport& joint_report) {
  auto ratio = [](double a, double b) {
    if (std::isnan(a) || std::isnan(b) || b == 0.0) {
      return std::numeric_limits<double>::quiet_NaN();
    }
    return a / b;
  };
  GroupRatios g;
  g.base = ratio(report.base, joint_report.base);
  g.intermediary = ratio(report.intermediary, joint_report.intermediary);
  g.novel = ratio(report.novel, joint_report.novel);
  g.all = ratio(report.all, joint_report.all);
  return g;
}

namespace {

std::string cell(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

void write_eval_csv(const std::string& path, const EvalReport& r) {
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_eval_csv: cannot open ", path);
  f << "class_id";
  for (double thr : r.iou_thresholds) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), ",ap_%03d", static_cast<int>(std::lround(thr * 100)));
    f << buf;
  }
  f << ",ap_mean\n";
  for (const auto& [cls, aps] : r.per_class_ap) {
    f << cls;
    for (double ap : aps) f << ',' << cell(ap);
    f << ',' << cell(r.per_class_map.at(cls)) << "\n";
  }
  auto group_row = [&](const char* name, double v) {
    f << name;
    for (size_t i = 0; i < r.iou_thresholds.size(); ++i) f << ',';
    f << ',' << cell(v) << "\n";
  };
  group_row("base", r.base);
  group_row("intermediary", r.intermediary);
  group_row("new", r.novel);
  group_row("all", r.all);
  YKD_CHECK(f.good(), "write_eval_csv: write failed for ", path);
}

std::string format_eval_table(const EvalReport& r) {
  std::ostringstream os;
  os << "class      mAP@{0.5:0.95}\n";
  for (const auto& [cls, v] : r.per_class_map) {
    os << "  " << cls << "        " << cell(v) << "\n";
  }
  os << "base:         " << cell(r.base) << "\n";
  os << "intermediary: " << cell(r.intermediary) << "\n";
  os << "new:          " << cell(r.novel) << "\n";
  os << "all:          " << cell(r.all) << "\n";
  if (!r.skipped_classes.empty()) {
    os << "skipped (no ground truth):";
    for (int c : r.skipped_classes) os << ' ' << c;
    os << "\n";
  }
  return os.str();
}

}  // namespace ykd

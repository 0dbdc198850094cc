#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ykd/model.hpp"
#include "ykd/scenario.hpp"

namespace ykd {

struct Detection {
  std::string image_id;
  int class_id = 0;
  double score = 0.0;
  Box box;
  Mask mask;  // image resolution, binary
  int source_branch = 0;
};

struct InferOptions {
  // Branch subset; nullopt means every branch. An explicitly empty set is
  // rejected.
  std::optional<std::vector<int>> branches;
  double score_thresh = 0.05;
  double nms_thresh = 0.5;
  double mask_binarize = 0.5;
};

struct InferStats {
  int64_t backbone_passes = 0;
  int64_t head_passes = 0;
};

// Multi-branch inference with the single latest (or chosen) head: the
// backbone runs once per image, each selected FE feeds the shared head,
// each branch keeps only detections of its own classes and the union is
// returned (no cross-branch suppression; domains are disjoint).
class InferenceEngine {
 public:
  // Copies exactly one head out of `state` (the latest, or `head_step`).
  explicit InferenceEngine(const ModelState& state, int head_step = -1);

  std::vector<Detection> infer(const ImageSample& image, const InferOptions& opt = {});

  // Fig. 2b recombination: one FE, the loaded head, no domain filter.
  std::vector<Detection> infer_with_branch(const ImageSample& image, int fe_index,
                                           bool filter_to_branch_domain,
                                           const InferOptions& opt = {});

  // Cached B(X): the counter proves single execution per image.
  const Tensor& backbone_shared_pass(const ImageSample& image);

  const InferStats& stats() const { return stats_; }
  int heads_loaded() const { return 1; }
  int num_branches() const { return static_cast<int>(fes_.size()); }
  const HeadEntry& head() const { return head_; }

  void clear_cache();

 private:
  ArchConfig arch_;
  ParamSet backbone_;
  std::vector<FeBranch> fes_;
  HeadEntry head_;
  InferStats stats_;
  std::map<std::string, Tensor> trunk_cache_;
};

// Eq.-7 composition handle: routes B -> F^{fe_index} -> H^{head_index}
// over the head's full domain.
struct ComposedModel {
  std::shared_ptr<InferenceEngine> engine;
  int fe_index = 0;

  std::vector<Detection> infer(const ImageSample& image,
                               const InferOptions& opt = {}) const {
    return engine->infer_with_branch(image, fe_index, false, opt);
  }
};

ComposedModel compose(const ModelState& state, int fe_index, int head_index);

// Detections interchange: JSON lines with image_id / class_id / score /
// box / mask_rle / branch. Mask sizes come from the ground-truth dataset
// at load time.
void save_detections_jsonl(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections_jsonl(const std::string& path, const Dataset& ref);

// Deterministic output order: (class_id, -score, image_id).
void sort_detections(std::vector<Detection>& dets);

}  // namespace ykd

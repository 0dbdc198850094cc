#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ykd/autodiff.hpp"
#include "ykd/geometry.hpp"
#include "ykd/params.hpp"

namespace ykd {

// Network shape and proposal bookkeeping. The trunk is fixed-topology:
// four backbone conv blocks (three 2x pools, stride 8 overall), two FE
// conv blocks, an anchor-based proposal generator, a class-wise box head
// and a mask head.
struct ArchConfig {
  int backbone_c1 = 12;
  int backbone_c2 = 24;
  int backbone_c3 = 48;
  int backbone_c4 = 48;
  int fe_channels = 48;
  int head_in_channels = 48;
  int rpn_channels = 48;

  std::vector<double> anchor_sizes = {12.0, 24.0, 40.0};
  std::vector<double> anchor_aspects = {1.0, 0.5};  // height / width

  double rpn_nms_thresh = 0.7;
  int rpn_pre_nms_train = 128;
  int rpn_pre_nms_eval = 64;
  int rpn_post_nms_train = 64;  // train-time top-K
  int rpn_post_nms_eval = 32;   // eval-time top-K
  double proposal_min_size = 2.0;

  int roi_size = 7;
  int mask_roi_size = 14;
  int mask_size = 28;  // must equal 2 * mask_roi_size
  int box_fc_dim = 128;
  int mask_conv_channels = 24;
  int mask_deconv_channels = 12;

  // target assignment
  int rpn_batch = 32;
  double rpn_pos_frac = 0.5;
  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;
  int roi_batch = 16;
  double roi_pos_frac = 0.5;
  double roi_fg_iou = 0.5;

  double new_row_init_std = 0.01;

  int feature_stride() const { return 8; }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_aspects.size());
  }
  void validate() const;
};

struct FeBranch {
  ParamSet params;
  int step = 0;
  bool frozen = false;
  std::vector<int> classes;  // domain of expertise (Eq.-7 filter)
};

struct HeadEntry {
  ParamSet params;
  std::vector<int> class_domain;  // column order of the classifier, ascending
  int step = 0;
};

struct ModelState {
  ArchConfig arch;
  ParamSet backbone;
  bool backbone_frozen = false;
  std::vector<FeBranch> fes;
  std::vector<HeadEntry> heads;

  int latest_head_index() const;
  const HeadEntry& head_by_step(int step) const;
  HeadEntry& head_by_step(int step);
  bool has_head_step(int step) const;
  int64_t trainable_params() const;
};

ModelState build_model(const std::vector<int>& base_classes, const ArchConfig& arch,
                       uint64_t seed);
ModelState build_model(int num_base_classes, const ArchConfig& arch, uint64_t seed);

// Embeds one ParamSet's arrays into a tape, widening float32 -> double.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(ad::Tape& tape, const ParamSet& ps, bool trainable);
  ad::Value at(const std::string& name) const;
  bool trainable() const { return trainable_; }
  // Adds this pass's gradients into sink under "<prefix><local name>".
  void harvest_grads(ad::Tape& tape, const std::string& prefix,
                     std::map<std::string, Tensor>& sink) const;

 private:
  std::map<std::string, ad::Value> vals_;
  bool trainable_ = false;
};

ad::Value backbone_forward(ad::Tape& tape, const BoundParams& p, const Tensor& image,
                           const ArchConfig& arch);
ad::Value fe_forward(const BoundParams& p, ad::Value x, const ArchConfig& arch);

struct RpnOutputs {
  ad::Value objectness;  // [A_tot, 1] logits, anchor order (a, y, x)
  ad::Value deltas;      // [A_tot, 4]
  std::vector<Box> anchors;
};

RpnOutputs rpn_forward(const BoundParams& head, ad::Value feats, const ArchConfig& arch);

std::vector<Box> select_proposals(const RpnOutputs& rpn, const ArchConfig& arch,
                                  bool train, int image_w, int image_h);

struct RoiOutputs {
  ad::Value cls_logits;   // [P, C+1], column 0 = background
  ad::Value reg_deltas;   // [P, 4C]
  ad::Value mask_logits;  // [P, C, S, S] (invalid Value if masks skipped)
};

RoiOutputs roi_forward(const BoundParams& head, ad::Value feats,
                       const std::vector<Box>& proposals, const ArchConfig& arch,
                       int num_classes, bool run_mask);

// Mask branch alone, for detection-time masks on final boxes.
ad::Value mask_forward(const BoundParams& head, ad::Value feats,
                       const std::vector<Box>& boxes, const ArchConfig& arch);

// Full head pass (Eq. 4): s and omega always come from the head's own
// proposal generator; box/mask branches run on `proposals` when given.
struct HeadOutputs {
  RpnOutputs rpn;
  std::vector<Box> proposals;
  RoiOutputs roi;
  std::vector<int> class_domain;
};

HeadOutputs forward_head_on_tape(const BoundParams& head, ad::Value feats,
                                 const ArchConfig& arch,
                                 const std::vector<int>& class_domain, bool train,
                                 int image_w, int image_h,
                                 const std::vector<Box>* proposals, bool run_mask);

// Spec-level convenience ops (fresh tape, eval mode).
Tensor forward_features(const ModelState& state, int branch, const Tensor& image);
HeadEntry expand_head(const HeadEntry& prev, const std::vector<int>& new_classes,
                      const ArchConfig& arch, uint64_t seed);
// Appends a bit-exact copy of fes[source]; the source branch freezes, the
// new branch becomes the trainable one for `new_step`.
void clone_branch(ModelState& state, int source, int new_step,
                  const std::vector<int>& new_classes);

void save_checkpoint(const ModelState& state, const std::string& dir);

struct LoadOptions {
  // Steps of the heads to materialize; empty means every head in the
  // checkpoint. Inference loads exactly one.
  std::vector<int> head_steps;
};

ModelState load_checkpoint(const std::string& dir);
ModelState load_checkpoint(const std::string& dir, const LoadOptions& opts);

}  // namespace ykd

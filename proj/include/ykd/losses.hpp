#pragma once

#include "ykd/autodiff.hpp"
#include "ykd/model.hpp"

namespace ykd {

// Weights of the three distillation terms (box head, RPN, mask head).
struct KDWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;

  void validate() const {
    YKD_CHECK(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0,
              "kd weights must be non-negative");
  }
};

// Plain distillation cross-entropy over matched output rows:
//   -(1/(R*C)) * sum_i sum_c teacher[i,c] * log student[i,c]
// Both arguments are probability rows over the same class set (teacher
// rows are validated; probabilities are clamped at 1e-12 before log).
ad::Value kd_loss(ad::Value teacher_probs, ad::Value student_probs);
ad::Value kd_loss(const Tensor& teacher_probs, ad::Value student_probs);

// Background-shift-aware box-head distillation. Classification follows
// the unbiased form: the teacher's background mass is matched against
// the student's background plus all new-class mass, old foreground
// classes are matched directly. Regression adds a gated L2 between
// class-wise deltas, restricted to rows where the teacher's best old
// foreground probability exceeds tau_reg, at that argmax class.
//
// Logit layout: column 0 is background; teacher has C_old+1 columns,
// student C_old+num_new+1 with the new classes appended at the end.
// Regression rows are [R, 4*C_old] / [R, 4*(C_old+num_new)].
ad::Value unbiased_kd_box(ad::Value teacher_logits, ad::Value student_logits,
                          ad::Value teacher_reg, ad::Value student_reg,
                          int num_new_classes, double tau_reg);

// RPN distillation on the shared anchor grid: mean squared difference of
// objectness logits over all anchors, plus mean squared difference of
// box deltas over anchors whose teacher objectness sigmoid exceeds
// tau_obj (zero when no anchor passes the gate).
ad::Value rpn_kd_loss(ad::Value teacher_obj, ad::Value student_obj,
                      ad::Value teacher_deltas, ad::Value student_deltas,
                      double tau_obj);

// Mask distillation: kd_loss applied pixel-wise (R = N*H*W) on per-pixel
// softmax over old-class mask logits. Both stacks are [N, C_old, S, S].
ad::Value mask_kd_loss(ad::Value teacher_mask_logits, ad::Value student_mask_logits);

// Ground truth for one image, already filtered to the current step.
struct SupervisedTargets {
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::vector<Mask> masks;  // image resolution
  int image_w = 0;
  int image_h = 0;
};

struct SupervisedLossParts {
  ad::Value total;
  ad::Value rpn_objectness;
  ad::Value rpn_box;
  ad::Value cls;
  ad::Value box;
  ad::Value mask;
};

// Standard multi-task detection-and-segmentation loss. Matching and
// anchor subsampling are deterministic functions of the geometry, so the
// loss is a pure function of (outputs, targets). Proposal subsampling
// happens upstream in the training loop; every row of outputs.proposals
// participates here.
SupervisedLossParts supervised_loss(const HeadOutputs& outputs,
                                    const SupervisedTargets& targets,
                                    const ArchConfig& arch);

// Eq.-6 combination; scalar form mirrored by the tape composition used
// in training.
double total_loss(double sup, double kd_box, double kd_rpn, double kd_mask,
                  const KDWeights& w);
ad::Value total_loss(ad::Value sup, ad::Value kd_box, ad::Value kd_rpn,
                     ad::Value kd_mask, const KDWeights& w);

}  // namespace ykd

#include "ykd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace ykd {

namespace {

constexpr double kProbTol = 1e-5;

void check_probability_rows(const Tensor& t, const char* who) {
  YKD_CHECK(t.rank() == 2, who, ": need 2-D probability rows");
  for (int r = 0; r < t.dim(0); ++r) {
    double s = 0.0;
    for (int c = 0; c < t.dim(1); ++c) {
      YKD_CHECK(t.at(r, c) >= -1e-9, who, ": negative probability in row ", r);
      s += t.at(r, c);
    }
    YKD_CHECK(std::abs(s - 1.0) <= kProbTol, who, ": row ", r,
              " sums to ", s, ", not a probability vector");
  }
}

ad::Value zero_scalar(ad::Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

}  // namespace

ad::Value kd_loss(ad::Value teacher_probs, ad::Value student_probs) {
  const Tensor& tv = teacher_probs.val();
  const Tensor& sv = student_probs.val();
  YKD_CHECK(tv.shape == sv.shape, "kd_loss: teacher ", tv.dim(0), "x", tv.dim(1),
            " vs student shape mismatch");
  check_probability_rows(tv, "kd_loss(teacher)");
  check_probability_rows(sv, "kd_loss(student)");
  int R = tv.dim(0), C = tv.dim(1);
  ad::Value ce = ad::sum(ad::mul(teacher_probs, ad::log_clamped(student_probs)));
  return ad::scale(ce, -1.0 / (static_cast<double>(R) * C));
}

ad::Value kd_loss(const Tensor& teacher_probs, ad::Value student_probs) {
  return kd_loss(student_probs.tape->constant(teacher_probs), student_probs);
}

ad::Value unbiased_kd_box(ad::Value teacher_logits, ad::Value student_logits,
                          ad::Value teacher_reg, ad::Value student_reg,
                          int num_new_classes, double tau_reg) {
  ad::Tape& tape = *student_logits.tape;
  const Tensor& tl = teacher_logits.val();
  const Tensor& sl = student_logits.val();
  YKD_CHECK(tl.rank() == 2 && sl.rank() == 2, "unbiased_kd_box: need 2-D logits");
  int R = tl.dim(0);
  int ct = tl.dim(1);             // old classes + bg
  int cs = sl.dim(1);             // all classes + bg
  int c_old = ct - 1;             // old foreground classes
  YKD_CHECK(num_new_classes >= 0, "unbiased_kd_box: negative new-class count");
  YKD_CHECK(cs == ct + num_new_classes, "unbiased_kd_box: student classes (", cs,
            ") != teacher classes (", ct, ") + new (", num_new_classes, ")");
  if (R == 0) {
    std::cerr << "[ykd] warning: unbiased_kd_box on an empty proposal batch, "
                 "contributing 0\n";
    return zero_scalar(tape);
  }
  YKD_CHECK(sl.dim(0) == R && teacher_reg.val().dim(0) == R &&
                student_reg.val().dim(0) == R,
            "unbiased_kd_box: row count mismatch (proposals must be matched)");
  YKD_CHECK(teacher_reg.val().dim(1) == 4 * c_old, "unbiased_kd_box: teacher reg width");
  YKD_CHECK(student_reg.val().dim(1) == 4 * (c_old + num_new_classes),
            "unbiased_kd_box: student reg width");

  ad::Value t_probs = ad::softmax_rows(teacher_logits);
  ad::Value s_probs = ad::softmax_rows(student_logits);

  // Group matrix: column 0 gathers student bg + every new class, columns
  // 1..c_old pick up the old foreground classes unchanged.
  Tensor group({cs, ct});
  group.at(0, 0) = 1.0;
  for (int c = 0; c < c_old; ++c) group.at(1 + c, 1 + c) = 1.0;
  for (int n = 0; n < num_new_classes; ++n) group.at(ct + n, 0) = 1.0;
  ad::Value s_grouped = ad::matmul_const(s_probs, group);

  ad::Value ce = ad::sum(ad::mul(t_probs, ad::log_clamped(s_grouped)));
  ad::Value cls_term = ad::scale(ce, -1.0 / (static_cast<double>(R) * ct));

  // Gated regression: rows where the teacher is confident about an old
  // foreground class, compared at that class's delta slot.
  const Tensor& tp = t_probs.val();
  Tensor weights({R, 4 * (c_old + num_new_classes)});
  Tensor target({R, 4 * (c_old + num_new_classes)});
  const Tensor& treg = teacher_reg.val();
  int gated = 0;
  for (int r = 0; r < R; ++r) {
    int best = -1;
    double best_p = tau_reg;
    for (int c = 0; c < c_old; ++c) {
      if (tp.at(r, 1 + c) > best_p) {
        best_p = tp.at(r, 1 + c);
        best = c;
      }
    }
    if (best < 0) continue;
    ++gated;
    for (int d = 0; d < 4; ++d) {
      weights.at(r, 4 * best + d) = 1.0;
      target.at(r, 4 * best + d) = treg.at(r, 4 * best + d);
    }
  }
  if (gated == 0) return cls_term;
  ad::Value reg_term = ad::weighted_mse_const(student_reg, target, weights,
                                              4.0 * static_cast<double>(gated));
  return ad::add(cls_term, reg_term);
}

ad::Value rpn_kd_loss(ad::Value teacher_obj, ad::Value student_obj,
                      ad::Value teacher_deltas, ad::Value student_deltas,
                      double tau_obj) {
  const Tensor& to = teacher_obj.val();
  const Tensor& so = student_obj.val();
  YKD_CHECK(to.shape == so.shape, "rpn_kd_loss: anchor-count mismatch on objectness");
  YKD_CHECK(teacher_deltas.val().shape == student_deltas.val().shape,
            "rpn_kd_loss: anchor-count mismatch on deltas");
  int64_t a = to.numel();
  YKD_CHECK(teacher_deltas.val().numel() == 4 * a, "rpn_kd_loss: deltas are not 4 per anchor");

  ad::Value d_obj = ad::sub(student_obj, teacher_obj);
  ad::Value obj_term =
      ad::scale(ad::sum(ad::mul(d_obj, d_obj)), 1.0 / static_cast<double>(a));

  Tensor gate({static_cast<int>(a), 4});
  int64_t passed = 0;
  for (int64_t i = 0; i < a; ++i) {
    double sig = 1.0 / (1.0 + std::exp(-to[i]));
    if (sig > tau_obj) {
      ++passed;
      for (int d = 0; d < 4; ++d) gate[i * 4 + d] = 1.0;
    }
  }
  if (passed == 0) return obj_term;
  ad::Value d_dlt = ad::sub(student_deltas, teacher_deltas);
  ad::Value dlt_term = ad::scale(ad::dot_const(ad::mul(d_dlt, d_dlt), gate),
                                 1.0 / (4.0 * static_cast<double>(passed)));
  return ad::add(obj_term, dlt_term);
}

ad::Value mask_kd_loss(ad::Value teacher_mask_logits, ad::Value student_mask_logits) {
  const Tensor& tm = teacher_mask_logits.val();
  const Tensor& sm = student_mask_logits.val();
  YKD_CHECK(tm.rank() == 4 && sm.rank() == 4, "mask_kd_loss: need N x C x S x S logits");
  YKD_CHECK(tm.shape == sm.shape, "mask_kd_loss: spatial/class shape mismatch (",
            tm.dim(2), "x", tm.dim(3), " vs ", sm.dim(2), "x", sm.dim(3), ")");
  ad::Value t_rows = ad::softmax_rows(ad::pixels_as_rows(teacher_mask_logits));
  ad::Value s_rows = ad::softmax_rows(ad::pixels_as_rows(student_mask_logits));
  return kd_loss(t_rows, s_rows);
}

// ---------------------------------------------------------------------------
// supervised loss
// ---------------------------------------------------------------------------

namespace {

struct AnchorAssignment {
  // 1 positive, 0 negative, -1 ignored
  std::vector<int> labels;
  std::vector<int> matched_gt;
};

AnchorAssignment assign_anchors(const std::vector<Box>& anchors,
                                const std::vector<Box>& gt, const ArchConfig& arch) {
  AnchorAssignment out;
  out.labels.assign(anchors.size(), 0);
  out.matched_gt.assign(anchors.size(), -1);
  if (gt.empty()) return out;  // everything stays negative
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<double> gt_best(gt.size(), 0.0);
  for (size_t i = 0; i < anchors.size(); ++i) {
    for (size_t j = 0; j < gt.size(); ++j) {
      double iou = box_iou(anchors[i], gt[j]);
      if (iou > best_iou[i]) {
        best_iou[i] = iou;
        out.matched_gt[i] = static_cast<int>(j);
      }
      gt_best[j] = std::max(gt_best[j], iou);
    }
  }
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (best_iou[i] >= arch.rpn_pos_iou) {
      out.labels[i] = 1;
    } else if (best_iou[i] >= arch.rpn_neg_iou) {
      out.labels[i] = -1;
    }
  }
  // Ensure every target owns its best anchor.
  for (size_t j = 0; j < gt.size(); ++j) {
    if (gt_best[j] <= 0.0) continue;
    for (size_t i = 0; i < anchors.size(); ++i) {
      if (out.matched_gt[i] == static_cast<int>(j) &&
          best_iou[i] >= gt_best[j] - 1e-12) {
        out.labels[i] = 1;
      }
    }
  }
  return out;
}

}  // namespace

SupervisedLossParts supervised_loss(const HeadOutputs& outputs,
                                    const SupervisedTargets& targets,
                                    const ArchConfig& arch) {
  ad::Tape& tape = *outputs.rpn.objectness.tape;
  const std::vector<int>& domain = outputs.class_domain;
  int C = static_cast<int>(domain.size());
  YKD_CHECK(targets.boxes.size() == targets.class_ids.size() &&
                targets.boxes.size() == targets.masks.size(),
            "supervised_loss: target tables disagree");
  // Column of each target class inside this head's domain (1-based; 0 = bg).
  std::vector<int> gt_cols;
  for (int cid : targets.class_ids) {
    auto it = std::find(domain.begin(), domain.end(), cid);
    YKD_CHECK(it != domain.end(), "supervised_loss: target class ", cid,
              " outside head domain");
    gt_cols.push_back(static_cast<int>(it - domain.begin()) + 1);
  }

  SupervisedLossParts parts;
  BoxTransform xf;

  // --- RPN objectness + box ---
  const auto& anchors = outputs.rpn.anchors;
  AnchorAssignment assign = assign_anchors(anchors, targets.boxes, arch);
  int want_pos = static_cast<int>(arch.rpn_batch * arch.rpn_pos_frac);
  std::vector<int> pos_idx, neg_idx;
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (assign.labels[i] == 1) pos_idx.push_back(static_cast<int>(i));
    if (assign.labels[i] == 0) neg_idx.push_back(static_cast<int>(i));
  }
  if (static_cast<int>(pos_idx.size()) > want_pos) pos_idx.resize(static_cast<size_t>(want_pos));
  int want_neg = arch.rpn_batch - static_cast<int>(pos_idx.size());
  std::vector<int> neg_sel;
  if (!neg_idx.empty() && want_neg > 0) {
    // Deterministic spread over the negative pool.
    size_t stride = std::max<size_t>(1, neg_idx.size() / static_cast<size_t>(want_neg));
    for (size_t i = 0; i < neg_idx.size() && static_cast<int>(neg_sel.size()) < want_neg;
         i += stride) {
      neg_sel.push_back(neg_idx[i]);
    }
  }
  int sampled = static_cast<int>(pos_idx.size() + neg_sel.size());
  YKD_CHECK(sampled > 0, "supervised_loss: no anchors sampled");
  {
    int64_t n_anchors = static_cast<int64_t>(anchors.size());
    Tensor obj_target({static_cast<int>(n_anchors), 1});
    Tensor obj_weight({static_cast<int>(n_anchors), 1});
    for (int i : pos_idx) {
      obj_target[i] = 1.0;
      obj_weight[i] = 1.0;
    }
    for (int i : neg_sel) obj_weight[i] = 1.0;
    parts.rpn_objectness = ad::weighted_bce_logits_const(
        outputs.rpn.objectness, obj_target, obj_weight, static_cast<double>(sampled));

    Tensor dlt_target({static_cast<int>(n_anchors), 4});
    Tensor dlt_weight({static_cast<int>(n_anchors), 4});
    for (int i : pos_idx) {
      auto enc = xf.encode(anchors[static_cast<size_t>(i)],
                           targets.boxes[static_cast<size_t>(assign.matched_gt[static_cast<size_t>(i)])]);
      for (int d = 0; d < 4; ++d) {
        dlt_target.at(i, d) = enc[static_cast<size_t>(d)];
        dlt_weight.at(i, d) = 1.0;
      }
    }
    if (pos_idx.empty()) {
      parts.rpn_box = tape.constant(Tensor::scalar(0.0));
    } else {
      parts.rpn_box = ad::weighted_smooth_l1_const(
          outputs.rpn.deltas, dlt_target, dlt_weight, 1.0,
          4.0 * static_cast<double>(pos_idx.size()));
    }
  }

  // --- RoI heads ---
  const auto& proposals = outputs.proposals;
  if (proposals.empty()) {
    parts.cls = tape.constant(Tensor::scalar(0.0));
    parts.box = tape.constant(Tensor::scalar(0.0));
    parts.mask = tape.constant(Tensor::scalar(0.0));
  } else {
    int P = static_cast<int>(proposals.size());
    std::vector<int> labels(static_cast<size_t>(P), 0);
    std::vector<int> matched(static_cast<size_t>(P), -1);
    for (int p = 0; p < P; ++p) {
      double best = 0.0;
      for (size_t j = 0; j < targets.boxes.size(); ++j) {
        double iou = box_iou(proposals[static_cast<size_t>(p)], targets.boxes[j]);
        if (iou > best) {
          best = iou;
          matched[static_cast<size_t>(p)] = static_cast<int>(j);
        }
      }
      if (matched[static_cast<size_t>(p)] >= 0 && best >= arch.roi_fg_iou) {
        labels[static_cast<size_t>(p)] =
            gt_cols[static_cast<size_t>(matched[static_cast<size_t>(p)])];
      }
    }
    Tensor row_w({P});
    for (auto& v : row_w.data) v = 1.0;
    parts.cls = ad::cross_entropy_rows(outputs.roi.cls_logits, labels, row_w,
                                       static_cast<double>(P));

    std::vector<int> fg_rows;
    for (int p = 0; p < P; ++p) {
      if (labels[static_cast<size_t>(p)] > 0) fg_rows.push_back(p);
    }
    if (fg_rows.empty()) {
      parts.box = tape.constant(Tensor::scalar(0.0));
      parts.mask = tape.constant(Tensor::scalar(0.0));
    } else {
      Tensor reg_target({P, 4 * C});
      Tensor reg_weight({P, 4 * C});
      for (int p : fg_rows) {
        int col = labels[static_cast<size_t>(p)] - 1;  // foreground slot
        const Box& gt_box = targets.boxes[static_cast<size_t>(matched[static_cast<size_t>(p)])];
        auto enc = xf.encode(proposals[static_cast<size_t>(p)], gt_box);
        for (int d = 0; d < 4; ++d) {
          reg_target.at(p, 4 * col + d) = enc[static_cast<size_t>(d)];
          reg_weight.at(p, 4 * col + d) = 1.0;
        }
      }
      parts.box = ad::weighted_smooth_l1_const(outputs.roi.reg_deltas, reg_target,
                                               reg_weight, 1.0,
                                               4.0 * static_cast<double>(fg_rows.size()));

      YKD_CHECK(outputs.roi.mask_logits.valid(),
                "supervised_loss: mask logits missing for foreground proposals");
      int S = arch.mask_size;
      Tensor m_target({P, C, S, S});
      Tensor m_weight({P, C, S, S});
      for (int p : fg_rows) {
        int col = labels[static_cast<size_t>(p)] - 1;
        int g = matched[static_cast<size_t>(p)];
        Tensor grid = crop_mask_to_grid(targets.masks[static_cast<size_t>(g)],
                                        proposals[static_cast<size_t>(p)], S);
        for (int yy = 0; yy < S; ++yy) {
          for (int xx = 0; xx < S; ++xx) {
            int64_t off = ((static_cast<int64_t>(p) * C + col) * S + yy) * S + xx;
            m_target[off] = grid.at(yy, xx);
            m_weight[off] = 1.0;
          }
        }
      }
      parts.mask = ad::weighted_bce_logits_const(
          outputs.roi.mask_logits, m_target, m_weight,
          static_cast<double>(fg_rows.size()) * S * S);
    }
  }

  parts.total = ad::add(ad::add(parts.rpn_objectness, parts.rpn_box),
                        ad::add(ad::add(parts.cls, parts.box), parts.mask));
  return parts;
}

double total_loss(double sup, double kd_box, double kd_rpn, double kd_mask,
                  const KDWeights& w) {
  w.validate();
  return sup + w.lambda1 * kd_box + w.lambda2 * kd_rpn + w.lambda3 * kd_mask;
}

ad::Value total_loss(ad::Value sup, ad::Value kd_box, ad::Value kd_rpn,
                     ad::Value kd_mask, const KDWeights& w) {
  w.validate();
  ad::Value out = sup;
  out = ad::add(out, ad::scale(kd_box, w.lambda1));
  out = ad::add(out, ad::scale(kd_rpn, w.lambda2));
  out = ad::add(out, ad::scale(kd_mask, w.lambda3));
  return out;
}

}  // namespace ykd

#include "ykd/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "ykd/common.hpp"
#include "ykd/rng.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace ykd {

void ArchConfig::validate() const {
  YKD_CHECK(backbone_c1 > 0 && backbone_c2 > 0 && backbone_c3 > 0 && backbone_c4 > 0,
            "arch: backbone channels must be positive");
  YKD_CHECK(fe_channels > 0 && rpn_channels > 0, "arch: channel counts must be positive");
  YKD_CHECK(fe_channels == head_in_channels, "arch: FE output channels (", fe_channels,
            ") != head input channels (", head_in_channels, ")");
  YKD_CHECK(!anchor_sizes.empty() && !anchor_aspects.empty(), "arch: empty anchor set");
  YKD_CHECK(mask_size == 2 * mask_roi_size, "arch: mask_size (", mask_size,
            ") must be 2 * mask_roi_size (", mask_roi_size, ")");
  YKD_CHECK(roi_size > 0 && box_fc_dim > 0, "arch: roi head sizes must be positive");
  YKD_CHECK(rpn_post_nms_train > 0 && rpn_post_nms_eval > 0, "arch: top-K must be positive");
  YKD_CHECK(rpn_batch > 0 && roi_batch > 0, "arch: sampling batch sizes must be positive");
}

int ModelState::latest_head_index() const {
  YKD_CHECK(!heads.empty(), "model: no heads");
  int best = 0;
  for (size_t i = 1; i < heads.size(); ++i) {
    if (heads[i].step > heads[static_cast<size_t>(best)].step) best = static_cast<int>(i);
  }
  return best;
}

bool ModelState::has_head_step(int step) const {
  for (const auto& h : heads) {
    if (h.step == step) return true;
  }
  return false;
}

const HeadEntry& ModelState::head_by_step(int step) const {
  for (const auto& h : heads) {
    if (h.step == step) return h;
  }
  fail("model: no head for step ", step);
}

HeadEntry& ModelState::head_by_step(int step) {
  for (auto& h : heads) {
    if (h.step == step) return h;
  }
  fail("model: no head for step ", step);
}

int64_t ModelState::trainable_params() const {
  int64_t n = backbone_frozen ? 0 : backbone.total_params();
  for (const auto& fe : fes) {
    if (!fe.frozen) n += fe.params.total_params();
  }
  n += heads[static_cast<size_t>(latest_head_index())].params.total_params();
  return n;
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace {

void init_array(ParamArray& a, Rng rng) {
  if (a.shape.size() <= 1) return;  // biases stay zero
  int64_t fan_in = 1;
  for (size_t i = 1; i < a.shape.size(); ++i) fan_in *= a.shape[i];
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : a.data) v = static_cast<float>(rng.normal(0.0, stddev));
}

void init_set(ParamSet& ps, const std::string& prefix, uint64_t seed) {
  Rng base(seed);
  for (auto& a : ps.arrays()) {
    init_array(a, base.fork(Rng::hash_name(prefix + "/" + a.name)));
  }
}

ParamSet make_backbone_params(const ArchConfig& arch) {
  ParamSet ps;
  ps.add("conv1.w", {arch.backbone_c1, 3, 3, 3});
  ps.add("conv1.b", {arch.backbone_c1});
  ps.add("conv2.w", {arch.backbone_c2, arch.backbone_c1, 3, 3});
  ps.add("conv2.b", {arch.backbone_c2});
  ps.add("conv3.w", {arch.backbone_c3, arch.backbone_c2, 3, 3});
  ps.add("conv3.b", {arch.backbone_c3});
  ps.add("conv4.w", {arch.backbone_c4, arch.backbone_c3, 3, 3});
  ps.add("conv4.b", {arch.backbone_c4});
  return ps;
}

ParamSet make_fe_params(const ArchConfig& arch) {
  ParamSet ps;
  ps.add("conv1.w", {arch.fe_channels, arch.backbone_c4, 3, 3});
  ps.add("conv1.b", {arch.fe_channels});
  ps.add("conv2.w", {arch.fe_channels, arch.fe_channels, 3, 3});
  ps.add("conv2.b", {arch.fe_channels});
  return ps;
}

ParamSet make_head_params(const ArchConfig& arch, int num_classes) {
  int A = arch.anchors_per_cell();
  int f = arch.head_in_channels;
  ParamSet ps;
  ps.add("rpn.conv.w", {arch.rpn_channels, f, 3, 3});
  ps.add("rpn.conv.b", {arch.rpn_channels});
  ps.add("rpn.obj.w", {A, arch.rpn_channels, 1, 1});
  ps.add("rpn.obj.b", {A});
  ps.add("rpn.delta.w", {4 * A, arch.rpn_channels, 1, 1});
  ps.add("rpn.delta.b", {4 * A});
  ps.add("box.fc.w", {arch.box_fc_dim, f * arch.roi_size * arch.roi_size});
  ps.add("box.fc.b", {arch.box_fc_dim});
  ps.add("box.cls.w", {num_classes + 1, arch.box_fc_dim});
  ps.add("box.cls.b", {num_classes + 1});
  ps.add("box.reg.w", {4 * num_classes, arch.box_fc_dim});
  ps.add("box.reg.b", {4 * num_classes});
  ps.add("mask.conv.w", {arch.mask_conv_channels, f, 3, 3});
  ps.add("mask.conv.b", {arch.mask_conv_channels});
  ps.add("mask.deconv.w", {arch.mask_conv_channels, arch.mask_deconv_channels, 2, 2});
  ps.add("mask.deconv.b", {arch.mask_deconv_channels});
  ps.add("mask.out.w", {num_classes, arch.mask_deconv_channels, 1, 1});
  ps.add("mask.out.b", {num_classes});
  return ps;
}

}  // namespace

ModelState build_model(const std::vector<int>& base_classes, const ArchConfig& arch,
                       uint64_t seed) {
  arch.validate();
  YKD_CHECK(!base_classes.empty(), "build_model: empty base class set");
  std::vector<int> domain = base_classes;
  std::sort(domain.begin(), domain.end());
  YKD_CHECK(std::adjacent_find(domain.begin(), domain.end()) == domain.end(),
            "build_model: duplicate class ids");

  ModelState state;
  state.arch = arch;
  state.backbone = make_backbone_params(arch);
  init_set(state.backbone, "backbone", seed);

  FeBranch fe;
  fe.params = make_fe_params(arch);
  fe.step = 0;
  fe.frozen = false;
  fe.classes = domain;
  init_set(fe.params, "fe_0", seed);
  state.fes.push_back(std::move(fe));

  HeadEntry head;
  head.params = make_head_params(arch, static_cast<int>(domain.size()));
  head.class_domain = domain;
  head.step = 0;
  init_set(head.params, "head_0", seed);
  state.heads.push_back(std::move(head));
  return state;
}

ModelState build_model(int num_base_classes, const ArchConfig& arch, uint64_t seed) {
  YKD_CHECK(num_base_classes >= 1, "build_model: need at least one class");
  std::vector<int> cls(static_cast<size_t>(num_base_classes));
  std::iota(cls.begin(), cls.end(), 1);
  return build_model(cls, arch, seed);
}

// ---------------------------------------------------------------------------
// forward wiring
// ---------------------------------------------------------------------------

BoundParams::BoundParams(ad::Tape& tape, const ParamSet& ps, bool trainable)
    : trainable_(trainable) {
  for (const auto& a : ps.arrays()) {
    vals_[a.name] = tape.leaf(a.to_tensor(), trainable);
  }
}

ad::Value BoundParams::at(const std::string& name) const {
  auto it = vals_.find(name);
  YKD_CHECK(it != vals_.end(), "BoundParams: unknown array ", name);
  return it->second;
}

void BoundParams::harvest_grads(ad::Tape& tape, const std::string& prefix,
                                std::map<std::string, Tensor>& sink) const {
  if (!trainable_) return;
  for (const auto& [name, val] : vals_) {
    const Tensor& g = tape.grad(val.id);
    auto [it, inserted] = sink.try_emplace(prefix + name, g);
    if (!inserted) {
      Tensor& acc = it->second;
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
    }
  }
}

ad::Value backbone_forward(ad::Tape& tape, const BoundParams& p, const Tensor& image,
                           const ArchConfig& arch) {
  (void)arch;
  YKD_CHECK(image.rank() == 3 && image.dim(0) == 3, "backbone_forward: need 3xHxW image");
  YKD_CHECK(image.dim(1) % 8 == 0 && image.dim(2) % 8 == 0,
            "backbone_forward: image size must be a multiple of 8, got ", image.dim(1),
            "x", image.dim(2));
  ad::Value x = tape.constant(image);
  x = ad::relu(ad::conv2d(x, p.at("conv1.w"), p.at("conv1.b"), 1, 1));
  x = ad::maxpool2(x);
  x = ad::relu(ad::conv2d(x, p.at("conv2.w"), p.at("conv2.b"), 1, 1));
  x = ad::maxpool2(x);
  x = ad::relu(ad::conv2d(x, p.at("conv3.w"), p.at("conv3.b"), 1, 1));
  x = ad::maxpool2(x);
  x = ad::relu(ad::conv2d(x, p.at("conv4.w"), p.at("conv4.b"), 1, 1));
  return x;
}

ad::Value fe_forward(const BoundParams& p, ad::Value x, const ArchConfig& arch) {
  (void)arch;
  x = ad::relu(ad::conv2d(x, p.at("conv1.w"), p.at("conv1.b"), 1, 1));
  x = ad::relu(ad::conv2d(x, p.at("conv2.w"), p.at("conv2.b"), 1, 1));
  return x;
}

namespace {

std::vector<Box> make_anchors(const ArchConfig& arch, int fh, int fw) {
  double stride = arch.feature_stride();
  std::vector<Box> anchors;
  anchors.reserve(static_cast<size_t>(arch.anchors_per_cell()) * fh * fw);
  for (double size : arch.anchor_sizes) {
    for (double aspect : arch.anchor_aspects) {
      double w = size / std::sqrt(aspect);
      double h = size * std::sqrt(aspect);
      for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
          double cx = (x + 0.5) * stride;
          double cy = (y + 0.5) * stride;
          anchors.push_back(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
      }
    }
  }
  return anchors;
}

}  // namespace

RpnOutputs rpn_forward(const BoundParams& head, ad::Value feats, const ArchConfig& arch) {
  const Tensor& fv = feats.val();
  YKD_CHECK(fv.rank() == 3, "rpn_forward: need 3-D features");
  YKD_CHECK(fv.dim(0) == arch.head_in_channels, "rpn_forward: feature channels ",
            fv.dim(0), " != head input channels ", arch.head_in_channels);
  int fh = fv.dim(1), fw = fv.dim(2);
  ad::Value x = ad::relu(ad::conv2d(feats, head.at("rpn.conv.w"), head.at("rpn.conv.b"), 1, 1));
  ad::Value obj = ad::conv2d(x, head.at("rpn.obj.w"), head.at("rpn.obj.b"), 1, 0);
  ad::Value dlt = ad::conv2d(x, head.at("rpn.delta.w"), head.at("rpn.delta.b"), 1, 0);
  RpnOutputs out;
  out.objectness = ad::channels_to_rows(obj, 1);
  out.deltas = ad::channels_to_rows(dlt, 4);
  out.anchors = make_anchors(arch, fh, fw);
  return out;
}

std::vector<Box> select_proposals(const RpnOutputs& rpn, const ArchConfig& arch,
                                  bool train, int image_w, int image_h) {
  const Tensor& obj = rpn.objectness.val();
  const Tensor& dlt = rpn.deltas.val();
  int n = obj.dim(0);
  YKD_CHECK(static_cast<size_t>(n) == rpn.anchors.size(),
            "select_proposals: anchor count mismatch");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return obj[a] > obj[b]; });

  int pre = train ? arch.rpn_pre_nms_train : arch.rpn_pre_nms_eval;
  int post = train ? arch.rpn_post_nms_train : arch.rpn_post_nms_eval;
  BoxTransform xf;
  std::vector<Box> cand;
  std::vector<double> cand_scores;
  for (int i = 0; i < n && static_cast<int>(cand.size()) < pre; ++i) {
    int a = order[static_cast<size_t>(i)];
    Box b = xf.decode(rpn.anchors[static_cast<size_t>(a)],
                      {dlt.at(a, 0), dlt.at(a, 1), dlt.at(a, 2), dlt.at(a, 3)});
    b = clip_box(b, image_w, image_h);
    if (b.width() < arch.proposal_min_size || b.height() < arch.proposal_min_size) continue;
    cand.push_back(b);
    cand_scores.push_back(obj[a]);
  }
  if (cand.empty()) return {};
  std::vector<int> keep = nms(cand, cand_scores, arch.rpn_nms_thresh);
  std::vector<Box> out;
  for (int idx : keep) {
    out.push_back(cand[static_cast<size_t>(idx)]);
    if (static_cast<int>(out.size()) >= post) break;
  }
  return out;
}

RoiOutputs roi_forward(const BoundParams& head, ad::Value feats,
                       const std::vector<Box>& proposals, const ArchConfig& arch,
                       int num_classes, bool run_mask) {
  YKD_CHECK(!proposals.empty(), "roi_forward: empty proposal list");
  double scale = 1.0 / arch.feature_stride();
  std::vector<std::array<double, 4>> boxes;
  boxes.reserve(proposals.size());
  for (const auto& b : proposals) boxes.push_back(b.arr());
  int P = static_cast<int>(proposals.size());

  RoiOutputs out;
  ad::Value pooled = ad::roi_align(feats, boxes, arch.roi_size, scale);
  ad::Value flat = ad::reshape(
      pooled, {P, arch.head_in_channels * arch.roi_size * arch.roi_size});
  ad::Value hidden = ad::relu(ad::linear(flat, head.at("box.fc.w"), head.at("box.fc.b")));
  out.cls_logits = ad::linear(hidden, head.at("box.cls.w"), head.at("box.cls.b"));
  out.reg_deltas = ad::linear(hidden, head.at("box.reg.w"), head.at("box.reg.b"));
  YKD_CHECK(out.cls_logits.val().dim(1) == num_classes + 1,
            "roi_forward: classifier width mismatch");

  if (run_mask) {
    out.mask_logits = mask_forward(head, feats, proposals, arch);
  }
  return out;
}

ad::Value mask_forward(const BoundParams& head, ad::Value feats,
                       const std::vector<Box>& boxes, const ArchConfig& arch) {
  YKD_CHECK(!boxes.empty(), "mask_forward: empty box list");
  double scale = 1.0 / arch.feature_stride();
  std::vector<std::array<double, 4>> raw;
  raw.reserve(boxes.size());
  for (const auto& b : boxes) raw.push_back(b.arr());
  ad::Value mpool = ad::roi_align(feats, raw, arch.mask_roi_size, scale);
  std::vector<ad::Value> per_props;
  per_props.reserve(boxes.size());
  for (int p = 0; p < static_cast<int>(boxes.size()); ++p) {
    ad::Value m = ad::select_image(mpool, p);
    m = ad::relu(ad::conv2d(m, head.at("mask.conv.w"), head.at("mask.conv.b"), 1, 1));
    m = ad::relu(ad::deconv2x2(m, head.at("mask.deconv.w"), head.at("mask.deconv.b")));
    m = ad::conv2d(m, head.at("mask.out.w"), head.at("mask.out.b"), 1, 0);
    per_props.push_back(m);
  }
  return ad::stack_images(per_props);
}

HeadOutputs forward_head_on_tape(const BoundParams& head, ad::Value feats,
                                 const ArchConfig& arch,
                                 const std::vector<int>& class_domain, bool train,
                                 int image_w, int image_h,
                                 const std::vector<Box>* proposals, bool run_mask) {
  HeadOutputs out;
  out.class_domain = class_domain;
  out.rpn = rpn_forward(head, feats, arch);
  out.proposals = proposals ? *proposals
                            : select_proposals(out.rpn, arch, train, image_w, image_h);
  if (!out.proposals.empty()) {
    out.roi = roi_forward(head, feats, out.proposals, arch,
                          static_cast<int>(class_domain.size()), run_mask);
  }
  return out;
}

Tensor forward_features(const ModelState& state, int branch, const Tensor& image) {
  YKD_CHECK(branch >= 0 && branch < static_cast<int>(state.fes.size()),
            "forward_features: unknown branch ", branch, " (have ", state.fes.size(), ")");
  ad::Tape tape;
  BoundParams bb(tape, state.backbone, false);
  BoundParams fe(tape, state.fes[static_cast<size_t>(branch)].params, false);
  ad::Value x = backbone_forward(tape, bb, image, state.arch);
  x = fe_forward(fe, x, state.arch);
  return x.val();
}

// ---------------------------------------------------------------------------
// incremental surgery
// ---------------------------------------------------------------------------

HeadEntry expand_head(const HeadEntry& prev, const std::vector<int>& new_classes,
                      const ArchConfig& arch, uint64_t seed) {
  for (int c : new_classes) {
    YKD_CHECK(std::find(prev.class_domain.begin(), prev.class_domain.end(), c) ==
                  prev.class_domain.end(),
              "expand_head: class ", c, " already in the head domain");
  }
  HeadEntry out;
  out.class_domain = prev.class_domain;
  {
    std::vector<int> add = new_classes;
    std::sort(add.begin(), add.end());
    YKD_CHECK(std::adjacent_find(add.begin(), add.end()) == add.end(),
              "expand_head: duplicate new class ids");
    out.class_domain.insert(out.class_domain.end(), add.begin(), add.end());
  }
  out.step = new_classes.empty() ? prev.step : prev.step + 1;

  int c_old = static_cast<int>(prev.class_domain.size());
  int c_new = static_cast<int>(out.class_domain.size());
  out.params = make_head_params(arch, c_new);
  Rng base(seed);

  for (auto& dst : out.params.arrays()) {
    const ParamArray& src = prev.params.get(dst.name);
    if (dst.shape == src.shape) {
      dst.data = src.data;  // bit-exact copy
      continue;
    }
    // Class-dimension rows grow; old rows copy bit-exactly, new rows get
    // small random weights and zero biases.
    Rng rng = base.fork(Rng::hash_name("expand/head_" + std::to_string(out.step) + "/" +
                                       dst.name));
    int64_t per_row = 1;
    for (size_t i = 1; i < dst.shape.size(); ++i) per_row *= dst.shape[i];
    int rows_old = src.shape[0];
    int rows_new = dst.shape[0];
    YKD_CHECK(per_row == src.numel() / std::max(1, rows_old), "expand_head: array ",
              dst.name, " changed shape beyond the class dimension");
    int expected_growth = (dst.name == "box.cls.w" || dst.name == "box.cls.b")
                              ? c_new - c_old
                              : (dst.name == "box.reg.w" || dst.name == "box.reg.b")
                                    ? 4 * (c_new - c_old)
                                    : (dst.name == "mask.out.w" || dst.name == "mask.out.b")
                                          ? c_new - c_old
                                          : -1;
    YKD_CHECK(expected_growth == rows_new - rows_old, "expand_head: unexpected growth in ",
              dst.name);
    std::copy(src.data.begin(), src.data.end(), dst.data.begin());
    bool is_bias = dst.shape.size() == 1;
    for (int64_t i = static_cast<int64_t>(rows_old) * per_row; i < dst.numel(); ++i) {
      dst.data[static_cast<size_t>(i)] =
          is_bias ? 0.0f : static_cast<float>(rng.normal(0.0, arch.new_row_init_std));
    }
  }
  return out;
}

void clone_branch(ModelState& state, int source, int new_step,
                  const std::vector<int>& new_classes) {
  YKD_CHECK(source >= 0 && source < static_cast<int>(state.fes.size()),
            "clone_branch: unknown source branch ", source);
  FeBranch next;
  next.params = state.fes[static_cast<size_t>(source)].params;  // bit-exact copy
  next.step = new_step;
  next.frozen = false;
  next.classes = new_classes;
  state.fes[static_cast<size_t>(source)].frozen = true;
  state.fes.push_back(std::move(next));
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

ordered_json arch_to_json(const ArchConfig& a) {
  ordered_json j;
  j["backbone_c1"] = a.backbone_c1;
  j["backbone_c2"] = a.backbone_c2;
  j["backbone_c3"] = a.backbone_c3;
  j["backbone_c4"] = a.backbone_c4;
  j["fe_channels"] = a.fe_channels;
  j["head_in_channels"] = a.head_in_channels;
  j["rpn_channels"] = a.rpn_channels;
  j["anchor_sizes"] = a.anchor_sizes;
  j["anchor_aspects"] = a.anchor_aspects;
  j["rpn_nms_thresh"] = a.rpn_nms_thresh;
  j["rpn_pre_nms_train"] = a.rpn_pre_nms_train;
  j["rpn_pre_nms_eval"] = a.rpn_pre_nms_eval;
  j["rpn_post_nms_train"] = a.rpn_post_nms_train;
  j["rpn_post_nms_eval"] = a.rpn_post_nms_eval;
  j["proposal_min_size"] = a.proposal_min_size;
  j["roi_size"] = a.roi_size;
  j["mask_roi_size"] = a.mask_roi_size;
  j["mask_size"] = a.mask_size;
  j["box_fc_dim"] = a.box_fc_dim;
  j["mask_conv_channels"] = a.mask_conv_channels;
  j["mask_deconv_channels"] = a.mask_deconv_channels;
  j["rpn_batch"] = a.rpn_batch;
  j["rpn_pos_frac"] = a.rpn_pos_frac;
  j["rpn_pos_iou"] = a.rpn_pos_iou;
  j["rpn_neg_iou"] = a.rpn_neg_iou;
  j["roi_batch"] = a.roi_batch;
  j["roi_pos_frac"] = a.roi_pos_frac;
  j["roi_fg_iou"] = a.roi_fg_iou;
  j["new_row_init_std"] = a.new_row_init_std;
  return j;
}

ArchConfig arch_from_json(const ordered_json& j) {
  ArchConfig a;
  a.backbone_c1 = j.at("backbone_c1").get<int>();
  a.backbone_c2 = j.at("backbone_c2").get<int>();
  a.backbone_c3 = j.at("backbone_c3").get<int>();
  a.backbone_c4 = j.at("backbone_c4").get<int>();
  a.fe_channels = j.at("fe_channels").get<int>();
  a.head_in_channels = j.at("head_in_channels").get<int>();
  a.rpn_channels = j.at("rpn_channels").get<int>();
  a.anchor_sizes = j.at("anchor_sizes").get<std::vector<double>>();
  a.anchor_aspects = j.at("anchor_aspects").get<std::vector<double>>();
  a.rpn_nms_thresh = j.at("rpn_nms_thresh").get<double>();
  a.rpn_pre_nms_train = j.at("rpn_pre_nms_train").get<int>();
  a.rpn_pre_nms_eval = j.at("rpn_pre_nms_eval").get<int>();
  a.rpn_post_nms_train = j.at("rpn_post_nms_train").get<int>();
  a.rpn_post_nms_eval = j.at("rpn_post_nms_eval").get<int>();
  a.proposal_min_size = j.at("proposal_min_size").get<double>();
  a.roi_size = j.at("roi_size").get<int>();
  a.mask_roi_size = j.at("mask_roi_size").get<int>();
  a.mask_size = j.at("mask_size").get<int>();
  a.box_fc_dim = j.at("box_fc_dim").get<int>();
  a.mask_conv_channels = j.at("mask_conv_channels").get<int>();
  a.mask_deconv_channels = j.at("mask_deconv_channels").get<int>();
  a.rpn_batch = j.at("rpn_batch").get<int>();
  a.rpn_pos_frac = j.at("rpn_pos_frac").get<double>();
  a.rpn_pos_iou = j.at("rpn_pos_iou").get<double>();
  a.rpn_neg_iou = j.at("rpn_neg_iou").get<double>();
  a.roi_batch = j.at("roi_batch").get<int>();
  a.roi_pos_frac = j.at("roi_pos_frac").get<double>();
  a.roi_fg_iou = j.at("roi_fg_iou").get<double>();
  a.new_row_init_std = j.at("new_row_init_std").get<double>();
  return a;
}

std::string array_file_name(const std::string& qualified) {
  std::string out = qualified;
  for (auto& ch : out) {
    if (ch == '/') ch = '.';
  }
  return out + ".bin";
}

void append_arrays(ordered_json& arrays, const ParamSet& ps, const std::string& prefix,
                   const std::string& owner, int step, bool frozen,
                   const std::string& dir) {
  for (const auto& a : ps.arrays()) {
    std::string qualified = prefix + "/" + a.name;
    arrays.push_back({{"name", qualified},
                      {"shape", a.shape},
                      {"dtype", "float32"},
                      {"owner", owner},
                      {"step", step},
                      {"frozen", frozen}});
    write_array_file((fs::path(dir) / array_file_name(qualified)).string(), a);
  }
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& dir) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "ykd-checkpoint-v1";
  manifest["arch"] = arch_to_json(state.arch);
  manifest["backbone_frozen"] = state.backbone_frozen;

  ordered_json arrays = ordered_json::array();
  append_arrays(arrays, state.backbone, "backbone", "backbone", 0, state.backbone_frozen,
                dir);
  ordered_json branches = ordered_json::array();
  for (size_t i = 0; i < state.fes.size(); ++i) {
    const FeBranch& fe = state.fes[i];
    std::string prefix = "fe_" + std::to_string(i);
    append_arrays(arrays, fe.params, prefix, "fe", fe.step, fe.frozen, dir);
    branches.push_back({{"index", i},
                        {"step", fe.step},
                        {"frozen", fe.frozen},
                        {"classes", fe.classes}});
  }
  ordered_json domains;
  for (const auto& h : state.heads) {
    std::string prefix = "head_" + std::to_string(h.step);
    append_arrays(arrays, h.params, prefix, "head", h.step, false, dir);
    domains[prefix] = h.class_domain;
  }
  manifest["fe_branches"] = branches;
  manifest["class_domains"] = domains;
  manifest["arrays"] = arrays;

  std::ofstream f(fs::path(dir) / "manifest.json");
  YKD_CHECK(f.good(), "save_checkpoint: cannot write manifest in ", dir);
  f << manifest.dump(2) << "\n";
  YKD_CHECK(f.good(), "save_checkpoint: manifest write failed in ", dir);
}

ModelState load_checkpoint(const std::string& dir) { return load_checkpoint(dir, {}); }

ModelState load_checkpoint(const std::string& dir, const LoadOptions& opts) {
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  YKD_CHECK(f.good(), "load_checkpoint: cannot open ", mpath.string());
  ordered_json manifest;
  try {
    f >> manifest;
  } catch (const std::exception& e) {
    fail("load_checkpoint: invalid manifest JSON in ", dir, ": ", e.what());
  }
  YKD_CHECK(manifest.value("format", "") == "ykd-checkpoint-v1",
            "load_checkpoint: unknown checkpoint format in ", dir);

  ModelState state;
  state.arch = arch_from_json(manifest.at("arch"));
  state.arch.validate();
  state.backbone_frozen = manifest.at("backbone_frozen").get<bool>();

  // Collection skeletons from the structural tables.
  state.backbone = make_backbone_params(state.arch);
  for (const auto& b : manifest.at("fe_branches")) {
    FeBranch fe;
    fe.params = make_fe_params(state.arch);
    fe.step = b.at("step").get<int>();
    fe.frozen = b.at("frozen").get<bool>();
    fe.classes = b.at("classes").get<std::vector<int>>();
    state.fes.push_back(std::move(fe));
  }
  std::set<int> wanted(opts.head_steps.begin(), opts.head_steps.end());
  std::vector<std::pair<int, std::vector<int>>> head_specs;
  for (const auto& [key, domain] : manifest.at("class_domains").items()) {
    YKD_CHECK(key.rfind("head_", 0) == 0, "load_checkpoint: bad class_domains key ", key);
    int step = std::stoi(key.substr(5));
    if (!wanted.empty() && !wanted.count(step)) continue;
    head_specs.emplace_back(step, domain.get<std::vector<int>>());
  }
  YKD_CHECK(wanted.empty() || head_specs.size() == wanted.size(),
            "load_checkpoint: requested head step missing from ", dir);
  std::sort(head_specs.begin(), head_specs.end());
  for (auto& [step, domain] : head_specs) {
    HeadEntry h;
    h.step = step;
    h.class_domain = domain;
    h.params = make_head_params(state.arch, static_cast<int>(domain.size()));
    state.heads.push_back(std::move(h));
  }
  YKD_CHECK(!state.heads.empty(), "load_checkpoint: no heads selected from ", dir);

  // Verify the class-domain nesting invariant.
  for (size_t i = 1; i < state.heads.size(); ++i) {
    const auto& prev = state.heads[i - 1].class_domain;
    const auto& cur = state.heads[i].class_domain;
    YKD_CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()),
              "load_checkpoint: head domains are not nested");
  }

  // Route the manifest arrays into their collections.
  for (const auto& meta : manifest.at("arrays")) {
    std::string qualified = meta.at("name").get<std::string>();
    auto slash = qualified.find('/');
    YKD_CHECK(slash != std::string::npos, "load_checkpoint: bad array name ", qualified);
    std::string coll = qualified.substr(0, slash);
    std::string local = qualified.substr(slash + 1);
    ParamSet* target = nullptr;
    if (coll == "backbone") {
      target = &state.backbone;
    } else if (coll.rfind("fe_", 0) == 0) {
      size_t idx = static_cast<size_t>(std::stoi(coll.substr(3)));
      YKD_CHECK(idx < state.fes.size(), "load_checkpoint: array ", qualified,
                " references missing FE branch");
      target = &state.fes[idx].params;
    } else if (coll.rfind("head_", 0) == 0) {
      int step = std::stoi(coll.substr(5));
      if (!wanted.empty() && !wanted.count(step)) continue;  // pruned head
      target = &state.head_by_step(step).params;
    } else {
      fail("load_checkpoint: unknown collection in array name ", qualified);
    }
    YKD_CHECK(target->has(local), "load_checkpoint: collection ", coll,
              " has no array ", local);
    ParamArray& a = target->get(local);
    auto shape = meta.at("shape").get<std::vector<int>>();
    YKD_CHECK(shape == a.shape, "load_checkpoint: collection ", coll, " array ", local,
              " manifest shape does not match the architecture");
    read_array_file((fs::path(dir) / array_file_name(qualified)).string(), a,
                    "load_checkpoint: collection " + coll);
  }
  return state;
}

}  // namespace ykd

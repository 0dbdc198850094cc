#include "ykd/infer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ykd/common.hpp"

using ordered_json = nlohmann::ordered_json;

namespace ykd {

InferenceEngine::InferenceEngine(const ModelState& state, int head_step) {
  YKD_CHECK(!state.heads.empty(), "inference: state has no heads");
  arch_ = state.arch;
  backbone_ = state.backbone;
  fes_ = state.fes;
  int idx = -1;
  if (head_step < 0) {
    idx = state.latest_head_index();
  } else {
    for (size_t i = 0; i < state.heads.size(); ++i) {
      if (state.heads[i].step == head_step) idx = static_cast<int>(i);
    }
    YKD_CHECK(idx >= 0, "inference: head for step ", head_step, " not loaded");
  }
  head_ = state.heads[static_cast<size_t>(idx)];
}

void InferenceEngine::clear_cache() { trunk_cache_.clear(); }

const Tensor& InferenceEngine::backbone_shared_pass(const ImageSample& image) {
  auto it = trunk_cache_.find(image.image_id);
  if (it != trunk_cache_.end()) return it->second;
  ad::Tape tape;
  BoundParams bb(tape, backbone_, false);
  ad::Value trunk = backbone_forward(tape, bb, image.pixels, arch_);
  ++stats_.backbone_passes;
  return trunk_cache_.emplace(image.image_id, trunk.val()).first->second;
}

namespace {

// Per-branch detection pass with the shared head over the cached trunk.
std::vector<Detection> run_branch(const Tensor& trunk, const ParamSet& fe_params,
                                  const HeadEntry& head, const ArchConfig& arch,
                                  const ImageSample& image, int branch_index,
                                  const std::vector<int>& allowed_classes,
                                  const InferOptions& opt) {
  ad::Tape tape;
  BoundParams fe(tape, fe_params, false);
  BoundParams hd(tape, head.params, false);
  ad::Value feats = fe_forward(fe, tape.constant(trunk), arch);
  RpnOutputs rpn = rpn_forward(hd, feats, arch);
  std::vector<Box> proposals =
      select_proposals(rpn, arch, false, image.width(), image.height());
  if (proposals.empty()) return {};

  int C = static_cast<int>(head.class_domain.size());
  RoiOutputs roi = roi_forward(hd, feats, proposals, arch, C, false);
  const Tensor& logits = roi.cls_logits.val();
  const Tensor& deltas = roi.reg_deltas.val();
  int P = static_cast<int>(proposals.size());

  // Per-proposal softmax over bg + classes.
  Tensor probs({P, C + 1});
  for (int p = 0; p < P; ++p) {
    double mx = logits.at(p, 0);
    for (int c = 1; c <= C; ++c) mx = std::max(mx, logits.at(p, c));
    double s = 0.0;
    for (int c = 0; c <= C; ++c) s += std::exp(logits.at(p, c) - mx);
    for (int c = 0; c <= C; ++c) probs.at(p, c) = std::exp(logits.at(p, c) - mx) / s;
  }

  std::set<int> allowed(allowed_classes.begin(), allowed_classes.end());
  BoxTransform xf;
  struct Cand {
    int class_id;
    double score;
    Box box;
  };
  std::vector<Cand> kept;
  for (int ci = 0; ci < C; ++ci) {
    int class_id = head.class_domain[static_cast<size_t>(ci)];
    if (!allowed.count(class_id)) continue;  // Eq.-7 domain filter
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int p = 0; p < P; ++p) {
      double sc = probs.at(p, ci + 1);
      if (sc < opt.score_thresh) continue;
      Box b = xf.decode(proposals[static_cast<size_t>(p)],
                        {deltas.at(p, 4 * ci), deltas.at(p, 4 * ci + 1),
                         deltas.at(p, 4 * ci + 2), deltas.at(p, 4 * ci + 3)});
      b = clip_box(b, image.width(), image.height());
      if (!b.valid()) continue;
      boxes.push_back(b);
      scores.push_back(sc);
    }
    if (boxes.empty()) continue;
    for (int k : nms(boxes, scores, opt.nms_thresh)) {
      kept.push_back({class_id, scores[static_cast<size_t>(k)], boxes[static_cast<size_t>(k)]});
    }
  }
  if (kept.empty()) return {};

  // Mask branch on the final boxes only.
  std::vector<Box> final_boxes;
  final_boxes.reserve(kept.size());
  for (const auto& k : kept) final_boxes.push_back(k.box);
  ad::Value mask_logits = mask_forward(hd, feats, final_boxes, arch);
  const Tensor& ml = mask_logits.val();
  int S = arch.mask_size;

  std::vector<Detection> out;
  for (size_t k = 0; k < kept.size(); ++k) {
    int ci = -1;
    for (int c = 0; c < C; ++c) {
      if (head.class_domain[static_cast<size_t>(c)] == kept[k].class_id) ci = c;
    }
    Tensor soft({S, S});
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        double logit = ml[((static_cast<int64_t>(k) * C + ci) * S + y) * S + x];
        soft.at(y, x) = 1.0 / (1.0 + std::exp(-logit));
      }
    }
    Detection d;
    d.image_id = image.image_id;
    d.class_id = kept[k].class_id;
    d.score = kept[k].score;
    d.box = kept[k].box;
    d.mask = paste_mask(soft, kept[k].box, image.width(), image.height(), opt.mask_binarize);
    d.source_branch = branch_index;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace

void sort_detections(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.box.x0 < b.box.x0;
  });
}

std::vector<Detection> InferenceEngine::infer(const ImageSample& image,
                                              const InferOptions& opt) {
  std::vector<int> branches;
  if (opt.branches.has_value()) {
    branches = *opt.branches;
    YKD_CHECK(!branches.empty(), "infer: empty branch set");
    for (int b : branches) {
      YKD_CHECK(b >= 0 && b < num_branches(), "infer: branch ", b, " out of range [0, ",
                num_branches() - 1, "]");
    }
  } else {
    for (int b = 0; b < num_branches(); ++b) branches.push_back(b);
  }

  const Tensor& trunk = backbone_shared_pass(image);
  std::vector<Detection> merged;
  for (int b : branches) {
    ++stats_.head_passes;
    auto dets = run_branch(trunk, fes_[static_cast<size_t>(b)].params, head_, arch_, image,
                           b, fes_[static_cast<size_t>(b)].classes, opt);
    merged.insert(merged.end(), dets.begin(), dets.end());
  }
  sort_detections(merged);
  return merged;
}

std::vector<Detection> InferenceEngine::infer_with_branch(const ImageSample& image,
                                                          int fe_index,
                                                          bool filter_to_branch_domain,
                                                          const InferOptions& opt) {
  YKD_CHECK(fe_index >= 0 && fe_index < num_branches(), "infer: branch ", fe_index,
            " out of range [0, ", num_branches() - 1, "]");
  const Tensor& trunk = backbone_shared_pass(image);
  ++stats_.head_passes;
  const std::vector<int>& allowed = filter_to_branch_domain
                                        ? fes_[static_cast<size_t>(fe_index)].classes
                                        : head_.class_domain;
  auto dets = run_branch(trunk, fes_[static_cast<size_t>(fe_index)].params, head_, arch_,
                         image, fe_index, allowed, opt);
  sort_detections(dets);
  return dets;
}

ComposedModel compose(const ModelState& state, int fe_index, int head_index) {
  YKD_CHECK(fe_index >= 0 && fe_index < static_cast<int>(state.fes.size()),
            "compose: FE index ", fe_index, " out of range (", state.fes.size(),
            " branches)");
  bool found = false;
  for (const auto& h : state.heads) {
    if (h.step == head_index) found = true;
  }
  YKD_CHECK(found, "compose: head index ", head_index, " not present in the state");
  ComposedModel out;
  out.engine = std::make_shared<InferenceEngine>(state, head_index);
  out.fe_index = fe_index;
  return out;
}

void save_detections_jsonl(const std::string& path, const std::vector<Detection>& dets) {
  std::ofstream f(path, std::ios::binary);
  YKD_CHECK(f.good(), "save_detections_jsonl: cannot open ", path);
  for (const auto& d : dets) {
    ordered_json j;
    j["image_id"] = d.image_id;
    j["class_id"] = d.class_id;
    j["score"] = d.score;
    j["box"] = {d.box.x0, d.box.y0, d.box.x1, d.box.y1};
    j["mask_rle"] = rle_to_string(rle_encode(d.mask));
    j["branch"] = d.source_branch;
    f << j.dump() << "\n";
  }
  YKD_CHECK(f.good(), "save_detections_jsonl: write failed for ", path);
}

std::vector<Detection> load_detections_jsonl(const std::string& path, const Dataset& ref) {
  std::map<std::string, std::pair<int, int>> dims;
  for (const auto& s : ref.samples) dims[s.image_id] = {s.width(), s.height()};
  std::ifstream f(path);
  YKD_CHECK(f.good(), "load_detections_jsonl: cannot open ", path);
  std::vector<Detection> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      fail("load_detections_jsonl: ", path, ":", line_no, ": ", e.what());
    }
    Detection d;
    d.image_id = j.at("image_id").get<std::string>();
    auto it = dims.find(d.image_id);
    YKD_CHECK(it != dims.end(), "load_detections_jsonl: ", path, ":", line_no,
              ": unknown image_id ", d.image_id);
    d.class_id = j.at("class_id").get<int>();
    d.score = j.at("score").get<double>();
    const auto& bx = j.at("box");
    d.box = Box{bx[0].get<double>(), bx[1].get<double>(), bx[2].get<double>(),
                bx[3].get<double>()};
    d.mask = rle_decode(rle_from_string(j.at("mask_rle").get<std::string>()),
                        it->second.first, it->second.second);
    d.source_branch = j.at("branch").get<int>();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace ykd

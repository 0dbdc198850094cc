#include "ykd/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "ykd/rng.hpp"

namespace ykd {

TrainMode parse_train_mode(const std::string& s) {
  if (s == "finetune") return TrainMode::kFinetune;
  if (s == "kd_frozen") return TrainMode::kKdFrozen;
  if (s == "ykd") return TrainMode::kYkd;
  fail("unknown training mode \"", s, "\" (expected finetune, kd_frozen or ykd)");
}

std::string train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kFinetune:
      return "finetune";
    case TrainMode::kKdFrozen:
      return "kd_frozen";
    case TrainMode::kYkd:
      return "ykd";
  }
  return "?";
}

void TrainConfig::validate() const {
  YKD_CHECK(epochs >= 0, "train config: negative epochs");
  YKD_CHECK(batch_size >= 1, "train config: batch_size must be >= 1");
  YKD_CHECK(lr > 0.0, "train config: lr must be positive");
  YKD_CHECK(momentum >= 0.0 && momentum < 1.0, "train config: momentum in [0,1)");
  YKD_CHECK(threads >= 1, "train config: threads must be >= 1");
  kd.validate();
  arch.validate();
}

namespace {

std::vector<int> classes_in(const Dataset& ds) {
  std::set<int> ids;
  for (const auto& s : ds.samples) {
    for (const auto& a : s.annotations) ids.insert(a.class_id);
  }
  return std::vector<int>(ids.begin(), ids.end());
}

ImageSample hflip_sample(const ImageSample& s) {
  ImageSample out;
  out.image_id = s.image_id;
  int h = s.height(), w = s.width();
  out.pixels = Tensor({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.pixels[(static_cast<int64_t>(c) * h + y) * w + x] =
            s.pixels[(static_cast<int64_t>(c) * h + y) * w + (w - 1 - x)];
  for (const auto& a : s.annotations) {
    InstanceAnnotation f;
    f.class_id = a.class_id;
    f.mask = Mask(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (a.mask.at(x, y)) f.mask.set(w - 1 - x, y, 1);
    f.box = Box{static_cast<double>(w) - a.box.x1, a.box.y0,
                static_cast<double>(w) - a.box.x0, a.box.y1};
    out.annotations.push_back(std::move(f));
  }
  return out;
}

SupervisedTargets targets_of(const ImageSample& s) {
  SupervisedTargets t;
  t.image_w = s.width();
  t.image_h = s.height();
  for (const auto& a : s.annotations) {
    t.boxes.push_back(a.box);
    t.class_ids.push_back(a.class_id);
    t.masks.push_back(a.mask);
  }
  return t;
}

ad::Value maybe_detach(ad::Value v, bool detach) {
  return detach ? v.tape->constant(v.val()) : v;
}

// Everything one incremental/base step binds while training. Exactly one
// student FE and at most two heads are live regardless of the step
// index, which keeps the training footprint constant in t.
struct Plan {
  ParamSet* backbone = nullptr;
  bool backbone_trainable = false;
  ParamSet* student_fe = nullptr;
  ParamSet* teacher_fe = nullptr;  // kd_frozen only
  HeadEntry* student_head = nullptr;
  const HeadEntry* teacher_head = nullptr;
  int num_new = 0;

  int live_collections() const {
    return 2 /*backbone + student fe*/ + (teacher_fe ? 1 : 0) + 1 /*student head*/ +
           (teacher_head ? 1 : 0);
  }
};

struct ImageResult {
  std::map<std::string, Tensor> grads;
  double sup = 0, kd_box = 0, kd_rpn = 0, kd_mask = 0;
};

// Proposal sampling for the RoI heads: RPN boxes plus the ground truth,
// matched by IoU, subsampled to roi_batch at roi_pos_frac foreground.
std::vector<Box> sample_proposals(std::vector<Box> proposals,
                                  const SupervisedTargets& targets,
                                  const ArchConfig& arch, Rng& rng) {
  for (const auto& b : targets.boxes) proposals.push_back(b);
  std::vector<int> fg, bg;
  for (size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    for (const auto& g : targets.boxes) best = std::max(best, box_iou(proposals[i], g));
    (best >= arch.roi_fg_iou ? fg : bg).push_back(static_cast<int>(i));
  }
  rng.shuffle(fg);
  rng.shuffle(bg);
  int want_fg = std::min<int>(static_cast<int>(fg.size()),
                              static_cast<int>(arch.roi_batch * arch.roi_pos_frac));
  std::vector<Box> out;
  for (int i = 0; i < want_fg; ++i) out.push_back(proposals[static_cast<size_t>(fg[static_cast<size_t>(i)])]);
  for (size_t i = 0; i < bg.size() && static_cast<int>(out.size()) < arch.roi_batch; ++i)
    out.push_back(proposals[static_cast<size_t>(bg[i])]);
  // Fill any remaining room with leftover foreground.
  for (size_t i = static_cast<size_t>(want_fg);
       i < fg.size() && static_cast<int>(out.size()) < arch.roi_batch; ++i)
    out.push_back(proposals[static_cast<size_t>(fg[i])]);
  return out;
}

ImageResult process_image(const ImageSample& raw, const Plan& plan,
                          const TrainConfig& cfg, Rng rng) {
  ImageSample flipped;
  const ImageSample* s = &raw;
  if (cfg.hflip && rng.uniform() < 0.5) {
    flipped = hflip_sample(raw);
    s = &flipped;
  }
  SupervisedTargets targets = targets_of(*s);
  const ArchConfig& arch = cfg.arch;

  ad::Tape tape;
  BoundParams backbone(tape, *plan.backbone, plan.backbone_trainable);
  BoundParams student_fe(tape, *plan.student_fe, true);
  BoundParams student_head(tape, plan.student_head->params, true);

  ad::Value trunk = backbone_forward(tape, backbone, s->pixels, arch);
  ad::Value feats = fe_forward(student_fe, trunk, arch);

  RpnOutputs rpn = rpn_forward(student_head, feats, arch);
  std::vector<Box> proposals =
      sample_proposals(select_proposals(rpn, arch, true, s->width(), s->height()),
                       targets, arch, rng);

  HeadOutputs out;
  out.class_domain = plan.student_head->class_domain;
  out.rpn = rpn;
  out.proposals = proposals;
  if (!proposals.empty()) {
    out.roi = roi_forward(student_head, feats, proposals, arch,
                          static_cast<int>(out.class_domain.size()), true);
  }
  SupervisedLossParts sup = supervised_loss(out, targets, arch);

  ad::Value zero = tape.constant(Tensor::scalar(0.0));
  ad::Value kd_box = zero, kd_rpn = zero, kd_mask = zero;
  if (plan.teacher_head != nullptr) {
    ad::Value teacher_feats = feats;  // Y-shape: shared trainable FE
    if (plan.teacher_fe != nullptr) {
      BoundParams tfe(tape, *plan.teacher_fe, false);
      teacher_feats = fe_forward(tfe, trunk, arch);
    }
    BoundParams teacher_head(tape, plan.teacher_head->params, false);
    bool detach = !cfg.kd_teacher_grad;
    int c_old = static_cast<int>(plan.teacher_head->class_domain.size());

    RpnOutputs t_rpn = rpn_forward(teacher_head, teacher_feats, arch);
    kd_rpn = rpn_kd_loss(maybe_detach(t_rpn.objectness, detach), rpn.objectness,
                         maybe_detach(t_rpn.deltas, detach), rpn.deltas, cfg.tau_obj);
    if (!proposals.empty()) {
      RoiOutputs t_roi =
          roi_forward(teacher_head, teacher_feats, proposals, arch, c_old, true);
      kd_box = unbiased_kd_box(maybe_detach(t_roi.cls_logits, detach), out.roi.cls_logits,
                               maybe_detach(t_roi.reg_deltas, detach), out.roi.reg_deltas,
                               plan.num_new, cfg.tau_reg);
      std::vector<int> old_channels(static_cast<size_t>(c_old));
      for (int i = 0; i < c_old; ++i) old_channels[static_cast<size_t>(i)] = i;
      kd_mask = mask_kd_loss(maybe_detach(t_roi.mask_logits, detach),
                             ad::gather_channels(out.roi.mask_logits, old_channels));
    }
  }

  ad::Value total = total_loss(sup.total, kd_box, kd_rpn, kd_mask, cfg.kd);
  tape.backward(total);

  ImageResult res;
  res.sup = sup.total.scalar();
  res.kd_box = kd_box.scalar();
  res.kd_rpn = kd_rpn.scalar();
  res.kd_mask = kd_mask.scalar();
  if (plan.backbone_trainable) backbone.harvest_grads(tape, "backbone/", res.grads);
  student_fe.harvest_grads(tape, "fe/", res.grads);
  student_head.harvest_grads(tape, "head/", res.grads);
  return res;
}

class Sgd {
 public:
  Sgd(double momentum) : momentum_(momentum) {}

  void step(Plan& plan, std::map<std::string, Tensor>& grads, double scale, double lr) {
    for (auto& [name, g] : grads) {
      auto [it, inserted] = velocity_.try_emplace(name, Tensor(g.shape));
      Tensor& v = it->second;
      ParamArray& w = resolve(plan, name);
      for (int64_t i = 0; i < g.numel(); ++i) {
        v[i] = momentum_ * v[i] + g[i] * scale;
        w.data[static_cast<size_t>(i)] =
            static_cast<float>(w.data[static_cast<size_t>(i)] - lr * v[i]);
      }
    }
  }

 private:
  static ParamArray& resolve(Plan& plan, const std::string& name) {
    auto slash = name.find('/');
    YKD_CHECK(slash != std::string::npos, "sgd: bad gradient key ", name);
    std::string coll = name.substr(0, slash);
    std::string local = name.substr(slash + 1);
    if (coll == "backbone") return plan.backbone->get(local);
    if (coll == "fe") return plan.student_fe->get(local);
    if (coll == "head") return plan.student_head->params.get(local);
    fail("sgd: unknown collection ", coll);
  }

  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

void run_training(const Dataset& ds, Plan& plan, const TrainConfig& cfg,
                  TrainReport* report, const EvalHook& eval,
                  const std::function<ModelState()>& snapshot) {
  int n = static_cast<int>(ds.samples.size());
  Sgd sgd(cfg.momentum);
  Rng base_rng(cfg.seed);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = base_rng.fork(0x5e0c0000ull + static_cast<uint64_t>(epoch));
    epoch_rng.shuffle(order);
    double lr = cfg.lr;
    if (cfg.lr_decay_epochs > 0) {
      lr *= std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_epochs);
    }

    double ep_sup = 0, ep_box = 0, ep_rpn = 0, ep_mask = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      int count = std::min(cfg.batch_size, n - start);
      std::vector<ImageResult> results(static_cast<size_t>(count));
      std::vector<std::exception_ptr> errors(static_cast<size_t>(count));

      auto work = [&](int k) {
        int idx = order[static_cast<size_t>(start + k)];
        Rng img_rng = base_rng.fork(
            (static_cast<uint64_t>(epoch) << 32) ^ static_cast<uint64_t>(idx) ^ 0xa51ull);
        try {
          results[static_cast<size_t>(k)] =
              process_image(ds.samples[static_cast<size_t>(idx)], plan, cfg, img_rng);
        } catch (...) {
          errors[static_cast<size_t>(k)] = std::current_exception();
        }
      };

      int workers = std::min(cfg.threads, count);
      if (workers <= 1) {
        for (int k = 0; k < count; ++k) work(k);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            for (int k = w; k < count; k += workers) work(k);
          });
        }
        for (auto& th : pool) th.join();
      }
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }

      // Image-ordered accumulation: gradients are summed in batch order,
      // so results do not depend on the worker count.
      std::map<std::string, Tensor> grads;
      for (auto& r : results) {
        for (auto& [name, g] : r.grads) {
          auto [it, inserted] = grads.try_emplace(name, g);
          if (!inserted) {
            Tensor& acc = it->second;
            for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
          }
        }
        ep_sup += r.sup;
        ep_box += r.kd_box;
        ep_rpn += r.kd_rpn;
        ep_mask += r.kd_mask;
      }
      sgd.step(plan, grads, 1.0 / count, lr);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss_sup = ep_sup / n;
    m.loss_kd_box = ep_box / n;
    m.loss_kd_rpn = ep_rpn / n;
    m.loss_kd_mask = ep_mask / n;
    if (eval) m.map_all = eval(snapshot());
    if (report) {
      report->epochs.push_back(m);
      double total = total_loss(m.loss_sup, m.loss_kd_box, m.loss_kd_rpn, m.loss_kd_mask, cfg.kd);
      if (epoch == 0) report->first_epoch_loss = total;
      report->last_epoch_loss = total;
    }
  }
  if (report) report->live_param_collections = plan.live_collections();
}

}  // namespace

ModelState train_base(const Dataset& dataset, const TrainConfig& cfg,
                      const std::vector<int>& base_classes, TrainReport* report,
                      const EvalHook& eval) {
  cfg.validate();
  YKD_CHECK(!dataset.samples.empty(), "train_base: empty dataset");
  std::vector<int> classes = base_classes.empty() ? classes_in(dataset) : base_classes;
  YKD_CHECK(!classes.empty(), "train_base: no classes to learn");

  ModelState model = build_model(classes, cfg.arch, cfg.seed);
  Plan plan;
  plan.backbone = &model.backbone;
  plan.backbone_trainable = true;
  plan.student_fe = &model.fes[0].params;
  plan.student_head = &model.heads[0];

  TrainReport local;
  TrainReport* rep = report ? report : &local;
  rep->backbone_sha_before = model.backbone.sha256_hex();
  auto snapshot = [&]() { return model; };
  run_training(dataset, plan, cfg, rep, eval, snapshot);
  rep->backbone_sha_after = model.backbone.sha256_hex();

  model.backbone_frozen = true;  // frozen for all incremental steps
  return model;
}

ModelState increment_step(const ModelState& state, const Dataset& dataset_t,
                          const std::vector<int>& new_classes, const TrainConfig& cfg,
                          TrainReport* report, const EvalHook& eval) {
  cfg.validate();
  YKD_CHECK(!dataset_t.samples.empty(), "increment_step: empty dataset");
  YKD_CHECK(!new_classes.empty(), "increment_step: no new classes");
  YKD_CHECK(!state.heads.empty() && !state.fes.empty(), "increment_step: malformed state");
  {
    std::set<int> allowed(new_classes.begin(), new_classes.end());
    for (const auto& s : dataset_t.samples) {
      for (const auto& a : s.annotations) {
        YKD_CHECK(allowed.count(a.class_id), "increment_step: image ", s.image_id,
                  " carries out-of-step class ", a.class_id);
      }
    }
  }

  ModelState out = state;
  int teacher_idx = out.latest_head_index();
  const std::vector<int>& old_domain = out.heads[static_cast<size_t>(teacher_idx)].class_domain;
  for (int c : new_classes) {
    YKD_CHECK(std::find(old_domain.begin(), old_domain.end(), c) == old_domain.end(),
              "increment_step: class ", c, " already covered by the checkpoint");
  }
  int new_step = out.heads[static_cast<size_t>(teacher_idx)].step + 1;

  // All structural mutations happen before any pointer into the state is
  // taken (the vectors reallocate).
  int source_branch = static_cast<int>(out.fes.size()) - 1;
  if (cfg.mode == TrainMode::kFinetune) {
    FeBranch& fe = out.fes.back();
    fe.classes.insert(fe.classes.end(), new_classes.begin(), new_classes.end());
    std::sort(fe.classes.begin(), fe.classes.end());
  } else {
    clone_branch(out, source_branch, new_step, new_classes);
  }
  out.heads.push_back(
      expand_head(out.heads[static_cast<size_t>(teacher_idx)], new_classes, cfg.arch, cfg.seed));

  Plan plan;
  plan.backbone = &out.backbone;
  plan.backbone_trainable = false;  // frozen during all steps
  plan.num_new = static_cast<int>(new_classes.size());
  plan.student_fe = &out.fes.back().params;
  plan.student_head = &out.heads.back();
  if (cfg.mode != TrainMode::kFinetune) {
    plan.teacher_head = &out.heads[static_cast<size_t>(teacher_idx)];
  }
  if (cfg.mode == TrainMode::kKdFrozen) {
    plan.teacher_fe = &out.fes[static_cast<size_t>(source_branch)].params;
  }

  TrainReport local;
  TrainReport* rep = report ? report : &local;
  rep->backbone_sha_before = out.backbone.sha256_hex();
  if (plan.teacher_head) {
    rep->teacher_sha_before = plan.teacher_head->params.sha256_hex();
  }

  auto snapshot = [&]() { return out; };
  run_training(dataset_t, plan, cfg, rep, eval, snapshot);

  rep->backbone_sha_after = out.backbone.sha256_hex();
  if (plan.teacher_head) {
    rep->teacher_sha_after = plan.teacher_head->params.sha256_hex();
    YKD_CHECK(rep->teacher_sha_before == rep->teacher_sha_after,
              "increment_step: teacher head drifted during training");
  }
  YKD_CHECK(rep->backbone_sha_before == rep->backbone_sha_after,
            "increment_step: frozen backbone drifted during training");

  // Probe the Y-shape contract: identical feature tensors reach both
  // heads in ykd mode; the kd_frozen teacher sees its own branch.
  if (plan.teacher_head && !dataset_t.samples.empty()) {
    const Tensor& img = dataset_t.samples[0].pixels;
    Tensor student_feats = forward_features(out, static_cast<int>(out.fes.size()) - 1, img);
    Tensor teacher_feats = cfg.mode == TrainMode::kYkd
                               ? student_feats
                               : forward_features(out, source_branch, img);
    double gap = 0.0;
    for (int64_t i = 0; i < student_feats.numel(); ++i) {
      gap = std::max(gap, std::abs(student_feats[i] - teacher_feats[i]));
    }
    rep->teacher_student_feature_gap = gap;
  }

  if (cfg.mode != TrainMode::kFinetune) out.fes.back().frozen = true;
  return out;
}

ModelState joint_train(const Dataset& dataset, const TrainConfig& cfg,
                       const std::vector<int>& classes, TrainReport* report,
                       const EvalHook& eval) {
  ModelState model = train_base(dataset, cfg, classes, report, eval);
  YKD_CHECK(model.fes.size() == 1, "joint_train: expected a single FE branch");
  return model;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_metrics_csv: cannot open ", path);
  f << "epoch,loss_sup,loss_kd_box,loss_kd_rpn,loss_kd_mask,map_all\n";
  for (const auto& m : rows) {
    f << m.epoch << ',' << m.loss_sup << ',' << m.loss_kd_box << ',' << m.loss_kd_rpn
      << ',' << m.loss_kd_mask << ',';
    if (std::isnan(m.map_all)) {
      f << "";
    } else {
      f << m.map_all;
    }
    f << "\n";
  }
  YKD_CHECK(f.good(), "write_metrics_csv: write failed for ", path);
}

}  // namespace ykd

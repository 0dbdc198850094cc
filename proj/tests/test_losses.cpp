#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ykd/losses.hpp"
#include "ykd/rng.hpp"

using namespace ykd;
using ykd::testing::grad_check;

namespace {

Tensor logits_of_probs(const std::vector<std::vector<double>>& rows) {
  int r = static_cast<int>(rows.size());
  int c = static_cast<int>(rows[0].size());
  Tensor t({r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      t.at(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)] > 0
                       ? std::log(rows[static_cast<size_t>(i)][static_cast<size_t>(j)])
                       : -40.0;
  return t;
}

Tensor tensor2d(const std::vector<std::vector<double>>& rows) {
  int r = static_cast<int>(rows.size());
  int c = static_cast<int>(rows[0].size());
  Tensor t({r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) t.at(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
  return t;
}

// Random probability rows via softmax of normals.
Tensor random_prob_rows(int r, int c, Rng& rng) {
  Tensor t({r, c});
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      t.at(i, j) = std::exp(rng.normal(0.0, 1.0));
      s += t.at(i, j);
    }
    for (int j = 0; j < c; ++j) t.at(i, j) /= s;
  }
  return t;
}

}  // namespace

TEST_CASE("kd_loss reproduces the scalar oracle") {
  // Independent scalar arithmetic for teacher = student = [0.7, 0.3].
  double oracle = -(0.7 * std::log(0.7) + 0.3 * std::log(0.3)) / 2.0;
  CHECK(oracle == doctest::Approx(0.30543215102744675).epsilon(1e-12));

  ad::Tape tape;
  Tensor probs = tensor2d({{0.7, 0.3}});
  ad::Value student = tape.constant(probs);
  double got = kd_loss(probs, student).scalar();
  CHECK(std::abs(got - oracle) < 1e-12);

  // One-hot teacher matched exactly: -1 * ln(1) = 0.
  Tensor onehot = tensor2d({{1.0, 0.0}});
  double zero = kd_loss(onehot, tape.constant(onehot)).scalar();
  CHECK(std::abs(zero) < 1e-12);

  CHECK_THROWS_WITH_AS(kd_loss(tensor2d({{0.9, 0.3}}), student),
                       doctest::Contains("not a probability"), Error);
  CHECK_THROWS_AS(kd_loss(tensor2d({{0.5, 0.25, 0.25}}), student), Error);
}

TEST_CASE("kd_loss gradient vanishes when student matches teacher") {
  // Student probabilities renormalized over old classes from a larger
  // softmax; at student == teacher the gradient w.r.t. logits is zero.
  Rng rng(31);
  Tensor teacher = random_prob_rows(3, 4, rng);
  Tensor logits({3, 6});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) logits.at(r, c) = std::log(teacher.at(r, c));
    logits.at(r, 4) = -1.3;  // new-class logits, arbitrary
    logits.at(r, 5) = 0.4;
  }
  ad::Tape tape;
  ad::Value z = tape.leaf(logits, true);
  ad::Value soft = ad::softmax_rows(z);
  ad::Value renorm = ad::normalize_rows(ad::gather_cols(soft, {0, 1, 2, 3}));
  ad::Value loss = kd_loss(teacher, renorm);
  tape.backward(loss);
  const Tensor& g = tape.grad(z.id);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(std::abs(g[i]) < 1e-9);
}

TEST_CASE("unbiased_kd_box reproduces the scalar oracle") {
  double oracle = -(0.6 * std::log(0.6) + 0.4 * std::log(0.4)) / 2.0;
  CHECK(oracle == doctest::Approx(0.33650583350462826).epsilon(1e-12));

  ad::Tape tape;
  ad::Value t_logit = tape.constant(logits_of_probs({{0.6, 0.4}}));
  ad::Value s_logit = tape.constant(logits_of_probs({{0.3, 0.4, 0.3}}));
  ad::Value t_reg = tape.constant(Tensor({1, 4}));
  ad::Value s_reg = tape.constant(Tensor({1, 8}));
  // Teacher's best foreground prob is 0.4 <= tau_reg: no regression rows.
  double got = unbiased_kd_box(t_logit, s_logit, t_reg, s_reg, 1, 0.5).scalar();
  CHECK(std::abs(got - oracle) < 1e-9);
}

TEST_CASE("unbiased_kd_box degenerates to kd_loss when no new classes") {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    int r = rng.uniform_int(1, 6), c = rng.uniform_int(2, 5);
    Tensor t_logits({r, c}), s_logits({r, c});
    for (auto& v : t_logits.data) v = rng.normal(0.0, 1.5);
    for (auto& v : s_logits.data) v = rng.normal(0.0, 1.5);
    ad::Tape tape;
    ad::Value tl = tape.constant(t_logits);
    ad::Value sl = tape.constant(s_logits);
    ad::Value treg = tape.constant(Tensor({r, 4 * (c - 1)}));
    ad::Value sreg = tape.constant(Tensor({r, 4 * (c - 1)}));
    double unkd = unbiased_kd_box(tl, sl, treg, sreg, 0, 2.0).scalar();  // gate off
    double kd = kd_loss(ad::softmax_rows(tl), ad::softmax_rows(sl)).scalar();
    CHECK(std::abs(unkd - kd) < 1e-12);
  }
}

TEST_CASE("unbiased_kd_box ignores how new-class mass is split") {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    int r = rng.uniform_int(1, 4);
    int c_old = rng.uniform_int(1, 3);
    int k = rng.uniform_int(1, 4);
    Tensor teacher({r, c_old + 1});
    for (int i = 0; i < r; ++i) {
      double s = 0;
      for (int j = 0; j <= c_old; ++j) {
        teacher.at(i, j) = std::exp(rng.normal(0, 1));
        s += teacher.at(i, j);
      }
      for (int j = 0; j <= c_old; ++j) teacher.at(i, j) = std::log(teacher.at(i, j) / s);
    }
    // Two students sharing bg + new-class total mass per row.
    Tensor sa({r, c_old + 1 + k}), sb({r, c_old + 1 + k});
    for (int i = 0; i < r; ++i) {
      std::vector<double> base(static_cast<size_t>(c_old + 1));
      double s = 0;
      for (auto& v : base) {
        v = std::exp(rng.normal(0, 1));
        s += v;
      }
      double extra = std::exp(rng.normal(0, 1));
      s += extra;  // mass reserved for bg + new group
      double group = (base[0] + extra) / s;
      auto split = [&](Tensor& dst) {
        std::vector<double> cuts(static_cast<size_t>(k + 1));
        double cs = 0;
        for (auto& v : cuts) {
          v = rng.uniform(0.01, 1.0);
          cs += v;
        }
        dst.at(i, 0) = std::log(group * cuts[0] / cs);
        for (int j = 0; j < c_old; ++j) dst.at(i, 1 + j) = std::log(base[static_cast<size_t>(j + 1)] / s);
        for (int j = 0; j < k; ++j)
          dst.at(i, c_old + 1 + j) = std::log(group * cuts[static_cast<size_t>(j + 1)] / cs);
      };
      split(sa);
      split(sb);
    }
    ad::Tape tape;
    ad::Value treg = tape.constant(Tensor({r, 4 * c_old}));
    ad::Value sreg = tape.constant(Tensor({r, 4 * (c_old + k)}));
    double la = unbiased_kd_box(tape.constant(teacher), tape.constant(sa), treg, sreg, k, 2.0).scalar();
    double lb = unbiased_kd_box(tape.constant(teacher), tape.constant(sb), treg, sreg, k, 2.0).scalar();
    CHECK(std::abs(la - lb) < 1e-10);
  }

  // The spec's concrete case: bg mass moved entirely into new classes.
  ad::Tape tape;
  ad::Value tl = tape.constant(logits_of_probs({{0.6, 0.4}}));
  ad::Value treg = tape.constant(Tensor({1, 4}));
  ad::Value sreg = tape.constant(Tensor({1, 8}));
  double with_bg =
      unbiased_kd_box(tl, tape.constant(logits_of_probs({{0.3, 0.4, 0.3}})), treg, sreg, 1, 0.5)
          .scalar();
  double no_bg =
      unbiased_kd_box(tl, tape.constant(logits_of_probs({{0.0, 0.4, 0.6}})), treg, sreg, 1, 0.5)
          .scalar();
  CHECK(std::abs(with_bg - no_bg) < 1e-10);
}

TEST_CASE("unbiased_kd_box gated regression term") {
  ad::Tape tape;
  // Teacher confident on old class 1 (prob 0.8 > 0.5): row gated.
  ad::Value tl = tape.constant(logits_of_probs({{0.2, 0.8}}));
  ad::Value sl = tape.constant(logits_of_probs({{0.2, 0.8, 0.0}}));
  Tensor treg({1, 4});
  treg.data = {1.0, 2.0, -1.0, 0.5};
  Tensor sreg({1, 8});
  sreg.data = {0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0};  // new-class slots ignored
  ad::Value l = unbiased_kd_box(tl, sl, tape.constant(treg), tape.constant(sreg), 1, 0.5);
  double cls = -(0.2 * std::log(0.2) + 0.8 * std::log(0.8)) / 2.0;
  double reg = (1.0 + 4.0 + 1.0 + 0.25) / 4.0;
  CHECK(l.scalar() == doctest::Approx(cls + reg).epsilon(1e-9));
}

TEST_CASE("rpn_kd_loss hand cases") {
  ad::Tape tape;
  Tensor s1({3, 1});
  s1.data = {0.5, -1.0, 2.0};
  Tensor w1({3, 4});
  for (auto& v : w1.data) v = 0.3;
  ad::Value t_s = tape.constant(s1), s_s = tape.constant(s1);
  ad::Value t_w = tape.constant(w1), s_w = tape.constant(w1);
  CHECK(rpn_kd_loss(t_s, s_s, t_w, s_w, 0.7).scalar() == doctest::Approx(0.0));

  // Single anchor: (2 - 0)^2 = 4, deltas equal.
  Tensor ts({1, 1}), ss({1, 1}), om({1, 4});
  ts[0] = 2.0;
  ss[0] = 0.0;
  double v = rpn_kd_loss(tape.constant(ts), tape.constant(ss), tape.constant(om),
                         tape.constant(om), 0.5)
                 .scalar();
  CHECK(v == doctest::Approx(4.0).epsilon(1e-12));

  // All teacher objectness below the gate: delta differences are free.
  Tensor low({2, 1});
  low.data = {-3.0, -4.0};
  Tensor wa({2, 4}), wb({2, 4});
  for (auto& x : wb.data) x = 5.0;
  double only_obj = rpn_kd_loss(tape.constant(low), tape.constant(low), tape.constant(wa),
                                tape.constant(wb), 0.7)
                        .scalar();
  CHECK(only_obj == doctest::Approx(0.0));
}

TEST_CASE("mask_kd_loss matches the single-pixel oracle and is replication-invariant") {
  double oracle = -(0.7 * std::log(0.7) + 0.3 * std::log(0.3)) / 2.0;
  ad::Tape tape;
  Tensor one({1, 2, 1, 1});
  one[0] = std::log(0.7);
  one[1] = std::log(0.3);
  double got = mask_kd_loss(tape.constant(one), tape.constant(one)).scalar();
  CHECK(got == doctest::Approx(oracle).epsilon(1e-12));

  // Replicate the pixel 4x: mean over R leaves the value unchanged.
  Tensor rep({1, 2, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 4; ++p) rep[c * 4 + p] = one[c];
  double rep_loss = mask_kd_loss(tape.constant(rep), tape.constant(rep)).scalar();
  CHECK(rep_loss == doctest::Approx(oracle).epsilon(1e-12));

  // Gradient vanishes at equality.
  ad::Tape t2;
  Rng rng(41);
  Tensor logits({2, 3, 2, 2});
  for (auto& x : logits.data) x = rng.normal(0.0, 1.0);
  ad::Value student = t2.leaf(logits, true);
  ad::Value loss = mask_kd_loss(t2.constant(logits), student);
  t2.backward(loss);
  const Tensor& g = t2.grad(student.id);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(std::abs(g[i]) < 1e-9);
}

TEST_CASE("gradient checks across the distillation family") {
  Rng rng(55);
  for (int trial = 0; trial < 4; ++trial) {
    int r = rng.uniform_int(2, 6);
    int c_old = rng.uniform_int(1, 4);
    int k = rng.uniform_int(0, 3);
    Tensor t_logits({r, c_old + 1}), s_logits({r, c_old + 1 + k});
    Tensor t_reg({r, 4 * c_old}), s_reg({r, 4 * (c_old + k)});
    for (auto& v : t_logits.data) v = rng.normal(0, 1.2);
    for (auto& v : s_logits.data) v = rng.normal(0, 1.2);
    for (auto& v : t_reg.data) v = rng.normal(0, 0.7);
    for (auto& v : s_reg.data) v = rng.normal(0, 0.7);

    auto res = grad_check(
        [&](ad::Tape& t, const std::vector<ad::Value>& v) {
          return unbiased_kd_box(t.constant(t_logits), v[0], t.constant(t_reg), v[1], k,
                                 0.3);
        },
        {s_logits, s_reg});
    CHECK(res.max_rel_err < 1e-4);

    Tensor teacher_probs = random_prob_rows(r, c_old + 1, rng);
    res = grad_check(
        [&](ad::Tape& t, const std::vector<ad::Value>& v) {
          auto probs = ad::softmax_rows(v[0]);
          return kd_loss(teacher_probs, probs);
        },
        {s_logits.shape == std::vector<int>{r, c_old + 1} ? s_logits
                                                          : random_prob_rows(r, c_old + 1, rng)});
    CHECK(res.max_rel_err < 1e-4);

    int a = rng.uniform_int(2, 8);
    Tensor ts({a, 1}), ss({a, 1}), tw({a, 4}), sw({a, 4});
    for (auto& v : ts.data) v = rng.normal(0.5, 1.5);
    for (auto& v : ss.data) v = rng.normal(0, 1.5);
    for (auto& v : tw.data) v = rng.normal(0, 1);
    for (auto& v : sw.data) v = rng.normal(0, 1);
    res = grad_check(
        [&](ad::Tape& t, const std::vector<ad::Value>& v) {
          return rpn_kd_loss(t.constant(ts), v[0], t.constant(tw), v[1], 0.6);
        },
        {ss, sw});
    CHECK(res.max_rel_err < 1e-4);

    int n = rng.uniform_int(1, 3), cm = rng.uniform_int(2, 4);
    Tensor tm({n, cm, 2, 2}), sm({n, cm, 2, 2});
    for (auto& v : tm.data) v = rng.normal(0, 1);
    for (auto& v : sm.data) v = rng.normal(0, 1);
    res = grad_check(
        [&](ad::Tape& t, const std::vector<ad::Value>& v) {
          return mask_kd_loss(t.constant(tm), v[0]);
        },
        {sm});
    CHECK(res.max_rel_err < 1e-4);
  }
}

// ---------------------------------------------------------------------------
// supervised loss
// ---------------------------------------------------------------------------

namespace {

struct Fixture {
  ArchConfig arch;
  SupervisedTargets targets;
  std::vector<Box> anchors;
  std::vector<Box> proposals;
  std::vector<int> domain;
};

Fixture make_fixture() {
  Fixture f;
  f.arch.mask_roi_size = 4;
  f.arch.mask_size = 8;
  f.domain = {1, 2, 3};
  f.targets.image_w = 32;
  f.targets.image_h = 32;
  Mask m(32, 32);
  for (int y = 8; y < 24; ++y)
    for (int x = 6; x < 22; ++x) m.set(x, y, 1);
  f.targets.boxes.push_back(Box{6, 8, 22, 24});
  f.targets.class_ids.push_back(2);
  f.targets.masks.push_back(m);
  f.anchors = {Box{6, 8, 22, 24}, Box{0, 0, 8, 8}, Box{20, 20, 32, 32},
               Box{4, 10, 20, 26}};
  f.proposals = {Box{6, 8, 22, 24}, Box{0, 0, 10, 10}};
  return f;
}

HeadOutputs outputs_from(ad::Tape& tape, const Fixture& f, const Tensor& obj,
                         const Tensor& rpn_dlt, const Tensor& cls, const Tensor& reg,
                         const Tensor& mask, bool trainable = false) {
  HeadOutputs out;
  out.class_domain = f.domain;
  out.rpn.objectness = tape.leaf(obj, trainable);
  out.rpn.deltas = tape.leaf(rpn_dlt, trainable);
  out.rpn.anchors = f.anchors;
  out.proposals = f.proposals;
  out.roi.cls_logits = tape.leaf(cls, trainable);
  out.roi.reg_deltas = tape.leaf(reg, trainable);
  out.roi.mask_logits = tape.leaf(mask, trainable);
  return out;
}

}  // namespace

TEST_CASE("supervised_loss: perfect predictions score near zero") {
  Fixture f = make_fixture();
  int A = static_cast<int>(f.anchors.size());
  int P = static_cast<int>(f.proposals.size());
  int C = 3, S = f.arch.mask_size;

  Tensor obj({A, 1});
  obj[0] = 12.0;   // anchor 0 == gt
  obj[1] = -12.0;  // far anchors
  obj[2] = -12.0;
  obj[3] = 12.0;  // overlaps gt heavily -> positive
  Tensor rpn_dlt({A, 4});
  BoxTransform xf;
  auto enc3 = xf.encode(f.anchors[3], f.targets.boxes[0]);
  for (int d = 0; d < 4; ++d) rpn_dlt.at(3, d) = enc3[static_cast<size_t>(d)];

  Tensor cls({P, C + 1});
  cls.at(0, 2) = 14.0;  // proposal 0 is class 2 (column 2)
  cls.at(1, 0) = 14.0;  // proposal 1 is background
  Tensor reg({P, 4 * C});  // proposal 0 == gt box: zero deltas are exact
  Tensor mask({P, C, S, S});
  Tensor grid = crop_mask_to_grid(f.targets.masks[0], f.proposals[0], S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      mask[((0 * C + 1) * S + y) * S + x] = grid.at(y, x) > 0.5 ? 14.0 : -14.0;

  ad::Tape tape;
  HeadOutputs out = outputs_from(tape, f, obj, rpn_dlt, cls, reg, mask);
  auto parts = supervised_loss(out, f.targets, f.arch);
  CHECK(parts.total.scalar() < 0.05);
  CHECK(parts.total.scalar() >= 0.0);
}

TEST_CASE("supervised_loss: empty annotations leave only background terms") {
  Fixture f = make_fixture();
  f.targets.boxes.clear();
  f.targets.class_ids.clear();
  f.targets.masks.clear();
  int A = static_cast<int>(f.anchors.size());
  int P = static_cast<int>(f.proposals.size());
  Tensor obj({A, 1}), rpn_dlt({A, 4}), cls({P, 4}), reg({P, 12}),
      mask({P, 3, f.arch.mask_size, f.arch.mask_size});
  obj.data = {0.3, -0.7, 0.2, 0.1};

  ad::Tape tape;
  HeadOutputs out = outputs_from(tape, f, obj, rpn_dlt, cls, reg, mask);
  auto parts = supervised_loss(out, f.targets, f.arch);
  CHECK(parts.rpn_box.scalar() == 0.0);
  CHECK(parts.box.scalar() == 0.0);
  CHECK(parts.mask.scalar() == 0.0);
  CHECK(parts.rpn_objectness.scalar() > 0.0);
  CHECK(parts.cls.scalar() > 0.0);
  CHECK(parts.total.scalar() ==
        doctest::Approx(parts.rpn_objectness.scalar() + parts.cls.scalar()));
}

TEST_CASE("supervised_loss: out-of-domain target class is rejected") {
  Fixture f = make_fixture();
  f.targets.class_ids[0] = 9;
  int A = static_cast<int>(f.anchors.size());
  int P = static_cast<int>(f.proposals.size());
  Tensor obj({A, 1}), rpn_dlt({A, 4}), cls({P, 4}), reg({P, 12}),
      mask({P, 3, f.arch.mask_size, f.arch.mask_size});
  ad::Tape tape;
  HeadOutputs out = outputs_from(tape, f, obj, rpn_dlt, cls, reg, mask);
  CHECK_THROWS_WITH_AS(supervised_loss(out, f.targets, f.arch),
                       doctest::Contains("outside head domain"), Error);
}

TEST_CASE("supervised_loss gradients match finite differences") {
  Fixture f = make_fixture();
  Rng rng(77);
  int A = static_cast<int>(f.anchors.size());
  int P = static_cast<int>(f.proposals.size());
  int C = 3, S = f.arch.mask_size;
  Tensor obj({A, 1}), rpn_dlt({A, 4}), cls({P, C + 1}), reg({P, 4 * C}),
      mask({P, C, S, S});
  for (auto& v : obj.data) v = rng.normal(0, 1);
  for (auto& v : rpn_dlt.data) v = rng.normal(0, 0.5);
  for (auto& v : cls.data) v = rng.normal(0, 1);
  for (auto& v : reg.data) v = rng.normal(0, 0.5);
  for (auto& v : mask.data) v = rng.normal(0, 1);

  auto res = grad_check(
      [&](ad::Tape& t, const std::vector<ad::Value>& v) {
        HeadOutputs out;
        out.class_domain = f.domain;
        out.rpn.objectness = v[0];
        out.rpn.deltas = v[1];
        out.rpn.anchors = f.anchors;
        out.proposals = f.proposals;
        out.roi.cls_logits = v[2];
        out.roi.reg_deltas = v[3];
        out.roi.mask_logits = v[4];
        return supervised_loss(out, f.targets, f.arch).total;
      },
      {obj, rpn_dlt, cls, reg, mask});
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("total_loss is the weighted sum of Eq. 6") {
  KDWeights w;
  CHECK(total_loss(1.0, 0.1, 0.2, 0.3, w) == doctest::Approx(1.6));
  w.lambda1 = 2.0;
  CHECK(total_loss(1.0, 0.1, 0.2, 0.3, w) == doctest::Approx(1.7));
  KDWeights off{0.0, 0.0, 0.0};
  CHECK(total_loss(0.8, 5.0, 5.0, 5.0, off) == doctest::Approx(0.8));

  ad::Tape tape;
  auto c = [&](double x) { return tape.constant(Tensor::scalar(x)); };
  CHECK(total_loss(c(1.0), c(0.1), c(0.2), c(0.3), KDWeights{}).scalar() ==
        doctest::Approx(1.6));
  KDWeights bad{-1.0, 0.0, 0.0};
  CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.0, 1.0, bad), Error);
}

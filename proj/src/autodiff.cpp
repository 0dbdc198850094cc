#include "ykd/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace ykd::ad {

Value Tape::leaf(Tensor v, bool requires_grad) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::make_node(Tensor v, const std::vector<int>& parents, BackFn backprop) {
  Node n;
  n.value = std::move(v);
  for (int p : parents) {
    if (nodes_[static_cast<size_t>(p)].requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Tensor(n.value.shape);
    n.grad_alloc = true;
  }
  return n.grad;
}

void Tape::backward(Value root) {
  YKD_CHECK(root.tape == this, "backward: value from another tape");
  YKD_CHECK(value(root.id).numel() == 1, "backward: root must be scalar");
  for (auto& n : nodes_) {
    if (n.grad_alloc) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
  grad_ref(root.id).data[0] = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.requires_grad && n.backprop && n.grad_alloc) {
      n.backprop(*this, i);
    }
  }
}

namespace {

Tape& same_tape(Value a, Value b) {
  YKD_CHECK(a.tape == b.tape, "op: values from different tapes");
  return *a.tape;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Value add(Value a, Value b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(av.same_shape(bv), "add: shape mismatch");
  Tensor out = av;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  int ai = a.id, bi = b.id;
  return t.make_node(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_ref(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  });
}

Value sub(Value a, Value b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(av.same_shape(bv), "sub: shape mismatch");
  Tensor out = av;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  int ai = a.id, bi = b.id;
  return t.make_node(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_ref(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Value mul(Value a, Value b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(av.same_shape(bv), "mul: shape mismatch");
  Tensor out = av;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  int ai = a.id, bi = b.id;
  return t.make_node(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_ref(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

Value scale(Value a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a.id);
  for (auto& x : out.data) x *= s;
  int ai = a.id;
  return t.make_node(std::move(out), {ai}, [ai, s](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(ai);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
  });
}

Value relu(Value a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a.id);
  for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
  int ai = a.id;
  return t.make_node(std::move(out), {ai}, [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xv = tp.value(ai);
    Tensor& ga = tp.grad_ref(ai);
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > 0.0) ga[i] += g[i];
    }
  });
}

Value sigmoid(Value a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a.id);
  for (auto& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
  int ai = a.id;
  return t.make_node(std::move(out), {ai}, [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_ref(ai);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Value log_clamped(Value a, double eps) {
  Tape& t = *a.tape;
  Tensor out = t.value(a.id);
  for (auto& x : out.data) x = std::log(x < eps ? eps : x);
  int ai = a.id;
  return t.make_node(std::move(out), {ai}, [ai, eps](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xv = tp.value(ai);
    Tensor& ga = tp.grad_ref(ai);
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (xv[i] >= eps) ga[i] += g[i] / xv[i];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Value linear(Value x, Value w, Value b) {
  Tape& t = same_tape(x, w);
  const Tensor& xv = t.value(x.id);
  const Tensor& wv = t.value(w.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(xv.rank() == 2 && wv.rank() == 2, "linear: need 2-D inputs");
  int R = xv.dim(0), K = xv.dim(1), N = wv.dim(0);
  YKD_CHECK(wv.dim(1) == K, "linear: weight cols ", wv.dim(1), " != input cols ", K);
  YKD_CHECK(bv.numel() == N, "linear: bias size mismatch");
  Tensor out({R, N});
  for (int r = 0; r < R; ++r) {
    const double* xr = &xv.data[static_cast<size_t>(r) * K];
    double* orow = &out.data[static_cast<size_t>(r) * N];
    for (int n = 0; n < N; ++n) {
      const double* wn = &wv.data[static_cast<size_t>(n) * K];
      double acc = bv[n];
      for (int k = 0; k < K; ++k) acc += xr[k] * wn[k];
      orow[n] = acc;
    }
  }
  int xi = x.id, wi = w.id, bi = b.id;
  return t.make_node(std::move(out), {xi, wi, bi}, [xi, wi, bi, R, K, N](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xv2 = tp.value(xi);
    const Tensor& wv2 = tp.value(wi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_ref(xi);
      for (int r = 0; r < R; ++r) {
        const double* gr = &g.data[static_cast<size_t>(r) * N];
        double* gxr = &gx.data[static_cast<size_t>(r) * K];
        for (int n = 0; n < N; ++n) {
          double gv = gr[n];
          if (gv == 0.0) continue;
          const double* wn = &wv2.data[static_cast<size_t>(n) * K];
          for (int k = 0; k < K; ++k) gxr[k] += gv * wn[k];
        }
      }
    }
    if (tp.requires_grad(wi)) {
      Tensor& gw = tp.grad_ref(wi);
      for (int r = 0; r < R; ++r) {
        const double* gr = &g.data[static_cast<size_t>(r) * N];
        const double* xr = &xv2.data[static_cast<size_t>(r) * K];
        for (int n = 0; n < N; ++n) {
          double gv = gr[n];
          if (gv == 0.0) continue;
          double* gwn = &gw.data[static_cast<size_t>(n) * K];
          for (int k = 0; k < K; ++k) gwn[k] += gv * xr[k];
        }
      }
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_ref(bi);
      for (int r = 0; r < R; ++r) {
        const double* gr = &g.data[static_cast<size_t>(r) * N];
        for (int n = 0; n < N; ++n) gb[n] += gr[n];
      }
    }
  });
}

Value matmul_const(Value a, const Tensor& b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  YKD_CHECK(av.rank() == 2 && b.rank() == 2 && av.dim(1) == b.dim(0),
            "matmul_const: shape mismatch");
  int R = av.dim(0), C = av.dim(1), G = b.dim(1);
  Tensor out({R, G});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      double x = av.at(r, c);
      if (x == 0.0) continue;
      const double* brow = &b.data[static_cast<size_t>(c) * G];
      double* orow = &out.data[static_cast<size_t>(r) * G];
      for (int g = 0; g < G; ++g) orow[g] += x * brow[g];
    }
  }
  int ai = a.id;
  Tensor bc = b;
  return t.make_node(std::move(out), {ai}, [ai, bc, R, C, G](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(ai);
    for (int r = 0; r < R; ++r) {
      const double* gr = &g.data[static_cast<size_t>(r) * G];
      double* gar = &ga.data[static_cast<size_t>(r) * C];
      for (int c = 0; c < C; ++c) {
        const double* brow = &bc.data[static_cast<size_t>(c) * G];
        double acc = 0.0;
        for (int k = 0; k < G; ++k) acc += gr[k] * brow[k];
        gar[c] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// row ops
// ---------------------------------------------------------------------------

Value softmax_rows(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 2, "softmax_rows: need 2-D input");
  int R = xv.dim(0), C = xv.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    const double* xr = &xv.data[static_cast<size_t>(r) * C];
    double* orow = &out.data[static_cast<size_t>(r) * C];
    double mx = xr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      orow[c] = std::exp(xr[c] - mx);
      s += orow[c];
    }
    for (int c = 0; c < C; ++c) orow[c] /= s;
  }
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, R, C](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int r = 0; r < R; ++r) {
      const double* gr = &g.data[static_cast<size_t>(r) * C];
      const double* yr = &y.data[static_cast<size_t>(r) * C];
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += gr[c] * yr[c];
      double* gxr = &gx.data[static_cast<size_t>(r) * C];
      for (int c = 0; c < C; ++c) gxr[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Value normalize_rows(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 2, "normalize_rows: need 2-D input");
  int R = xv.dim(0), C = xv.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += xv.at(r, c);
    YKD_CHECK(s > 0.0, "normalize_rows: non-positive row sum");
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) / s;
  }
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, R, C](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.value(self);
    const Tensor& xv2 = tp.value(xi);
    Tensor& gx = tp.grad_ref(xi);
    for (int r = 0; r < R; ++r) {
      double s = 0.0, dot = 0.0;
      for (int c = 0; c < C; ++c) s += xv2.at(r, c);
      for (int c = 0; c < C; ++c) dot += g.at(r, c) * y.at(r, c);
      for (int c = 0; c < C; ++c) gx.at(r, c) += (g.at(r, c) - dot) / s;
    }
  });
}

Value gather_cols(Value x, const std::vector<int>& idx) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 2, "gather_cols: need 2-D input");
  int R = xv.dim(0), C = xv.dim(1), K = static_cast<int>(idx.size());
  for (int c : idx) YKD_CHECK(c >= 0 && c < C, "gather_cols: index out of range");
  Tensor out({R, K});
  for (int r = 0; r < R; ++r)
    for (int k = 0; k < K; ++k) out.at(r, k) = xv.at(r, idx[static_cast<size_t>(k)]);
  int xi = x.id;
  std::vector<int> ix = idx;
  return t.make_node(std::move(out), {xi}, [xi, ix, R, K](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k) gx.at(r, ix[static_cast<size_t>(k)]) += g.at(r, k);
  });
}

Value gather_rows(Value x, const std::vector<int>& idx) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 2, "gather_rows: need 2-D input");
  int R = xv.dim(0), C = xv.dim(1), K = static_cast<int>(idx.size());
  for (int r : idx) YKD_CHECK(r >= 0 && r < R, "gather_rows: index out of range");
  Tensor out({K, C});
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c) out.at(k, c) = xv.at(idx[static_cast<size_t>(k)], c);
  int xi = x.id;
  std::vector<int> ix = idx;
  return t.make_node(std::move(out), {xi}, [xi, ix, C, K](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < C; ++c) gx.at(ix[static_cast<size_t>(k)], c) += g.at(k, c);
  });
}

// ---------------------------------------------------------------------------
// conv stack
// ---------------------------------------------------------------------------

namespace {

// Valid output range [o_lo, o_hi) for one kernel offset so that the
// input index o*stride + k - pad stays inside [0, in).
inline void conv_bounds(int in, int out, int k, int pad, int stride, int* o_lo, int* o_hi) {
  int lo = 0;
  while (lo < out && lo * stride + k - pad < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride + k - pad >= in) --hi;
  *o_lo = lo;
  *o_hi = hi;
}

}  // namespace

Value conv2d(Value x, Value w, Value b, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  const Tensor& wv = t.value(w.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(xv.rank() == 3 && wv.rank() == 4, "conv2d: bad ranks");
  int Ci = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  int O = wv.dim(0), K = wv.dim(2);
  YKD_CHECK(wv.dim(1) == Ci, "conv2d: weight input channels ", wv.dim(1),
            " != feature channels ", Ci);
  YKD_CHECK(wv.dim(3) == K, "conv2d: non-square kernel");
  YKD_CHECK(bv.numel() == O, "conv2d: bias size mismatch");
  int Ho = (H + 2 * pad - K) / stride + 1;
  int Wo = (W + 2 * pad - K) / stride + 1;
  YKD_CHECK(Ho > 0 && Wo > 0, "conv2d: output collapses to zero");
  Tensor out({O, Ho, Wo});
  for (int oc = 0; oc < O; ++oc) {
    double* oc_plane = &out.data[static_cast<size_t>(oc) * Ho * Wo];
    double bias = bv[oc];
    for (int i = 0; i < Ho * Wo; ++i) oc_plane[i] = bias;
    for (int ic = 0; ic < Ci; ++ic) {
      const double* x_plane = &xv.data[static_cast<size_t>(ic) * H * W];
      const double* w_k = &wv.data[(static_cast<size_t>(oc) * Ci + ic) * K * K];
      for (int ky = 0; ky < K; ++ky) {
        int oy0, oy1;
        conv_bounds(H, Ho, ky, pad, stride, &oy0, &oy1);
        for (int kx = 0; kx < K; ++kx) {
          double wval = w_k[ky * K + kx];
          int ox0, ox1;
          conv_bounds(W, Wo, kx, pad, stride, &ox0, &ox1);
          for (int oy = oy0; oy < oy1; ++oy) {
            int iy = oy * stride + ky - pad;
            const double* xrow = x_plane + static_cast<size_t>(iy) * W + (kx - pad);
            double* orow = oc_plane + static_cast<size_t>(oy) * Wo;
            if (stride == 1) {
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wval * xrow[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wval * xrow[ox * stride];
            }
          }
        }
      }
    }
  }
  int xi = x.id, wi = w.id, bi = b.id;
  return t.make_node(
      std::move(out), {xi, wi, bi},
      [xi, wi, bi, Ci, H, W, O, K, Ho, Wo, stride, pad](Tape& tp, int self) {
        const Tensor& g = tp.grad_ref(self);
        const Tensor& xv2 = tp.value(xi);
        const Tensor& wv2 = tp.value(wi);
        bool need_x = tp.requires_grad(xi);
        bool need_w = tp.requires_grad(wi);
        bool need_b = tp.requires_grad(bi);
        if (need_b) {
          Tensor& gb = tp.grad_ref(bi);
          for (int oc = 0; oc < O; ++oc) {
            const double* gp = &g.data[static_cast<size_t>(oc) * Ho * Wo];
            double acc = 0.0;
            for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
            gb[oc] += acc;
          }
        }
        if (!need_x && !need_w) return;
        Tensor* gx = need_x ? &tp.grad_ref(xi) : nullptr;
        Tensor* gw = need_w ? &tp.grad_ref(wi) : nullptr;
        for (int oc = 0; oc < O; ++oc) {
          const double* g_plane = &g.data[static_cast<size_t>(oc) * Ho * Wo];
          for (int ic = 0; ic < Ci; ++ic) {
            const double* x_plane = &xv2.data[static_cast<size_t>(ic) * H * W];
            const double* w_k = &wv2.data[(static_cast<size_t>(oc) * Ci + ic) * K * K];
            double* gx_plane = need_x ? &gx->data[static_cast<size_t>(ic) * H * W] : nullptr;
            double* gw_k =
                need_w ? &gw->data[(static_cast<size_t>(oc) * Ci + ic) * K * K] : nullptr;
            for (int ky = 0; ky < K; ++ky) {
              int oy0, oy1;
              conv_bounds(H, Ho, ky, pad, stride, &oy0, &oy1);
              for (int kx = 0; kx < K; ++kx) {
                int ox0, ox1;
                conv_bounds(W, Wo, kx, pad, stride, &ox0, &ox1);
                double wval = w_k[ky * K + kx];
                double wacc = 0.0;
                for (int oy = oy0; oy < oy1; ++oy) {
                  int iy = oy * stride + ky - pad;
                  const double* grow = g_plane + static_cast<size_t>(oy) * Wo;
                  const double* xrow = x_plane + static_cast<size_t>(iy) * W + (kx - pad);
                  if (need_x) {
                    double* gxrow = gx_plane + static_cast<size_t>(iy) * W + (kx - pad);
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox) gxrow[ox] += wval * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox) gxrow[ox * stride] += wval * grow[ox];
                    }
                  }
                  if (need_w) {
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox) wacc += xrow[ox] * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox) wacc += xrow[ox * stride] * grow[ox];
                    }
                  }
                }
                if (need_w) gw_k[ky * K + kx] += wacc;
              }
            }
          }
        }
      });
}

Value maxpool2(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 3, "maxpool2: need 3-D input");
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  YKD_CHECK(H % 2 == 0 && W % 2 == 0, "maxpool2: odd spatial size ", H, "x", W);
  int Ho = H / 2, Wo = W / 2;
  Tensor out({C, Ho, Wo});
  std::vector<int> argmax(static_cast<size_t>(C) * Ho * Wo);
  for (int c = 0; c < C; ++c) {
    const double* xp = &xv.data[static_cast<size_t>(c) * H * W];
    double* op = &out.data[static_cast<size_t>(c) * Ho * Wo];
    int* ap = &argmax[static_cast<size_t>(c) * Ho * Wo];
    for (int y = 0; y < Ho; ++y) {
      for (int xcol = 0; xcol < Wo; ++xcol) {
        int base = (2 * y) * W + 2 * xcol;
        int best = base;
        double bv2 = xp[base];
        int cand[3] = {base + 1, base + W, base + W + 1};
        for (int k = 0; k < 3; ++k) {
          if (xp[cand[k]] > bv2) {
            bv2 = xp[cand[k]];
            best = cand[k];
          }
        }
        op[y * Wo + xcol] = bv2;
        ap[y * Wo + xcol] = best;
      }
    }
  }
  int xi = x.id;
  return t.make_node(std::move(out), {xi},
                     [xi, argmax = std::move(argmax), C, H, W, Ho, Wo](Tape& tp, int self) {
                       const Tensor& g = tp.grad_ref(self);
                       Tensor& gx = tp.grad_ref(xi);
                       for (int c = 0; c < C; ++c) {
                         const double* gp = &g.data[static_cast<size_t>(c) * Ho * Wo];
                         const int* ap = &argmax[static_cast<size_t>(c) * Ho * Wo];
                         double* gxp = &gx.data[static_cast<size_t>(c) * H * W];
                         for (int i = 0; i < Ho * Wo; ++i) gxp[ap[i]] += gp[i];
                       }
                     });
}

Value deconv2x2(Value x, Value w, Value b) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  const Tensor& wv = t.value(w.id);
  const Tensor& bv = t.value(b.id);
  YKD_CHECK(xv.rank() == 3 && wv.rank() == 4, "deconv2x2: bad ranks");
  int I = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  int O = wv.dim(1);
  YKD_CHECK(wv.dim(0) == I && wv.dim(2) == 2 && wv.dim(3) == 2, "deconv2x2: weight shape");
  YKD_CHECK(bv.numel() == O, "deconv2x2: bias size mismatch");
  int Ho = 2 * H, Wo = 2 * W;
  Tensor out({O, Ho, Wo});
  for (int oc = 0; oc < O; ++oc) {
    double* op = &out.data[static_cast<size_t>(oc) * Ho * Wo];
    double bias = bv[oc];
    for (int i = 0; i < Ho * Wo; ++i) op[i] = bias;
    for (int ic = 0; ic < I; ++ic) {
      const double* xp = &xv.data[static_cast<size_t>(ic) * H * W];
      const double* wk = &wv.data[(static_cast<size_t>(ic) * O + oc) * 4];
      for (int y = 0; y < H; ++y) {
        for (int xc = 0; xc < W; ++xc) {
          double v = xp[y * W + xc];
          double* o00 = op + (2 * y) * Wo + 2 * xc;
          o00[0] += v * wk[0];
          o00[1] += v * wk[1];
          o00[Wo] += v * wk[2];
          o00[Wo + 1] += v * wk[3];
        }
      }
    }
  }
  int xi = x.id, wi = w.id, bi = b.id;
  return t.make_node(std::move(out), {xi, wi, bi},
                     [xi, wi, bi, I, H, W, O, Ho, Wo](Tape& tp, int self) {
                       const Tensor& g = tp.grad_ref(self);
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& wv2 = tp.value(wi);
                       bool need_x = tp.requires_grad(xi);
                       bool need_w = tp.requires_grad(wi);
                       if (tp.requires_grad(bi)) {
                         Tensor& gb = tp.grad_ref(bi);
                         for (int oc = 0; oc < O; ++oc) {
                           const double* gp = &g.data[static_cast<size_t>(oc) * Ho * Wo];
                           double acc = 0.0;
                           for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
                           gb[oc] += acc;
                         }
                       }
                       if (!need_x && !need_w) return;
                       Tensor* gx = need_x ? &tp.grad_ref(xi) : nullptr;
                       Tensor* gw = need_w ? &tp.grad_ref(wi) : nullptr;
                       for (int oc = 0; oc < O; ++oc) {
                         const double* gp = &g.data[static_cast<size_t>(oc) * Ho * Wo];
                         for (int ic = 0; ic < I; ++ic) {
                           const double* xp = &xv2.data[static_cast<size_t>(ic) * H * W];
                           const double* wk = &wv2.data[(static_cast<size_t>(ic) * O + oc) * 4];
                           double* gxp = need_x ? &gx->data[static_cast<size_t>(ic) * H * W] : nullptr;
                           double* gwk = need_w ? &gw->data[(static_cast<size_t>(ic) * O + oc) * 4] : nullptr;
                           double w0 = 0, w1 = 0, w2 = 0, w3 = 0;
                           for (int y = 0; y < H; ++y) {
                             for (int xc = 0; xc < W; ++xc) {
                               const double* g00 = gp + (2 * y) * Wo + 2 * xc;
                               if (need_x) {
                                 gxp[y * W + xc] += g00[0] * wk[0] + g00[1] * wk[1] +
                                                    g00[Wo] * wk[2] + g00[Wo + 1] * wk[3];
                               }
                               if (need_w) {
                                 double v = xp[y * W + xc];
                                 w0 += v * g00[0];
                                 w1 += v * g00[1];
                                 w2 += v * g00[Wo];
                                 w3 += v * g00[Wo + 1];
                               }
                             }
                           }
                           if (need_w) {
                             gwk[0] += w0;
                             gwk[1] += w1;
                             gwk[2] += w2;
                             gwk[3] += w3;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

Value reshape(Value x, std::vector<int> shape) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(Tensor::numel_of(shape) == xv.numel(), "reshape: numel mismatch");
  Tensor out(shape, xv.data);
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Value channels_to_rows(Value x, int group) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 3, "channels_to_rows: need 3-D input");
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  YKD_CHECK(C % group == 0, "channels_to_rows: channels not divisible by group");
  int G = C / group, hw = H * W;
  Tensor out({G * hw, group});
  for (int g = 0; g < G; ++g)
    for (int d = 0; d < group; ++d) {
      const double* src = &xv.data[static_cast<size_t>(g * group + d) * hw];
      for (int p = 0; p < hw; ++p) out.at(g * hw + p, d) = src[p];
    }
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, G, group, hw](Tape& tp, int self) {
    const Tensor& g2 = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int g = 0; g < G; ++g)
      for (int d = 0; d < group; ++d) {
        double* dst = &gx.data[static_cast<size_t>(g * group + d) * hw];
        for (int p = 0; p < hw; ++p) dst[p] += g2.at(g * hw + p, d);
      }
  });
}

Value select_image(Value x, int n) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 4, "select_image: need 4-D input");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  YKD_CHECK(n >= 0 && n < N, "select_image: index out of range");
  int64_t sz = static_cast<int64_t>(C) * H * W;
  Tensor out({C, H, W});
  std::copy(xv.data.begin() + n * sz, xv.data.begin() + (n + 1) * sz, out.data.begin());
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, n, sz](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int64_t i = 0; i < sz; ++i) gx[n * sz + i] += g[i];
  });
}

Value stack_images(const std::vector<Value>& xs) {
  YKD_CHECK(!xs.empty(), "stack_images: empty list");
  Tape& t = *xs[0].tape;
  const Tensor& first = t.value(xs[0].id);
  YKD_CHECK(first.rank() == 3, "stack_images: need 3-D inputs");
  int C = first.dim(0), H = first.dim(1), W = first.dim(2);
  int64_t sz = static_cast<int64_t>(C) * H * W;
  int N = static_cast<int>(xs.size());
  Tensor out({N, C, H, W});
  std::vector<int> ids;
  for (int n = 0; n < N; ++n) {
    const Tensor& xv = t.value(xs[static_cast<size_t>(n)].id);
    YKD_CHECK(xv.shape == first.shape, "stack_images: shape mismatch");
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + n * sz);
    ids.push_back(xs[static_cast<size_t>(n)].id);
  }
  return t.make_node(std::move(out), ids, [ids, sz](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    for (size_t n = 0; n < ids.size(); ++n) {
      if (!tp.requires_grad(ids[n])) continue;
      Tensor& gx = tp.grad_ref(ids[n]);
      const double* src = &g.data[n * static_cast<size_t>(sz)];
      for (int64_t i = 0; i < sz; ++i) gx[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// 4-D proposal stacks
// ---------------------------------------------------------------------------

Value gather_channels(Value x, const std::vector<int>& idx) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 4, "gather_channels: need 4-D input");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int K = static_cast<int>(idx.size());
  for (int c : idx) YKD_CHECK(c >= 0 && c < C, "gather_channels: index out of range");
  Tensor out({N, K, H, W});
  int hw = H * W;
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      const double* src = &xv.data[(static_cast<size_t>(n) * C + idx[static_cast<size_t>(k)]) * hw];
      double* dst = &out.data[(static_cast<size_t>(n) * K + k) * hw];
      std::copy(src, src + hw, dst);
    }
  }
  int xi = x.id;
  std::vector<int> ix = idx;
  return t.make_node(std::move(out), {xi}, [xi, ix, N, C, K, hw](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        const double* src = &g.data[(static_cast<size_t>(n) * K + k) * hw];
        double* dst = &gx.data[(static_cast<size_t>(n) * C + ix[static_cast<size_t>(k)]) * hw];
        for (int i = 0; i < hw; ++i) dst[i] += src[i];
      }
    }
  });
}

Value pixels_as_rows(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 4, "pixels_as_rows: need 4-D input");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int hw = H * W;
  Tensor out({N * hw, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = &xv.data[(static_cast<size_t>(n) * C + c) * hw];
      for (int p = 0; p < hw; ++p) out.at(n * hw + p, c) = src[p];
    }
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, N, C, hw](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* dst = &gx.data[(static_cast<size_t>(n) * C + c) * hw];
        for (int p = 0; p < hw; ++p) dst[p] += g.at(n * hw + p, c);
      }
  });
}

Value roi_align(Value feat, const std::vector<std::array<double, 4>>& boxes,
                int out_size, double spatial_scale) {
  Tape& t = *feat.tape;
  const Tensor& fv = t.value(feat.id);
  YKD_CHECK(fv.rank() == 3, "roi_align: need 3-D feature map");
  int C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  int N = static_cast<int>(boxes.size());
  int S = out_size;
  YKD_CHECK(N > 0, "roi_align: empty box list");
  // Per (n, bin): 4 bilinear taps shared by all channels.
  struct Tap {
    int i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  std::vector<Tap> taps(static_cast<size_t>(N) * S * S);
  for (int n = 0; n < N; ++n) {
    double x0 = boxes[static_cast<size_t>(n)][0] * spatial_scale;
    double y0 = boxes[static_cast<size_t>(n)][1] * spatial_scale;
    double x1 = boxes[static_cast<size_t>(n)][2] * spatial_scale;
    double y1 = boxes[static_cast<size_t>(n)][3] * spatial_scale;
    double bw = std::max(x1 - x0, 1e-6) / S;
    double bh = std::max(y1 - y0, 1e-6) / S;
    for (int by = 0; by < S; ++by) {
      for (int bx = 0; bx < S; ++bx) {
        double cx = x0 + (bx + 0.5) * bw - 0.5;
        double cy = y0 + (by + 0.5) * bh - 0.5;
        cx = std::min(std::max(cx, 0.0), static_cast<double>(W - 1));
        cy = std::min(std::max(cy, 0.0), static_cast<double>(H - 1));
        int ix = static_cast<int>(cx);
        int iy = static_cast<int>(cy);
        int ix1 = std::min(ix + 1, W - 1);
        int iy1 = std::min(iy + 1, H - 1);
        double lx = cx - ix, ly = cy - iy;
        Tap& tap = taps[(static_cast<size_t>(n) * S + by) * S + bx];
        tap.i00 = iy * W + ix;
        tap.i01 = iy * W + ix1;
        tap.i10 = iy1 * W + ix;
        tap.i11 = iy1 * W + ix1;
        tap.w00 = (1 - ly) * (1 - lx);
        tap.w01 = (1 - ly) * lx;
        tap.w10 = ly * (1 - lx);
        tap.w11 = ly * lx;
      }
    }
  }
  Tensor out({N, C, S, S});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* fp = &fv.data[static_cast<size_t>(c) * H * W];
      double* op = &out.data[(static_cast<size_t>(n) * C + c) * S * S];
      const Tap* tp0 = &taps[static_cast<size_t>(n) * S * S];
      for (int i = 0; i < S * S; ++i) {
        const Tap& tap = tp0[i];
        op[i] = tap.w00 * fp[tap.i00] + tap.w01 * fp[tap.i01] + tap.w10 * fp[tap.i10] +
                tap.w11 * fp[tap.i11];
      }
    }
  }
  int fi = feat.id;
  return t.make_node(std::move(out), {fi},
                     [fi, taps = std::move(taps), N, C, H, W, S](Tape& tp, int self) {
                       const Tensor& g = tp.grad_ref(self);
                       Tensor& gf = tp.grad_ref(fi);
                       for (int n = 0; n < N; ++n) {
                         const Tap* tp0 = &taps[static_cast<size_t>(n) * S * S];
                         for (int c = 0; c < C; ++c) {
                           double* gp = &gf.data[static_cast<size_t>(c) * H * W];
                           const double* go = &g.data[(static_cast<size_t>(n) * C + c) * S * S];
                           for (int i = 0; i < S * S; ++i) {
                             const Tap& tap = tp0[i];
                             double gv = go[i];
                             if (gv == 0.0) continue;
                             gp[tap.i00] += tap.w00 * gv;
                             gp[tap.i01] += tap.w01 * gv;
                             gp[tap.i10] += tap.w10 * gv;
                             gp[tap.i11] += tap.w11 * gv;
                           }
                         }
                       }
                     });
}

Value global_avg_pool(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.rank() == 3, "global_avg_pool: need 3-D input");
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out({1, C});
  double inv = 1.0 / (H * W);
  for (int c = 0; c < C; ++c) {
    const double* xp = &xv.data[static_cast<size_t>(c) * H * W];
    double acc = 0.0;
    for (int i = 0; i < H * W; ++i) acc += xp[i];
    out[c] = acc * inv;
  }
  int xi = x.id;
  return t.make_node(std::move(out), {xi}, [xi, C, H, W, inv](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_ref(xi);
    for (int c = 0; c < C; ++c) {
      double gv = g[c] * inv;
      double* gp = &gx.data[static_cast<size_t>(c) * H * W];
      for (int i = 0; i < H * W; ++i) gp[i] += gv;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

Value sum(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  double acc = 0.0;
  for (double v : xv.data) acc += v;
  int xi = x.id;
  return t.make_node(Tensor::scalar(acc), {xi}, [xi](Tape& tp, int self) {
    double g = tp.grad_ref(self)[0];
    Tensor& gx = tp.grad_ref(xi);
    for (auto& v : gx.data) v += g;
  });
}

Value mean(Value x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  double inv = 1.0 / static_cast<double>(xv.numel());
  double acc = 0.0;
  for (double v : xv.data) acc += v;
  int xi = x.id;
  return t.make_node(Tensor::scalar(acc * inv), {xi}, [xi, inv](Tape& tp, int self) {
    double g = tp.grad_ref(self)[0] * inv;
    Tensor& gx = tp.grad_ref(xi);
    for (auto& v : gx.data) v += g;
  });
}

Value dot_const(Value x, const Tensor& w) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.numel() == w.numel(), "dot_const: size mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i] * w[i];
  int xi = x.id;
  Tensor wc = w;
  return t.make_node(Tensor::scalar(acc), {xi}, [xi, wc](Tape& tp, int self) {
    double g = tp.grad_ref(self)[0];
    Tensor& gx = tp.grad_ref(xi);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * wc[i];
  });
}

Value weighted_mse_const(Value x, const Tensor& t_, const Tensor& w, double norm) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.numel() == t_.numel() && xv.numel() == w.numel(),
            "weighted_mse_const: size mismatch");
  YKD_CHECK(norm > 0.0, "weighted_mse_const: non-positive norm");
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double d = xv[i] - t_[i];
    acc += w[i] * d * d;
  }
  int xi = x.id;
  Tensor tc = t_, wc = w;
  return t.make_node(Tensor::scalar(acc / norm), {xi}, [xi, tc, wc, norm](Tape& tp, int self) {
    double g = tp.grad_ref(self)[0] / norm;
    const Tensor& xv2 = tp.value(xi);
    Tensor& gx = tp.grad_ref(xi);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * 2.0 * wc[i] * (xv2[i] - tc[i]);
  });
}

Value weighted_smooth_l1_const(Value x, const Tensor& t_, const Tensor& w, double beta,
                               double norm) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.numel() == t_.numel() && xv.numel() == w.numel(),
            "weighted_smooth_l1_const: size mismatch");
  YKD_CHECK(beta > 0.0 && norm > 0.0, "weighted_smooth_l1_const: bad beta/norm");
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double d = std::abs(xv[i] - t_[i]);
    acc += w[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
  }
  int xi = x.id;
  Tensor tc = t_, wc = w;
  return t.make_node(Tensor::scalar(acc / norm), {xi},
                     [xi, tc, wc, beta, norm](Tape& tp, int self) {
                       double g = tp.grad_ref(self)[0] / norm;
                       const Tensor& xv2 = tp.value(xi);
                       Tensor& gx = tp.grad_ref(xi);
                       for (int64_t i = 0; i < gx.numel(); ++i) {
                         double d = xv2[i] - tc[i];
                         double dd = d < -beta ? -1.0 : (d > beta ? 1.0 : d / beta);
                         gx[i] += g * wc[i] * dd;
                       }
                     });
}

Value weighted_bce_logits_const(Value x, const Tensor& t_, const Tensor& w, double norm) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x.id);
  YKD_CHECK(xv.numel() == t_.numel() && xv.numel() == w.numel(),
            "weighted_bce_logits_const: size mismatch");
  YKD_CHECK(norm > 0.0, "weighted_bce_logits_const: non-positive norm");
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double z = xv[i];
    acc += w[i] * (std::max(z, 0.0) - z * t_[i] + std::log1p(std::exp(-std::abs(z))));
  }
  int xi = x.id;
  Tensor tc = t_, wc = w;
  return t.make_node(Tensor::scalar(acc / norm), {xi}, [xi, tc, wc, norm](Tape& tp, int self) {
    double g = tp.grad_ref(self)[0] / norm;
    const Tensor& xv2 = tp.value(xi);
    Tensor& gx = tp.grad_ref(xi);
    for (int64_t i = 0; i < gx.numel(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-xv2[i]));
      gx[i] += g * wc[i] * (s - tc[i]);
    }
  });
}

Value cross_entropy_rows(Value logits, const std::vector<int>& labels,
                         const Tensor& row_weights, double norm) {
  Tape& t = *logits.tape;
  const Tensor& xv = t.value(logits.id);
  YKD_CHECK(xv.rank() == 2, "cross_entropy_rows: need 2-D logits");
  int R = xv.dim(0), C = xv.dim(1);
  YKD_CHECK(static_cast<int>(labels.size()) == R, "cross_entropy_rows: label count");
  YKD_CHECK(row_weights.numel() == R, "cross_entropy_rows: weight count");
  YKD_CHECK(norm > 0.0, "cross_entropy_rows: non-positive norm");
  Tensor soft({R, C});
  double acc = 0.0;
  for (int r = 0; r < R; ++r) {
    int lbl = labels[static_cast<size_t>(r)];
    YKD_CHECK(lbl >= 0 && lbl < C, "cross_entropy_rows: label ", lbl, " out of range");
    const double* xr = &xv.data[static_cast<size_t>(r) * C];
    double mx = xr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(xr[c] - mx);
    double lse = mx + std::log(s);
    for (int c = 0; c < C; ++c) soft.at(r, c) = std::exp(xr[c] - lse);
    acc += row_weights[r] * (lse - xr[lbl]);
  }
  int xi = logits.id;
  std::vector<int> lbls = labels;
  Tensor wc = row_weights;
  return t.make_node(Tensor::scalar(acc / norm), {xi},
                     [xi, lbls, wc, soft = std::move(soft), R, C, norm](Tape& tp, int self) {
                       double g = tp.grad_ref(self)[0] / norm;
                       Tensor& gx = tp.grad_ref(xi);
                       for (int r = 0; r < R; ++r) {
                         double wr = wc[r] * g;
                         if (wr == 0.0) continue;
                         double* gxr = &gx.data[static_cast<size_t>(r) * C];
                         for (int c = 0; c < C; ++c) gxr[c] += wr * soft.at(r, c);
                         gxr[lbls[static_cast<size_t>(r)]] -= wr;
                       }
                     });
}

}  // namespace ykd::ad

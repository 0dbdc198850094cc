#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "ykd/common.hpp"

namespace ykd {

// Dense row-major tensor of doubles. Compute runs in double throughout;
// model parameters are stored as float32 and widened on entry (see
// params.hpp), which keeps checkpoints bit-exact and finite-difference
// checks well conditioned.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    YKD_CHECK(static_cast<int64_t>(data.size()) == numel_of(shape),
              "tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-D accessors (rows x cols), used heavily by the head code.
  double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace ykd

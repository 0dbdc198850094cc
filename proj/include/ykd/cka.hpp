#pragma once

#include <map>
#include <string>
#include <vector>

#include "ykd/model.hpp"
#include "ykd/scenario.hpp"

namespace ykd {

// Linear centered kernel alignment between two representations of the
// same n examples (rows). Computed in feature space:
//   ||Yc' Xc||_F^2 / (||Xc' Xc||_F * ||Yc' Yc||_F)
// with column-centered Xc, Yc. Result in [0, 1]; zero-variance input is
// an error.
double linear_cka(const Tensor& x, const Tensor& y);

struct CKAReport {
  int step_a = 0;
  int step_b = 0;
  std::map<int, double> per_class;     // class id -> CKA score
  std::map<int, int> sample_counts;    // images used per class
  std::vector<int> skipped_classes;    // fewer than 2 qualifying images
};

// Per-class representation similarity between two FE branches: rows are
// global-average-pooled FE(B(x)) features of the images whose ground
// truth contains the class.
CKAReport cka_per_class(const ModelState& state, int step_a, int step_b,
                        const Dataset& dataset);

void write_cka_csv(const std::string& path, const CKAReport& r);

}  // namespace ykd

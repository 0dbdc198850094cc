#include "ykd/cka.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include "ykd/common.hpp"

namespace ykd {

namespace {

// Column-center in place.
void center_columns(Tensor& m) {
  int n = m.dim(0), p = m.dim(1);
  for (int c = 0; c < p; ++c) {
    double mean = 0.0;
    for (int r = 0; r < n; ++r) mean += m.at(r, c);
    mean /= n;
    for (int r = 0; r < n; ++r) m.at(r, c) -= mean;
  }
}

// ||A' B||_F^2 for column-centered A (n x pa), B (n x pb).
double cross_norm_sq(const Tensor& a, const Tensor& b) {
  int n = a.dim(0), pa = a.dim(1), pb = b.dim(1);
  double total = 0.0;
  for (int i = 0; i < pa; ++i) {
    for (int j = 0; j < pb; ++j) {
      double dot = 0.0;
      for (int r = 0; r < n; ++r) dot += a.at(r, i) * b.at(r, j);
      total += dot * dot;
    }
  }
  return total;
}

}  // namespace

double linear_cka(const Tensor& x, const Tensor& y) {
  YKD_CHECK(x.rank() == 2 && y.rank() == 2, "linear_cka: need 2-D matrices");
  YKD_CHECK(x.dim(0) == y.dim(0), "linear_cka: row counts differ (", x.dim(0), " vs ",
            y.dim(0), ")");
  YKD_CHECK(x.dim(0) >= 2, "linear_cka: need at least 2 examples");
  Tensor xc = x, yc = y;
  center_columns(xc);
  center_columns(yc);
  double xx = cross_norm_sq(xc, xc);
  double yy = cross_norm_sq(yc, yc);
  YKD_CHECK(xx > 0.0 && yy > 0.0, "linear_cka: zero-variance input");
  double xy = cross_norm_sq(yc, xc);
  return xy / (std::sqrt(xx) * std::sqrt(yy));
}

CKAReport cka_per_class(const ModelState& state, int step_a, int step_b,
                        const Dataset& dataset) {
  auto branch_of_step = [&](int step) {
    for (size_t i = 0; i < state.fes.size(); ++i) {
      if (state.fes[i].step == step) return static_cast<int>(i);
    }
    fail("cka_per_class: no FE branch for step ", step);
  };
  int ba = branch_of_step(step_a);
  int bb = branch_of_step(step_b);

  CKAReport report;
  report.step_a = step_a;
  report.step_b = step_b;

  // Pool features once per image, reuse across classes.
  std::vector<std::vector<double>> rows_a(dataset.samples.size());
  std::vector<std::vector<double>> rows_b(dataset.samples.size());
  auto pooled = [&](int branch, const ImageSample& s) {
    Tensor f = forward_features(state, branch, s.pixels);
    int c = f.dim(0), hw = f.dim(1) * f.dim(2);
    std::vector<double> row(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      const double* p = &f.data[static_cast<size_t>(ch) * hw];
      for (int i = 0; i < hw; ++i) acc += p[i];
      row[static_cast<size_t>(ch)] = acc / hw;
    }
    return row;
  };

  std::set<int> classes;
  for (const auto& s : dataset.samples) {
    for (const auto& a : s.annotations) classes.insert(a.class_id);
  }
  for (int cls : classes) {
    std::vector<int> members;
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
      for (const auto& a : dataset.samples[i].annotations) {
        if (a.class_id == cls) {
          members.push_back(static_cast<int>(i));
          break;
        }
      }
    }
    if (members.size() < 2) {
      report.skipped_classes.push_back(cls);
      std::cerr << "[ykd] notice: class " << cls << " has " << members.size()
                << " qualifying image(s); CKA skipped\n";
      continue;
    }
    for (int m : members) {
      if (rows_a[static_cast<size_t>(m)].empty()) {
        rows_a[static_cast<size_t>(m)] = pooled(ba, dataset.samples[static_cast<size_t>(m)]);
        rows_b[static_cast<size_t>(m)] = pooled(bb, dataset.samples[static_cast<size_t>(m)]);
      }
    }
    int n = static_cast<int>(members.size());
    int p = static_cast<int>(rows_a[static_cast<size_t>(members[0])].size());
    Tensor xa({n, p}), xb({n, p});
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < p; ++c) {
        xa.at(r, c) = rows_a[static_cast<size_t>(members[static_cast<size_t>(r)])][static_cast<size_t>(c)];
        xb.at(r, c) = rows_b[static_cast<size_t>(members[static_cast<size_t>(r)])][static_cast<size_t>(c)];
      }
    }
    report.per_class[cls] = linear_cka(xa, xb);
    report.sample_counts[cls] = n;
  }
  return report;
}

void write_cka_csv(const std::string& path, const CKAReport& r) {
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_cka_csv: cannot open ", path);
  f << "class_id,cka,samples,step_a,step_b\n";
  for (const auto& [cls, v] : r.per_class) {
    f << cls << ',' << v << ',' << r.sample_counts.at(cls) << ',' << r.step_a << ','
      << r.step_b << "\n";
  }
  YKD_CHECK(f.good(), "write_cka_csv: write failed for ", path);
}

}  // namespace ykd

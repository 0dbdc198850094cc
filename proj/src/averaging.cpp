#include "ykd/averaging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ykd/common.hpp"

namespace ykd {

namespace {

// Rows of a class-partitioned head array owned by the first C classes.
int shared_rows_of(const std::string& name, int c_shared, int rows) {
  if (name == "box.cls.w" || name == "box.cls.b") return c_shared + 1;  // bg + old
  if (name == "box.reg.w" || name == "box.reg.b") return 4 * c_shared;
  if (name == "mask.out.w" || name == "mask.out.b") return c_shared;
  return rows;  // every other array must match exactly
}

}  // namespace

HeadEntry average_heads(const HeadEntry& head_i, const HeadEntry& head_j, double w_i,
                        double w_j) {
  YKD_CHECK(w_i >= 0.0 && w_i <= 1.0 && w_j >= 0.0 && w_j <= 1.0,
            "average_heads: weights must lie in [0, 1], got (", w_i, ", ", w_j, ")");
  const auto& di = head_i.class_domain;
  const auto& dj = head_j.class_domain;
  YKD_CHECK(di.size() <= dj.size() &&
                std::equal(di.begin(), di.end(), dj.begin()),
            "average_heads: first head's class domain must be a prefix of the second's");
  int c_shared = static_cast<int>(di.size());

  HeadEntry out;
  out.class_domain = dj;
  out.step = head_j.step;
  out.params = head_j.params;  // structure + theta_j values

  for (auto& dst : out.params.arrays()) {
    YKD_CHECK(head_i.params.has(dst.name), "average_heads: ", dst.name,
              " missing from the first head");
    const ParamArray& a = head_i.params.get(dst.name);
    const ParamArray& b = head_j.params.get(dst.name);
    int rows = b.shape.empty() ? 1 : b.shape[0];
    int64_t per_row = rows == 0 ? 0 : b.numel() / rows;
    int shared = shared_rows_of(dst.name, c_shared, rows);
    if (shared == rows) {
      YKD_CHECK(a.shape == b.shape, "average_heads: shape mismatch on shared array ",
                dst.name);
    } else {
      YKD_CHECK(a.shape.size() == b.shape.size() && a.shape[0] == shared,
                "average_heads: class rows of ", dst.name, " do not line up");
      for (size_t d = 1; d < a.shape.size(); ++d) {
        YKD_CHECK(a.shape[d] == b.shape[d], "average_heads: shape mismatch on ", dst.name,
                  " beyond the class dimension");
      }
    }
    int64_t shared_elems = shared * per_row;
    for (int64_t k = 0; k < shared_elems; ++k) {
      dst.data[static_cast<size_t>(k)] =
          static_cast<float>(w_i * static_cast<double>(a.data[static_cast<size_t>(k)]) +
                             w_j * static_cast<double>(b.data[static_cast<size_t>(k)]));
    }
    // theta_j-only class rows, scaled to keep logit magnitudes in line
    // with the averaged block.
    for (int64_t k = shared_elems; k < b.numel(); ++k) {
      dst.data[static_cast<size_t>(k)] = static_cast<float>(
          (w_i + w_j) * static_cast<double>(b.data[static_cast<size_t>(k)]));
    }
  }
  return out;
}

std::vector<SweepRow> sweep(const HeadEntry& head_i, const HeadEntry& head_j,
                            const std::vector<std::pair<double, double>>& weights,
                            const SweepEvalFn& eval_fn) {
  YKD_CHECK(!weights.empty(), "sweep: empty weight list");
  YKD_CHECK(eval_fn != nullptr, "sweep: missing eval function");
  std::vector<SweepRow> rows;
  for (auto [wi, wj] : weights) {
    SweepRow row;
    row.w_i = wi;
    row.w_j = wj;
    row.report = eval_fn(average_heads(head_i, head_j, wi, wj));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_sweep_csv: cannot open ", path);
  f << "w_i,w_j,map_base,map_intermediary,map_new,map_all\n";
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    f << r.w_i << ',' << r.w_j << ',' << cell(r.report.base) << ','
      << cell(r.report.intermediary) << ',' << cell(r.report.novel) << ','
      << cell(r.report.all) << "\n";
  }
  YKD_CHECK(f.good(), "write_sweep_csv: write failed for ", path);
}

}  // namespace ykd

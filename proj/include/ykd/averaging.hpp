#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ykd/eval.hpp"
#include "ykd/model.hpp"

namespace ykd {

// Weighted head combination: every parameter shared by both heads (same
// shape) becomes w_i * theta_i + w_j * theta_j; classifier / regressor /
// mask rows of classes only theta_j knows are copied from theta_j scaled
// by (w_i + w_j). The result classifies theta_j's domain.
// Requires head_i's domain to be a prefix of head_j's (i < j) and both
// weights in [0, 1].
HeadEntry average_heads(const HeadEntry& head_i, const HeadEntry& head_j, double w_i,
                        double w_j);

struct SweepRow {
  double w_i = 0;
  double w_j = 0;
  EvalReport report;
};

using SweepEvalFn = std::function<EvalReport(const HeadEntry& merged)>;

// One evaluation per weight pair, in the given order.
std::vector<SweepRow> sweep(const HeadEntry& head_i, const HeadEntry& head_j,
                            const std::vector<std::pair<double, double>>& weights,
                            const SweepEvalFn& eval_fn);

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace ykd

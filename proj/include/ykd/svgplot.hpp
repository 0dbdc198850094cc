#pragma once

#include <string>
#include <vector>

namespace ykd {

// Minimal static SVG charts for the analysis outputs.

struct BarSeries {
  std::vector<std::string> labels;
  std::vector<double> values;  // same length as labels
};

// Vertical bar chart (e.g. per-class CKA, grouped mAP).
void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const BarSeries& series, double y_max = 1.0);

struct Curve {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Multi-line chart (e.g. group mAP against the averaging weight w_i).
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::vector<Curve>& curves,
                          double y_max = 1.0);

}  // namespace ykd

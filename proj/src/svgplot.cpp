#include "ykd/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ykd/common.hpp"

namespace ykd {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMarginLeft = 56;
constexpr int kMarginBottom = 48;
constexpr int kMarginTop = 40;
constexpr int kMarginRight = 16;

const char* kPalette[] = {"#3465a4", "#cc3344", "#44aa55", "#e0a030", "#7755bb", "#338888"};

std::string header(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
     << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
  return os.str();
}

void axes(std::ostringstream& os, double y_max) {
  int x0 = kMarginLeft, y0 = kHeight - kMarginBottom, y1 = kMarginTop;
  int x1 = kWidth - kMarginRight;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    double frac = i / 5.0;
    int y = static_cast<int>(y0 - frac * (y0 - y1));
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << y << "\" x2=\"" << x0 << "\" y2=\"" << y
       << "\" stroke=\"black\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", frac * y_max);
    os << "<text x=\"" << x0 - 8 << "\" y=\"" << y + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << buf
       << "</text>\n";
  }
}

}  // namespace

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const BarSeries& series, double y_max) {
  YKD_CHECK(series.labels.size() == series.values.size(),
            "write_bar_chart_svg: label/value count mismatch");
  YKD_CHECK(!series.values.empty(), "write_bar_chart_svg: empty series");
  YKD_CHECK(y_max > 0, "write_bar_chart_svg: y_max must be positive");
  std::ostringstream os;
  os << header(title);
  axes(os, y_max);
  int n = static_cast<int>(series.values.size());
  double plot_w = kWidth - kMarginLeft - kMarginRight;
  double plot_h = kHeight - kMarginTop - kMarginBottom;
  double slot = plot_w / n;
  double bar_w = slot * 0.7;
  for (int i = 0; i < n; ++i) {
    double v = std::max(0.0, std::min(series.values[static_cast<size_t>(i)], y_max));
    double h = v / y_max * plot_h;
    double x = kMarginLeft + i * slot + (slot - bar_w) / 2;
    double y = kHeight - kMarginBottom - h;
    os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\""
       << h << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
    os << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << kHeight - kMarginBottom + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
       << series.labels[static_cast<size_t>(i)] << "</text>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", series.values[static_cast<size_t>(i)]);
    os << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << y - 4
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << buf
       << "</text>\n";
  }
  os << "</svg>\n";
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_bar_chart_svg: cannot open ", path);
  f << os.str();
  YKD_CHECK(f.good(), "write_bar_chart_svg: write failed for ", path);
}

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::vector<Curve>& curves,
                          double y_max) {
  YKD_CHECK(!curves.empty(), "write_line_chart_svg: no curves");
  double x_min = 0, x_max = 0;
  bool first = true;
  for (const auto& c : curves) {
    YKD_CHECK(c.x.size() == c.y.size() && !c.x.empty(),
              "write_line_chart_svg: malformed curve ", c.name);
    for (double v : c.x) {
      if (first) {
        x_min = x_max = v;
        first = false;
      }
      x_min = std::min(x_min, v);
      x_max = std::max(x_max, v);
    }
  }
  if (x_max == x_min) x_max = x_min + 1.0;

  std::ostringstream os;
  os << header(title);
  axes(os, y_max);
  double plot_w = kWidth - kMarginLeft - kMarginRight;
  double plot_h = kHeight - kMarginTop - kMarginBottom;
  auto px = [&](double x) {
    return kMarginLeft + (x - x_min) / (x_max - x_min) * plot_w;
  };
  auto py = [&](double y) {
    double v = std::max(0.0, std::min(y, y_max));
    return kHeight - kMarginBottom - v / y_max * plot_h;
  };
  for (size_t ci = 0; ci < curves.size(); ++ci) {
    const Curve& c = curves[ci];
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[ci % 6]
       << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < c.x.size(); ++i) os << px(c.x[i]) << ',' << py(c.y[i]) << ' ';
    os << "\"/>\n";
    for (size_t i = 0; i < c.x.size(); ++i) {
      os << "<circle cx=\"" << px(c.x[i]) << "\" cy=\"" << py(c.y[i])
         << "\" r=\"3\" fill=\"" << kPalette[ci % 6] << "\"/>\n";
    }
    os << "<text x=\"" << kWidth - kMarginRight - 8 << "\" y=\""
       << kMarginTop + 16 + 16 * static_cast<int>(ci)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
       << kPalette[ci % 6] << "\">" << c.name << "</text>\n";
  }
  os << "<text x=\"" << kMarginLeft + plot_w / 2 << "\" y=\"" << kHeight - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label
     << "</text>\n";
  os << "</svg>\n";
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_line_chart_svg: cannot open ", path);
  f << os.str();
  YKD_CHECK(f.good(), "write_line_chart_svg: write failed for ", path);
}

}  // namespace ykd

// SPDX-License-Identifier: Apache-2.0
#include "nfe/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace nfe {

namespace {

void sort_by_x(PlotSeries& s) {
  std::stable_sort(s.points.begin(), s.points.end(), [](const PlotPoint& a, const PlotPoint& b) { return a.x < b.x; });
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

}  // namespace

PlotSeries accuracy_vs_flops(const std::vector<ExperimentResult>& results) {
  PlotSeries s{"ensemble", {}};
  for (const auto& r : results)
    s.points.push_back({r.summary.flops_ratio, 100.0 * r.summary.ensemble_accuracy.mean,
                        100.0 * r.summary.ensemble_accuracy.std, r.spec.name});
  sort_by_x(s);
  return s;
}

PlotSeries sparsity_vs_accuracy(const std::vector<ExperimentResult>& results) {
  PlotSeries s{"ensemble", {}};
  for (const auto& r : results)
    s.points.push_back({r.spec.pai.sparsity, 100.0 * r.summary.ensemble_accuracy.mean,
                        100.0 * r.summary.ensemble_accuracy.std, r.spec.name});
  sort_by_x(s);
  return s;
}

std::string render_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<PlotSeries>& series, bool connect) {
  constexpr double W = 640, H = 420, L = 70, R = 20, Tp = 40, B = 60;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (const auto& p : s.points) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y - p.err);
      y1 = std::max(y1, p.y + p.err);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const double xpad = x1 > x0 ? 0.05 * (x1 - x0) : 0.5 * std::max(std::abs(x0), 1.0);
  const double ypad = y1 > y0 ? 0.08 * (y1 - y0) : 0.5 * std::max(std::abs(y0), 1.0);
  x0 -= xpad, x1 += xpad, y0 -= ypad, y1 += ypad;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tp - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << Tp << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << (Tp + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kColors[si % std::size(kColors)];
    if (connect && s.points.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
      for (const auto& p : s.points) os << sx(p.x) << "," << sy(p.y) << " ";
      os << "\"/>\n";
    }
    for (const auto& p : s.points) {
      if (p.err > 0) {
        os << "<line class=\"errorbar\" x1=\"" << sx(p.x) << "\" y1=\"" << sy(p.y - p.err) << "\" x2=\"" << sx(p.x)
           << "\" y2=\"" << sy(p.y + p.err) << "\" stroke=\"" << color << "\"/>\n";
      }
      os << "<circle class=\"point\" cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y) << "\" r=\"4\" fill=\"" << color
         << "\"><title>" << escape(p.label) << ": " << num(p.y) << "</title></circle>\n";
    }
    os << "<text x=\"" << W - R - 4 << "\" y=\"" << Tp + 14 * (si + 1) << "\" text-anchor=\"end\" fill=\"" << color
       << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<fs::path> emit_plots(const std::vector<ExperimentResult>& results, const fs::path& dir) {
  require(!results.empty(), "emit_plots needs at least one result");
  fs::create_directories(dir);
  std::vector<fs::path> out;
  const auto write = [&](const std::string& file, const std::string& svg) {
    const fs::path p = dir / file;
    std::ofstream f(p);
    if (!f) fail(ErrorKind::io, "cannot write " + p.string());
    f << svg;
    out.push_back(p);
  };
  write("accuracy_vs_flops.svg",
        render_svg("Ensemble accuracy vs. FLOPs", "FLOPs ratio", "accuracy (%)", {accuracy_vs_flops(results)}, false));
  write("sparsity_vs_accuracy.svg", render_svg("Sparsity vs. ensemble accuracy", "sparsity S", "accuracy (%)",
                                               {sparsity_vs_accuracy(results)}, true));
  return out;
}

}  // namespace nfe

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nfe/experiment.hpp"

namespace nfe {

struct PlotPoint {
  double x = 0;
  double y = 0;
  double err = 0;  // half-height of the error bar
  std::string label;
};

struct PlotSeries {
  std::string name;
  std::vector<PlotPoint> points;  // kept sorted by x
};

/// Ensemble accuracy (%) against FLOPs ratio, one point per result; error
/// bars are the sample standard deviation across seeds.
PlotSeries accuracy_vs_flops(const std::vector<ExperimentResult>& results);
/// Ensemble accuracy (%) against PaI sparsity.
PlotSeries sparsity_vs_accuracy(const std::vector<ExperimentResult>& results);

/// Standalone SVG document. `connect` draws line segments between points.
std::string render_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<PlotSeries>& series, bool connect);

/// Writes accuracy_vs_flops.svg and sparsity_vs_accuracy.svg; returns the paths.
std::vector<std::filesystem::path> emit_plots(const std::vector<ExperimentResult>& results,
                                              const std::filesystem::path& dir);

}  // namespace nfe

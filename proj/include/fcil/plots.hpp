#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace fcil {

struct CurveSeries {
  std::string label;
  std::vector<double> accuracy;  // overall accuracy after each task, averaged over seeds
  int seeds = 0;
};

// Groups every directory below `root` that holds accuracy_matrix.csv by its
// parent directory (one series per method or ablation rung). Test sizes come
// from metrics.json when present, otherwise tasks are weighted equally.
std::vector<CurveSeries> collect_curves(const std::filesystem::path& root);

std::string accuracy_svg(const std::vector<CurveSeries>& series);

// rows: clients, columns: classes in head order.
std::string heatmap_svg(const std::vector<int>& clients, const std::vector<std::vector<double>>& counts);

// Writes plots/accuracy.svg, plots/accuracy.csv and one heatmap per series
// (taken from its first seed) under `root`. Returns the files written.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& root);

}  // namespace fcil

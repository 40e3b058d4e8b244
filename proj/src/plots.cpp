#include "fcil/plots.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "fcil/metrics.hpp"
#include "json.hpp"

namespace fcil {

namespace fs = std::filesystem;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

std::string series_label(const fs::path& root, const fs::path& seed_dir) {
  const fs::path rel = seed_dir == root ? fs::path(".") : seed_dir.parent_path().lexically_relative(root);
  if (!rel.empty() && rel != ".") return rel.generic_string();
  const std::string own = (fs::absolute(root) / "x").lexically_normal().parent_path().filename().string();
  return own.empty() ? "run" : own;
}

std::vector<std::vector<double>> read_heatmap(const fs::path& path, std::vector<int>& clients) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    clients.push_back(std::stoi(cell));
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<CurveSeries> collect_curves(const fs::path& root) {
  std::vector<fs::path> dirs;
  if (fs::is_regular_file(root / "accuracy_matrix.csv")) dirs.push_back(root);
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "accuracy_matrix.csv") {
      if (e.path().parent_path() != root) dirs.push_back(e.path().parent_path());
    }
  std::sort(dirs.begin(), dirs.end());

  std::map<std::string, CurveSeries> by_label;
  std::vector<std::string> order;
  for (const auto& d : dirs) {
    AccuracyMatrix m = read_matrix_csv(d / "accuracy_matrix.csv");
    if (fs::is_regular_file(d / "metrics.json")) {
      std::ifstream in(d / "metrics.json");
      const auto j = nlohmann::json::parse(in);
      if (j.contains("test_sizes")) m.test_sizes = j.at("test_sizes").get<std::vector<std::size_t>>();
    }
    const std::string label = series_label(root, d);
    auto [it, fresh] = by_label.try_emplace(label);
    if (fresh) {
      it->second.label = label;
      order.push_back(label);
    }
    CurveSeries& s = it->second;
    const auto T = static_cast<std::size_t>(m.completed());
    if (s.accuracy.size() < T) s.accuracy.resize(T, 0.0);
    for (int t = 0; t < m.completed(); ++t) s.accuracy[static_cast<std::size_t>(t)] += m.overall(t);
    ++s.seeds;
  }
  std::vector<CurveSeries> out;
  for (const auto& label : order) {
    CurveSeries s = by_label.at(label);
    for (double& v : s.accuracy) v /= s.seeds;
    out.push_back(std::move(s));
  }
  return out;
}

std::string accuracy_svg(const std::vector<CurveSeries>& series) {
  const double W = 640, H = 400, left = 60, right = 170, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t T = 1;
  for (const auto& s : series) T = std::max(T, s.accuracy.size());
  auto x = [&](std::size_t t) { return left + (T > 1 ? pw * static_cast<double>(t) / static_cast<double>(T - 1) : pw / 2); };
  auto y = [&](double a) { return top + ph * (1.0 - a); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(left) + "\" y=\"18\" font-size=\"14\" font-family=\"sans-serif\">Accuracy after each task</text>\n";
  for (int g = 0; g <= 10; g += 2) {
    const double a = g / 10.0;
    svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(y(a)) + "\" x2=\"" + num(left + pw) + "\" y2=\"" + num(y(a)) +
           "\" stroke=\"#ddd\"/>\n";
    svg += "<text x=\"" + num(left - 8) + "\" y=\"" + num(y(a) + 4) +
           "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" + std::to_string(g * 10) + "</text>\n";
  }
  for (std::size_t t = 0; t < T; ++t)
    svg += "<text x=\"" + num(x(t)) + "\" y=\"" + num(top + ph + 18) +
           "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">" + std::to_string(t + 1) + "</text>\n";
  svg += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(H - 10) +
         "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">task</text>\n";
  svg += "<text x=\"14\" y=\"" + num(top + ph / 2) + "\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 14 " +
         num(top + ph / 2) + ")\" text-anchor=\"middle\">accuracy (%)</text>\n";
  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    std::string pts;
    for (std::size_t t = 0; t < s.accuracy.size(); ++t) pts += num(x(t)) + "," + num(y(s.accuracy[t])) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t t = 0; t < s.accuracy.size(); ++t)
      svg += "<circle cx=\"" + num(x(t)) + "\" cy=\"" + num(y(s.accuracy[t])) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    svg += "<line x1=\"" + num(W - right + 12) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" + num(W - right + 32) + "\" y2=\"" +
           num(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + num(W - right + 38) + "\" y=\"" + num(ly) + "\" font-size=\"11\" font-family=\"sans-serif\">" +
           escape(s.label) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::string heatmap_svg(const std::vector<int>& clients, const std::vector<std::vector<double>>& counts) {
  const std::size_t rows = counts.size();
  const std::size_t cols = rows ? counts.front().size() : 0;
  const double cell = 22, left = 70, top = 40;
  const double W = left + cell * static_cast<double>(cols) + 20, H = top + cell * static_cast<double>(rows) + 40;
  double peak = 0.0;
  for (const auto& r : counts)
    for (double v : r) peak = std::max(peak, v);

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(left) + "\" y=\"18\" font-size=\"14\" font-family=\"sans-serif\">Training samples per client and class</text>\n";
  for (std::size_t i = 0; i < rows; ++i) {
    const double yy = top + cell * static_cast<double>(i);
    svg += "<text x=\"" + num(left - 6) + "\" y=\"" + num(yy + cell * 0.7) +
           "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">client " + std::to_string(clients[i]) + "</text>\n";
    for (std::size_t k = 0; k < cols; ++k) {
      const double v = peak > 0.0 ? counts[i][k] / peak : 0.0;
      const int shade = static_cast<int>(255.0 * (1.0 - v));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      svg += "<rect x=\"" + num(left + cell * static_cast<double>(k)) + "\" y=\"" + num(yy) + "\" width=\"" + num(cell) +
             "\" height=\"" + num(cell) + "\" fill=\"" + fill + "\" stroke=\"#eee\"><title>" + num(counts[i][k]) +
             "</title></rect>\n";
    }
  }
  for (std::size_t k = 0; k < cols; ++k)
    svg += "<text x=\"" + num(left + cell * (static_cast<double>(k) + 0.5)) + "\" y=\"" +
           num(top + cell * static_cast<double>(rows) + 14) +
           "\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">" + std::to_string(k) + "</text>\n";
  svg += "</svg>\n";
  return svg;
}

std::vector<fs::path> emit_plots(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("run directory does not exist: " + root.string());
  const auto series = collect_curves(root);
  if (series.empty()) throw std::invalid_argument("no accuracy_matrix.csv found under " + root.string());
  const fs::path out = root / "plots";
  fs::create_directories(out);
  std::vector<fs::path> written;

  write_text(out / "accuracy.svg", accuracy_svg(series));
  written.push_back(out / "accuracy.svg");
  std::string csv = "series,seeds,task,accuracy\n";
  for (const auto& s : series)
    for (std::size_t t = 0; t < s.accuracy.size(); ++t) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.10g", s.accuracy[t]);
      csv += s.label + ',' + std::to_string(s.seeds) + ',' + std::to_string(t) + ',' + buf + '\n';
    }
  write_text(out / "accuracy.csv", csv);
  written.push_back(out / "accuracy.csv");

  std::map<std::string, fs::path> first_heatmap;
  std::vector<fs::path> maps;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "heatmap.csv") maps.push_back(e.path());
  std::sort(maps.begin(), maps.end());
  for (const auto& p : maps) first_heatmap.try_emplace(series_label(root, p.parent_path()), p);
  for (const auto& [label, path] : first_heatmap) {
    std::vector<int> clients;
    const auto counts = read_heatmap(path, clients);
    std::string name = label;
    std::replace(name.begin(), name.end(), '/', '_');
    const fs::path file = out / ("heatmap_" + name + ".svg");
    write_text(file, heatmap_svg(clients, counts));
    written.push_back(file);
  }
  spdlog::info("wrote {} plot files under {}", written.size(), out.string());
  return written;
}

}  // namespace fcil

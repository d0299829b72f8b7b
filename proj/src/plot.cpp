// SPDX-License-Identifier: Apache-2.0

#include "tfs/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace fs = std::filesystem;

namespace tfs {

namespace {

constexpr int kWidth = 640, kHeight = 420;
constexpr int kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                         "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label,
                           const std::vector<Series>& series, bool log_y) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  bool any = false;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size())
      throw InvalidInput("svg_line_chart: series size mismatch");
    for (size_t i = 0; i < s.x.size(); ++i) {
      double y = s.y[i];
      if (!std::isfinite(s.x[i]) || !std::isfinite(y)) continue;
      if (log_y && y <= 0.0) continue;
      any = true;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (!any) throw InvalidInput("svg_line_chart: no plottable points");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (log_y) {
    ymin = std::log10(ymin);
    ymax = std::log10(ymax);
  }
  if (ymax == ymin) ymax = ymin + 1.0;

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) {
    if (log_y) y = std::log10(y);
    return kTop + ph - (y - ymin) / (ymax - ymin) * ph;
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\">"
      << title << "</text>\n";

  // Axes with five ticks each.
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\""
      << kLeft + pw << "\" y2=\"" << kTop + ph << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft
      << "\" y2=\"" << kTop + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double fx = xmin + (xmax - xmin) * i / 4.0;
    double gy = ymin + (ymax - ymin) * i / 4.0;
    double label_y = log_y ? std::pow(10.0, gy) : gy;
    svg << "<text x=\"" << fmt(px(fx)) << "\" y=\"" << kTop + ph + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fmt(fx) << "</text>\n"
        << "<text x=\"" << kLeft - 8 << "\" y=\""
        << fmt(kTop + ph - ph * i / 4.0 + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << fmt(label_y) << "</text>\n";
  }
  svg << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\">"
      << x_label << "</text>\n"
      << "<text x=\"16\" y=\"" << kTop + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "transform=\"rotate(-90 16 "
      << kTop + ph / 2 << ")\">" << y_label << (log_y ? " (log)" : "")
      << "</text>\n";

  int ci = 0;
  for (const Series& s : series) {
    const char* color = kColors[ci % 8];
    std::ostringstream pts;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (log_y && s.y[i] <= 0.0) continue;
      pts << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"" << pts.str() << "\"/>\n";
    int ly = kTop + 6 + 16 * ci;
    svg << "<line x1=\"" << kLeft + pw - 130 << "\" y1=\"" << ly << "\" x2=\""
        << kLeft + pw - 110 << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << kLeft + pw - 104 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label
        << "</text>\n";
    ++ci;
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::string> plot_train_log(const std::string& csv_path,
                                        const std::string& out_dir) {
  std::ifstream in(csv_path);
  if (!in) throw InvalidInput("plot_train_log: cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line))
    throw InvalidInput("plot_train_log: empty log " + csv_path);
  std::vector<std::string> cols = split_csv_line(line);
  if (cols.size() < 3 || cols[0] != "step")
    throw InvalidInput("plot_train_log: unexpected header in " + csv_path);

  std::vector<std::vector<double>> data(cols.size());
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != cols.size()) continue;
    for (size_t i = 0; i < cells.size(); ++i)
      data[i].push_back(std::stod(cells[i]));
  }
  if (data[0].empty())
    throw InvalidInput("plot_train_log: no rows in " + csv_path);

  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (size_t i = 1; i < cols.size(); ++i) {
    if (cols[i] == "wall_s") continue;
    Series s{cols[i], data[0], data[i]};
    std::string path = (fs::path(out_dir) / ("loss_" + cols[i] + ".svg")).string();
    std::ofstream out(path);
    out << svg_line_chart("training loss: " + cols[i], "step", cols[i], {s});
    written.push_back(path);
  }
  return written;
}

std::string plot_bench(const std::string& csv_path, const std::string& out_path) {
  std::ifstream in(csv_path);
  if (!in) throw InvalidInput("plot_bench: cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line).size() != 4)
    throw InvalidInput("plot_bench: bad header in " + csv_path);

  std::vector<Series> series;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != 4) continue;
    double chamfer = std::stod(cells[3]);
    if (!std::isfinite(chamfer)) continue;
    auto it = std::find_if(series.begin(), series.end(),
                           [&](const Series& s) { return s.label == cells[0]; });
    if (it == series.end()) {
      series.push_back({cells[0], {}, {}});
      it = series.end() - 1;
    }
    it->x.push_back(std::stod(cells[2]));
    it->y.push_back(chamfer);
  }
  std::string svg = svg_line_chart("canonical chamfer vs wall-clock",
                                   "wall-clock (s)", "chamfer (cm)", series);
  fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream out(out_path);
  out << svg;
  return out_path;
}

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0
//
// Deterministic SVG charts for training logs and backend benchmarks.

#pragma once

#include "tfs/types.hpp"

#include <string>
#include <vector>

namespace tfs {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Line chart with axes, tick labels and a legend; byte-deterministic for
// identical inputs. Throws InvalidInput when no series has a point.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label,
                           const std::vector<Series>& series,
                           bool log_y = false);

// One SVG per loss term plus the total, from a train_log.csv. Returns the
// written paths. Throws InvalidInput on an empty or headerless log.
std::vector<std::string> plot_train_log(const std::string& csv_path,
                                        const std::string& out_dir);

// Chamfer vs wall-clock with one labeled curve per backend, from a bench.csv.
std::string plot_bench(const std::string& csv_path, const std::string& out_path);

}  // namespace tfs

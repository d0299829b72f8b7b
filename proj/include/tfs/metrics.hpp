// SPDX-License-Identifier: Apache-2.0
//
// Six-metric reconstruction suite with a brute-force nearest-neighbor oracle.

#pragma once

#include "tfs/mesh.hpp"
#include "tfs/types.hpp"

#include <nlohmann/json_fwd.hpp>

namespace tfs {

struct MetricReport {
  double dist_acc_cm = 0.0;      // mean pred->gt distance
  double completeness_cm = 0.0;  // mean gt->pred distance
  double precision_pct = 0.0;
  double recall_pct = 0.0;
  double f_score_pct = 0.0;
  double chamfer_cm = 0.0;  // (dist_acc + completeness) / 2
  double threshold_cm = 5.0;

  nlohmann::json to_json() const;
};

// Nearest-neighbor distance from each query column to the ref point set,
// via a uniform spatial grid.
VecX nearest_distances(const MatX& query, const MatX& ref);
// O(N*M) reference used as the correctness oracle.
VecX nearest_distances_bruteforce(const MatX& query, const MatX& ref);

// Metrics from two point sets (scene units are meters; reports in cm).
MetricReport metrics_from_points(const MatX& pred, const MatX& gt,
                                 double threshold_cm, bool bruteforce = false);

// Samples n_points area-weighted on each mesh (or uses vertices directly when
// use_vertices) and reports the six metrics. Throws on empty meshes.
MetricReport compute_metrics(const Mesh& pred, const Mesh& gt, int n_points,
                             double threshold_cm, std::uint64_t seed,
                             bool use_vertices = false, bool bruteforce = false);

std::string metric_csv_header();
std::string metric_csv_row(const std::string& group, int frame,
                           const MetricReport& report);

}  // namespace tfs

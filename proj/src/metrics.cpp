// SPDX-License-Identifier: Apache-2.0

#include "tfs/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace tfs {

namespace {

struct SpatialGrid {
  Vec3 lo;
  double cell;
  int nx, ny, nz;
  std::unordered_map<std::int64_t, std::vector<int>> cells;
  const MatX* pts;

  explicit SpatialGrid(const MatX& ref) : pts(&ref) {
    Vec3 hi;
    lo = hi = ref.col(0);
    for (Eigen::Index c = 1; c < ref.cols(); ++c) {
      lo = lo.cwiseMin(Vec3(ref.col(c)));
      hi = hi.cwiseMax(Vec3(ref.col(c)));
    }
    double diag = (hi - lo).norm();
    // Aim for O(1) points per cell on uniformly spread sets.
    double target = std::cbrt(static_cast<double>(ref.cols()));
    // Degenerate extents (single point, coincident points) get a unit cell so
    // ring expansion below terminates quickly.
    cell = diag > 1e-12 ? diag / std::max(target, 1.0) : 1.0;
    nx = static_cast<int>((hi[0] - lo[0]) / cell) + 1;
    ny = static_cast<int>((hi[1] - lo[1]) / cell) + 1;
    nz = static_cast<int>((hi[2] - lo[2]) / cell) + 1;
    for (Eigen::Index c = 0; c < ref.cols(); ++c)
      cells[key_of(ref.col(c))].push_back(static_cast<int>(c));
  }

  std::int64_t key(int ix, int iy, int iz) const {
    return (static_cast<std::int64_t>(ix) * 73856093) ^
           (static_cast<std::int64_t>(iy) * 19349663) ^
           (static_cast<std::int64_t>(iz) * 83492791);
  }
  void coords(const Vec3& p, int& ix, int& iy, int& iz) const {
    ix = static_cast<int>(std::floor((p[0] - lo[0]) / cell));
    iy = static_cast<int>(std::floor((p[1] - lo[1]) / cell));
    iz = static_cast<int>(std::floor((p[2] - lo[2]) / cell));
  }
  std::int64_t key_of(const Vec3& p) const {
    int ix, iy, iz;
    coords(p, ix, iy, iz);
    return key(ix, iy, iz);
  }

  double nearest(const Vec3& q) const {
    int qx, qy, qz;
    coords(q, qx, qy, qz);
    double best = std::numeric_limits<double>::infinity();
    // Expand rings of cells until the found distance is provably minimal.
    for (int ring = 0;; ++ring) {
      bool any_cell = false;
      for (int ix = qx - ring; ix <= qx + ring; ++ix) {
        for (int iy = qy - ring; iy <= qy + ring; ++iy) {
          for (int iz = qz - ring; iz <= qz + ring; ++iz) {
            if (std::max({std::abs(ix - qx), std::abs(iy - qy), std::abs(iz - qz)}) != ring)
              continue;
            auto it = cells.find(key(ix, iy, iz));
            if (it == cells.end()) continue;
            any_cell = true;
            for (int idx : it->second)
              best = std::min(best, (pts->col(idx) - q).norm());
          }
        }
      }
      (void)any_cell;
      // Any point outside the searched ring block is at least ring*cell away
      // from the query's cell boundary.
      if (best <= ring * cell) return best;
      if (ring > nx + ny + nz + 2) {
        if (std::isfinite(best)) return best;
        // Query far outside the populated region: fall back to a scan.
        for (Eigen::Index c = 0; c < pts->cols(); ++c)
          best = std::min(best, (pts->col(c) - q).norm());
        return best;
      }
    }
  }
};

double mean(const VecX& v) { return v.sum() / v.size(); }

double pct_within(const VecX& d, double thr) {
  int count = 0;
  for (Eigen::Index i = 0; i < d.size(); ++i)
    if (d[i] <= thr) ++count;
  return 100.0 * count / d.size();
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return nlohmann::json{{"dist_acc_cm", dist_acc_cm},
                        {"completeness_cm", completeness_cm},
                        {"precision_pct", precision_pct},
                        {"recall_pct", recall_pct},
                        {"f_score_pct", f_score_pct},
                        {"chamfer_cm", chamfer_cm},
                        {"threshold_cm", threshold_cm},
                        {"chamfer_convention", "symmetric mean of directed means"}};
}

VecX nearest_distances(const MatX& query, const MatX& ref) {
  if (query.cols() == 0 || ref.cols() == 0)
    throw InvalidInput("nearest_distances: empty point set");
  SpatialGrid grid(ref);
  VecX out(query.cols());
  for (Eigen::Index c = 0; c < query.cols(); ++c) out[c] = grid.nearest(query.col(c));
  return out;
}

VecX nearest_distances_bruteforce(const MatX& query, const MatX& ref) {
  if (query.cols() == 0 || ref.cols() == 0)
    throw InvalidInput("nearest_distances: empty point set");
  VecX out(query.cols());
  for (Eigen::Index c = 0; c < query.cols(); ++c) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < ref.cols(); ++r)
      best = std::min(best, (query.col(c) - ref.col(r)).norm());
    out[c] = best;
  }
  return out;
}

MetricReport metrics_from_points(const MatX& pred, const MatX& gt,
                                 double threshold_cm, bool bruteforce) {
  VecX d_pg = bruteforce ? nearest_distances_bruteforce(pred, gt)
                         : nearest_distances(pred, gt);
  VecX d_gp = bruteforce ? nearest_distances_bruteforce(gt, pred)
                         : nearest_distances(gt, pred);
  double thr_m = threshold_cm / 100.0;

  MetricReport rep;
  rep.threshold_cm = threshold_cm;
  rep.dist_acc_cm = mean(d_pg) * 100.0;
  rep.completeness_cm = mean(d_gp) * 100.0;
  rep.precision_pct = pct_within(d_pg, thr_m);
  rep.recall_pct = pct_within(d_gp, thr_m);
  rep.f_score_pct = (rep.precision_pct + rep.recall_pct > 0.0)
                        ? 2.0 * rep.precision_pct * rep.recall_pct /
                              (rep.precision_pct + rep.recall_pct)
                        : 0.0;
  rep.chamfer_cm = 0.5 * (rep.dist_acc_cm + rep.completeness_cm);
  return rep;
}

MetricReport compute_metrics(const Mesh& pred, const Mesh& gt, int n_points,
                             double threshold_cm, std::uint64_t seed,
                             bool use_vertices, bool bruteforce) {
  if (pred.empty() || gt.empty())
    throw InvalidInput("compute_metrics: empty mesh");
  auto points = [&](const Mesh& m, std::uint64_t s) {
    if (!use_vertices) return sample_surface(m, n_points, s);
    MatX pts(3, static_cast<Eigen::Index>(m.vertices.size()));
    for (size_t i = 0; i < m.vertices.size(); ++i)
      pts.col(static_cast<Eigen::Index>(i)) = m.vertices[i];
    return pts;
  };
  return metrics_from_points(points(pred, seed), points(gt, seed + 1),
                             threshold_cm, bruteforce);
}

std::string metric_csv_header() {
  return "group,frame,dist_acc_cm,completeness_cm,precision_pct,recall_pct,"
         "f_score_pct,chamfer_cm,threshold_cm";
}

std::string metric_csv_row(const std::string& group, int frame,
                           const MetricReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << group << ',' << frame << ',' << r.dist_acc_cm << ',' << r.completeness_cm
     << ',' << r.precision_pct << ',' << r.recall_pct << ',' << r.f_score_pct
     << ',' << r.chamfer_cm << ',' << r.threshold_cm;
  return os.str();
}

}  // namespace tfs

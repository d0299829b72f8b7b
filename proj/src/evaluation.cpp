// SPDX-License-Identifier: Apache-2.0

#include "tfs/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

namespace fs = std::filesystem;

namespace tfs {

int num_workers() {
  if (const char* env = std::getenv("TFS_NUM_WORKERS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

namespace {

// Static chunking so results land at fixed indices regardless of worker count.
void parallel_for(int n, const std::function<void(int, int)>& body) {
  int workers = std::min(num_workers(), std::max(n, 1));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  int chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(body, lo, hi);
  }
  for (auto& t : pool) t.join();
}

Mesh merge_meshes(const Mesh& a, const Mesh& b) {
  Mesh out = a;
  int off = static_cast<int>(out.vertices.size());
  out.vertices.insert(out.vertices.end(), b.vertices.begin(), b.vertices.end());
  for (const auto& f : b.faces)
    out.faces.push_back({f[0] + off, f[1] + off, f[2] + off});
  out.vertex_weights.clear();
  return out;
}

const char* entity_tag(Entity e) {
  return e == Entity::Deformable ? "deformable" : "non-deformable";
}

}  // namespace

Mesh extract_canonical_mesh(const SceneModel& model, Entity e, int res) {
  if (res < 2) throw InvalidInput("extract_canonical_mesh: res must be >= 2");
  const SkeletonFrame& skel = model.entity(e).canonical;
  Vec3 lo = skel.canonical_joints[0], hi = skel.canonical_joints[0];
  for (const Vec3& j : skel.canonical_joints) {
    lo = lo.cwiseMin(j);
    hi = hi.cwiseMax(j);
  }
  // 20% of the bbox diagonal plus a floor covering the sphere-initialized
  // surface of point skeletons.
  double margin = 0.2 * (hi - lo).norm() +
                  std::max(0.45, 1.5 * model.config().sphere_radius);
  lo -= Vec3::Constant(margin);
  hi += Vec3::Constant(margin);

  const int n = res + 1;
  std::vector<double> values(static_cast<size_t>(n) * n * n);
  Vec3 step = (hi - lo) / res;
  parallel_for(n, [&](int x0, int x1) {
    MatX pts(3, static_cast<Eigen::Index>(x1 - x0) * n * n);
    Eigen::Index c = 0;
    for (int ix = x0; ix < x1; ++ix)
      for (int iy = 0; iy < n; ++iy)
        for (int iz = 0; iz < n; ++iz)
          pts.col(c++) = lo + Vec3(ix * step.x(), iy * step.y(), iz * step.z());
    MatX sdf, feat, grad;
    model.sdf_forward(e, pts, sdf, feat, grad, nullptr);
    c = 0;
    for (int ix = x0; ix < x1; ++ix)
      for (int iy = 0; iy < n; ++iy)
        for (int iz = 0; iz < n; ++iz)
          values[(static_cast<size_t>(ix) * n + iy) * n + iz] = sdf(0, c++);
  });
  Mesh mesh = marching_cubes_grid(values, lo, hi, res, entity_tag(e));
  return largest_component(mesh);
}

Mesh pose_mesh(const Mesh& mesh, const SkinningNet& snet,
               const SkeletonFrame& skel) {
  Mesh out = mesh;
  out.vertex_weights.resize(mesh.vertices.size());
  parallel_for(static_cast<int>(mesh.vertices.size()), [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      SkinningWeights w = snet.predict(mesh.vertices[static_cast<size_t>(i)]);
      out.vertices[static_cast<size_t>(i)] =
          lbs_forward(w, skel, mesh.vertices[static_cast<size_t>(i)]);
      out.vertex_weights[static_cast<size_t>(i)] = w.w;
    }
  });
  return out;
}

EvalResult evaluate_run(const SceneModel& model, const Dataset& dataset,
                        const EvalOptions& opts, const std::string& report_dir) {
  std::vector<int> frames = opts.frames;
  if (frames.empty())
    for (int t = 0; t < dataset.frames(); ++t) frames.push_back(t);
  fs::create_directories(report_dir);
  fs::path mesh_dir = fs::path(report_dir) / "meshes";
  if (opts.write_meshes) fs::create_directories(mesh_dir);

  Mesh canon_d = extract_canonical_mesh(model, Entity::Deformable, opts.mesh_res);
  Mesh canon_nd =
      extract_canonical_mesh(model, Entity::NonDeformable, opts.mesh_res);
  if (opts.write_meshes) {
    write_obj(canon_d, (mesh_dir / "canonical_d.obj").string());
    write_obj(canon_nd, (mesh_dir / "canonical_nd.obj").string());
  }

  EvalResult result;
  struct Sums {
    MetricReport acc;
    int n = 0;
  };
  std::map<std::string, Sums> sums;

  for (int t : frames) {
    if (t < 0 || t >= dataset.frames())
      throw InvalidInput("evaluate_run: frame index out of range");
    std::string gt_d_path = dataset.gt_posed_path(t, Entity::Deformable);
    std::string gt_nd_path = dataset.gt_posed_path(t, Entity::NonDeformable);
    if (!fs::exists(gt_d_path) || !fs::exists(gt_nd_path)) {
      result.skipped_frames.push_back(t);
      for (const char* g : {"scene", "deformable", "non-deformable"})
        result.per_frame.push_back({g, t, true, {}});
      continue;
    }
    const FramePose& fp = dataset.poses[static_cast<size_t>(t)];
    Mesh pred_d =
        pose_mesh(canon_d, model.entity(Entity::Deformable).snet, fp.deformable);
    Mesh pred_nd =
        pose_mesh(canon_nd, model.entity(Entity::NonDeformable).snet, fp.rigid);
    Mesh gt_d = read_obj(gt_d_path);
    Mesh gt_nd = read_obj(gt_nd_path);
    if (opts.write_meshes) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "posed_%04d_", t);
      write_obj(pred_d, (mesh_dir / (std::string(buf) + "d.obj")).string());
      write_obj(pred_nd, (mesh_dir / (std::string(buf) + "nd.obj")).string());
    }

    auto score = [&](const std::string& group, const Mesh& pred, const Mesh& gt) {
      MetricReport rep = compute_metrics(
          pred, gt, opts.n_points, opts.threshold_cm,
          opts.seed + static_cast<std::uint64_t>(t) * 17, opts.use_vertices,
          opts.bruteforce);
      result.per_frame.push_back({group, t, false, rep});
      Sums& s = sums[group];
      s.acc.dist_acc_cm += rep.dist_acc_cm;
      s.acc.completeness_cm += rep.completeness_cm;
      s.acc.precision_pct += rep.precision_pct;
      s.acc.recall_pct += rep.recall_pct;
      s.acc.f_score_pct += rep.f_score_pct;
      s.acc.chamfer_cm += rep.chamfer_cm;
      ++s.n;
    };
    score("scene", merge_meshes(pred_d, pred_nd), merge_meshes(gt_d, gt_nd));
    score("deformable", pred_d, gt_d);
    score("non-deformable", pred_nd, gt_nd);
  }

  for (auto& [group, s] : sums) {
    MetricReport agg = s.acc;
    agg.dist_acc_cm /= s.n;
    agg.completeness_cm /= s.n;
    agg.precision_pct /= s.n;
    agg.recall_pct /= s.n;
    agg.f_score_pct /= s.n;
    agg.chamfer_cm /= s.n;
    agg.threshold_cm = opts.threshold_cm;
    result.aggregate[group] = agg;
  }

  std::ofstream csv(fs::path(report_dir) / "metrics.csv");
  csv << metric_csv_header() << '\n';
  for (const EvalRecord& r : result.per_frame)
    if (!r.skipped) csv << metric_csv_row(r.group, r.frame, r.report) << '\n';
  // Aggregate rows use frame index -1.
  for (const auto& [group, rep] : result.aggregate)
    csv << metric_csv_row(group, -1, rep) << '\n';

  nlohmann::json j;
  j["threshold_cm"] = opts.threshold_cm;
  j["chamfer_convention"] = "symmetric mean of directed means";
  j["skipped_frames"] = result.skipped_frames;
  for (const EvalRecord& r : result.per_frame) {
    if (r.skipped) continue;
    j["groups"][r.group]["frames"][std::to_string(r.frame)] = r.report.to_json();
  }
  for (const auto& [group, rep] : result.aggregate)
    j["groups"][group]["aggregate"] = rep.to_json();
  std::ofstream js(fs::path(report_dir) / "metrics.json");
  js << j.dump(2) << '\n';

  return result;
}

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0
//
// Canonical mesh extraction, posing via predicted skinning weights, and the
// per-run reconstruction reports (scene / deformable / non-deformable).

#pragma once

#include "tfs/metrics.hpp"
#include "tfs/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace tfs {

// Worker bound for batched evaluation: TFS_NUM_WORKERS when set, otherwise
// the hardware concurrency, at least 1.
int num_workers();

// Marching cubes at isolevel 0 over the entity's SDF head. The grid spans the
// canonical skeleton bbox padded by 20% of its diagonal plus a fixed margin
// (so point-skeleton entities still enclose the sphere-initialized surface).
// Keeps the largest connected component. Throws InvalidInput when the grid
// holds no zero crossing.
Mesh extract_canonical_mesh(const SceneModel& model, Entity e, int res = 192);

// Per vertex: w = predict_skinning(v), v' = lbs_forward(w, skel, v).
// Topology unchanged; the predicted weights are stored on the result.
Mesh pose_mesh(const Mesh& mesh, const SkinningNet& snet,
               const SkeletonFrame& skel);

struct EvalOptions {
  std::vector<int> frames;  // empty = all frames
  int mesh_res = 192;
  int n_points = 10000;
  double threshold_cm = 5.0;
  bool use_vertices = false;
  bool bruteforce = false;
  std::uint64_t seed = 0;
  bool write_meshes = true;
};

struct EvalRecord {
  std::string group;  // "scene", "deformable" or "non-deformable"
  int frame = 0;
  bool skipped = false;  // ground-truth mesh missing
  MetricReport report;
};

struct EvalResult {
  std::vector<EvalRecord> per_frame;
  std::map<std::string, MetricReport> aggregate;  // per group, over kept frames
  std::vector<int> skipped_frames;
};

// Extracts both canonical meshes once, poses them per frame, and scores the
// three groups against the dataset's ground-truth meshes. Writes metrics.csv,
// metrics.json and (optionally) the predicted meshes under report_dir.
EvalResult evaluate_run(const SceneModel& model, const Dataset& dataset,
                        const EvalOptions& opts, const std::string& report_dir);

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0
//
// Scene model assembly (per-entity deformer + fields, unified radiance head,
// learnable density sharpness), the end-to-end training loop and the
// backend timing benchmark.

#pragma once

#include "tfs/deformer.hpp"
#include "tfs/fields.hpp"
#include "tfs/losses.hpp"
#include "tfs/rendering.hpp"
#include "tfs/scene.hpp"

#include <string>
#include <vector>

namespace tfs {

struct TrainConfig {
  double lr = 5.0e-4;  // Adam, beta1 0.9 / beta2 0.999
  int rays_per_entity = 512;
  int samples_per_ray = 64;
  int steps = 20000;
  int checkpoint_every = 1000;
  std::uint64_t seed = 0;
  std::string backend = "inn";  // or "broyden"
  LossWeights weights;

  // Network sizes (reducible for desk-scale runs).
  int inn_hidden = 512;
  int inn_proj = 256;
  int snet_hidden = 256;
  int sdf_hidden = 256;
  int sdf_feat = 256;
  int rgb_hidden = 256;
  int bone_samples = 128;  // P for the pose loss
  int chunk_points = 2048;
  double beta_init = 0.1;
  double sphere_radius = 0.3;

  // Ablation switches.
  bool use_xc_init = true;
  bool share_heads = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EntityModel {
  CouplingINN inn;
  SkinningNet snet;
  SdfHead sdf;
  SkeletonFrame canonical;
  double sigma = 0.1;     // semantic weight scale
  double inshape_r0 = 0.05;
};

// Caches of one batched SDF evaluation (input assembly + head).
struct SdfEvalCaches {
  SdfInputCache input;
  SdfHead::Cache head;
  int pad_rows = 0;  // zero rows inserted for the shared-head configuration
};

class SceneModel {
 public:
  SceneModel() = default;
  static SceneModel build(const TrainConfig& cfg, const Dataset& dataset);

  EntityModel& entity(Entity e) { return e == Entity::Deformable ? d_ : nd_; }
  const EntityModel& entity(Entity e) const {
    return e == Entity::Deformable ? d_ : nd_;
  }
  RgbHead& rgb() { return rgb_; }
  const RgbHead& rgb() const { return rgb_; }
  double beta() const { return beta_(0, 0); }
  bool share_heads() const { return share_heads_; }
  const TrainConfig& config() const { return cfg_; }

  // SDF head of the entity (the deformable head when heads are shared).
  SdfHead& head_of(Entity e);
  const SdfHead& head_of(Entity e) const;

  // Batched SDF evaluation in canonical space with analytic input gradients.
  void sdf_forward(Entity e, const MatX& x_c, MatX& sdf, MatX& feat, MatX& grad,
                   SdfEvalCaches* caches) const;
  // Accumulates head parameter gradients; returns gradient w.r.t. x_c.
  MatX sdf_backward(Entity e, const SdfEvalCaches& caches, const MatX& g_sdf,
                    const MatX& g_feat, const MatX& g_grad);

  double sdf_value(Entity e, const Vec3& x_c) const;

  // Conditioning vector for the radiance head: both entities' posed joints.
  VecX pose_vector(const FramePose& fp) const;

  ParamList params();
  Checkpoint to_checkpoint(const std::map<std::string, std::string>& metadata);
  static SceneModel load(const Checkpoint& ckpt, const Dataset& dataset);

  MatX beta_;   // 1x1 learnable, kept positive
  MatX gbeta_;

 private:
  TrainConfig cfg_;
  EntityModel d_, nd_;
  RgbHead rgb_;
  bool share_heads_ = false;
};

struct TrainResult {
  std::vector<LossReport> log;
  std::vector<double> wall_s;
  bool nan_abort = false;
  int abort_step = -1;
  int steps_done = 0;
};

// Runs the optimization loop; writes train_log.csv and checkpoints under
// run_dir (created if needed). Deterministic given cfg.seed.
TrainResult train(const TrainConfig& cfg, const Dataset& dataset,
                  const std::string& run_dir, SceneModel* model_out = nullptr);

struct BenchPoint {
  std::string backend;
  int step = 0;
  double wall_s = 0.0;
  double chamfer_cm = 0.0;
};

struct BenchResult {
  std::vector<BenchPoint> points;
  bool budget_exhausted = false;
  double step_time_inn = 0.0;
  double step_time_broyden = 0.0;
};

// Trains both backends with identical seeds under a shared wall budget,
// recording canonical-space Chamfer at checkpoint intervals.
BenchResult bench_backends(TrainConfig cfg, const Dataset& dataset,
                           double budget_s, const std::string& out_dir,
                           int eval_res = 48, int eval_points = 2000);

}  // namespace tfs

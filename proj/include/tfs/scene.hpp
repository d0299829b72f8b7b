// SPDX-License-Identifier: Apache-2.0
//
// Procedural ground truth: an articulated capsule chain plus a rigid box,
// posed over time and rendered to RGB + semantic masks with exact analytic
// skinning weights, SDFs and meshes.

#pragma once

#include "tfs/geometry.hpp"
#include "tfs/image.hpp"
#include "tfs/mesh.hpp"
#include "tfs/rendering.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace tfs {

struct SceneConfig {
  int n_bones = 4;              // serial chain, parents (-1,0,1,2,...)
  double bone_length = 0.3;     // meters
  double capsule_radius = 0.07;
  Vec3 box_half = Vec3(0.09, 0.09, 0.09);
  Vec3 box_center = Vec3(0.55, 0.0, 0.0);  // canonical rigid center
  Vec3 color_d = Vec3(0.85, 0.35, 0.25);
  Vec3 color_nd = Vec3(0.25, 0.45, 0.9);
  double amplitude = 0.55;  // radians, per-joint sinusoid
  int frames = 50;
  int cams = 1;
  int width = 256, height = 256;
  double focal = 300.0;  // pixels at width 256, scaled with width

  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
};

// Skeleton poses of both entities for one frame.
struct FramePose {
  SkeletonFrame deformable;
  SkeletonFrame rigid;
};

class AnalyticScene {
 public:
  explicit AnalyticScene(const SceneConfig& cfg);

  const SceneConfig& config() const { return cfg_; }
  const SkeletonFrame& canonical_deformable() const { return canon_d_; }
  const SkeletonFrame& canonical_rigid() const { return canon_nd_; }
  const SceneBounds& bounds() const { return bounds_; }

  // Exact canonical SDFs (negative inside).
  double sdf_deformable(const Vec3& x) const;
  double sdf_rigid(const Vec3& x) const;
  double sdf(Entity e, const Vec3& x) const {
    return e == Entity::Deformable ? sdf_deformable(x) : sdf_rigid(x);
  }
  Vec3 color(Entity e) const {
    return e == Entity::Deformable ? cfg_.color_d : cfg_.color_nd;
  }

  // Normalized inverse-square distance to the two nearest bone segments.
  SkinningWeights analytic_weights(const Vec3& x_c) const;
  // Rigid entity: trivially one-hot.
  SkinningWeights analytic_weights_rigid(const Vec3&) const {
    return SkinningWeights::one_hot(1, 0);
  }

  // Signed distance of the posed entity: sdf(canonical of x) where the
  // canonical point solves Eq.-1 LBS with the analytic weights.
  double sdf_posed(Entity e, const SkeletonFrame& skel, const Vec3& x,
                   Vec3* warm_start = nullptr) const;

 private:
  SceneConfig cfg_;
  SkeletonFrame canon_d_, canon_nd_;
  SceneBounds bounds_;
};

AnalyticScene build_scene(const SceneConfig& cfg);

// Sinusoidal joint trajectories for the chain plus a translating/rotating
// "handover" path for the rigid box that crosses the chain's workspace.
std::vector<FramePose> pose_sequence(const AnalyticScene& scene, int T);

// Evenly spaced cameras on a ring looking at the scene center.
std::vector<Camera> make_cameras(const SceneConfig& cfg);

struct DatasetFrame {
  Image rgb;
  Image mask;  // labels 0/1/2 in the red channel
};

DatasetFrame render_ground_truth(const AnalyticScene& scene, const FramePose& pose,
                                 const Camera& cam);

// Writes meta.json, frames/{t:04d}/{rgb,mask}_{cam}.png + skel.json and
// gt/ canonical + per-frame posed meshes. Refuses a non-empty directory
// unless overwrite.
void export_dataset(const AnalyticScene& scene, const std::vector<FramePose>& poses,
                    const std::vector<Camera>& cams, const std::string& path,
                    std::uint64_t seed, bool overwrite, int mesh_res = 96);

// In-memory view of an exported dataset.
struct Dataset {
  SceneConfig scene;
  std::uint64_t seed = 0;
  SceneBounds bounds;
  std::vector<Camera> cameras;
  std::vector<FramePose> poses;
  std::string root;

  int frames() const { return static_cast<int>(poses.size()); }
  std::string rgb_path(int t, int cam) const;
  std::string mask_path(int t, int cam) const;
  std::string gt_canonical_path(Entity e) const;
  std::string gt_posed_path(int t, Entity e) const;
};

Dataset load_dataset(const std::string& path);

// FNV-1a over every regular file (sorted relative paths + contents).
std::string dataset_hash(const std::string& path);

}  // namespace tfs

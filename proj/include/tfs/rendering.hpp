// SPDX-License-Identifier: Apache-2.0
//
// Semantic-aware ray generation, stratified point sampling, SDF-to-density
// conversion and composite volume rendering across the two entity branches.

#pragma once

#include "tfs/fields.hpp"
#include "tfs/geometry.hpp"
#include "tfs/image.hpp"

#include <optional>
#include <utility>

namespace tfs {

struct Camera {
  Mat3 intrinsics = Mat3::Identity();      // pixels
  RigidTransform extrinsics;               // world -> camera
  int width = 0, height = 0;

  void validate() const;
  Vec3 center() const;                     // camera position in world space
  Vec3 ray_direction(double px, double py) const;  // unit, world space

  nlohmann::json to_json() const;
  static Camera from_json(const nlohmann::json& j);
};

// Axis-aligned scene bounds used to clip rays.
struct SceneBounds {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);
  double diagonal() const { return (hi - lo).norm(); }
};

struct RayBatch {
  Entity entity = Entity::Deformable;
  MatX origins;     // 3xN
  MatX directions;  // 3xN, unit
  MatX target_rgb;  // 3xN in [0,1]
  VecX near, far;
  std::vector<std::pair<int, int>> pixels;  // (x, y)

  int size() const { return static_cast<int>(directions.cols()); }
};

// Mask labels in the red channel of the mask image.
constexpr unsigned char kMaskBackground = 0;
constexpr unsigned char kMaskDeformable = 1;
constexpr unsigned char kMaskNonDeformable = 2;

// Draws per-entity ray batches from the dilated entity mask regions:
// 80% inside the mask, 20% from the dilation band (radius 16 px). Stateful so
// that frames where an entity is absent fall back to its last known region.
class SemanticRaySampler {
 public:
  explicit SemanticRaySampler(int dilation_radius = 16)
      : dilation_radius_(dilation_radius) {}

  std::pair<RayBatch, RayBatch> sample(const Image& image, const Image& mask,
                                       const Camera& cam, const SceneBounds& bounds,
                                       int n_rays_per_entity, std::uint64_t seed);

  int warning_count() const { return warnings_; }

 private:
  RayBatch sample_entity(Entity entity, const Image& image,
                         const std::vector<char>& inside,
                         const std::vector<char>& band, const Camera& cam,
                         const SceneBounds& bounds, int n_rays, std::uint64_t seed);

  int dilation_radius_;
  int warnings_ = 0;
  std::optional<std::vector<char>> last_band_d_, last_band_nd_;
  int last_w_ = 0, last_h_ = 0;
};

// Binary dilation by Chebyshev radius.
std::vector<char> dilate_mask(const std::vector<char>& mask, int w, int h, int radius);

// Ray/AABB intersection; returns false if the ray misses the box.
bool ray_aabb(const Vec3& origin, const Vec3& dir, const SceneBounds& bounds,
              double& t_near, double& t_far);

// One jittered depth per uniform stratum in [near, far] per ray: (S x N).
MatX stratified_depths(const RayBatch& batch, int n_samples, std::uint64_t seed,
                       bool jitter = true);

// 3D points for the sampled depths; column index = ray * S + sample.
MatX points_along_rays(const RayBatch& batch, const MatX& depths);

// Laplace-CDF density: alpha_scale * CDF_beta(-sdf); monotone decreasing,
// alpha_scale/2 at the surface.
double sdf_to_density(double sdf, double beta, double alpha_scale);
// Elementwise partials (d_density/d_sdf, d_density/d_beta, d_density/d_alpha).
void sdf_to_density_grad(double sdf, double beta, double alpha_scale,
                         double& d_sdf, double& d_beta, double& d_alpha);

// Per-ray samples of one entity branch, already depth-sorted.
struct SampleSet {
  Entity entity = Entity::Deformable;
  VecX depths;
  VecX density;
  MatX rgb;  // 3xS
};

struct RenderOutput {
  Vec3 rgb = Vec3::Zero();
  double alpha = 0.0;
  double alpha_d = 0.0, alpha_nd = 0.0;
  // Merged-order bookkeeping for the backward pass.
  VecX weights, deltas, trans, density;
  std::vector<Entity> src_entity;
  std::vector<int> src_index;
  MatX merged_rgb;
};

// Depth-sorted transmittance compositing of both branches along one ray.
// Throws NumericalError if either branch's depths are not nondecreasing.
RenderOutput composite_render(const SampleSet& set_d, const SampleSet& set_nd,
                              double far);

struct SampleGrads {
  VecX g_density_d, g_density_nd;
  MatX g_rgb_d, g_rgb_nd;
};

// Backward of composite_render. g_alpha_entity applies to the branch-opacity
// sums; any of the gradient inputs may be zero. g_weights, when given, is a
// per-merged-sample gradient on the rendering weights (e.g. for losses on a
// masked weight sum) and must have out.weights.size() entries.
SampleGrads composite_backward(const RenderOutput& out, const Vec3& g_rgb,
                               double g_alpha, double g_alpha_d, double g_alpha_nd,
                               const VecX* g_weights = nullptr);

}  // namespace tfs

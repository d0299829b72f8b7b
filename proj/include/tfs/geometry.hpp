// SPDX-License-Identifier: Apache-2.0
//
// Rigid transforms, skeletons, forward linear blend skinning, canonical
// initialization and the Broyden inverse-LBS baseline solver.

#pragma once

#include "tfs/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <vector>

namespace tfs {

// Proper rigid body transform (rotation + translation).
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    return {rotation.transpose(), -(rotation.transpose() * translation)};
  }

  RigidTransform compose(const RigidTransform& other) const {
    // this ∘ other: apply `other` first.
    return {rotation * other.rotation,
            rotation * other.translation + translation};
  }

  // Orthonormal with det +1 within tol.
  bool is_valid(double tol = 1e-6) const;

  static RigidTransform identity() { return {}; }
  static RigidTransform from_rows_3x4(const MatX& m);
  MatX to_rows_3x4() const;
};

// Per-frame articulation of one entity.
struct SkeletonFrame {
  int n_b = 0;
  std::vector<int> parent;                 // -1 for roots
  std::vector<Vec3> canonical_joints;      // J_p0
  std::vector<Vec3> posed_joints;          // J_p
  std::vector<RigidTransform> bone_transforms;  // B_b

  // Checks sizes, parent forest, and B_b(J_p0[b]) == J_p[b] within tol.
  void validate(double joint_tol = 1e-5) const;

  bool is_identity_pose(double tol = 1e-9) const;

  // Flattened posed joints (3*n_b), the INN conditioning vector.
  VecX posed_flat() const;
  VecX canonical_flat() const;

  Vec3 canonical_centroid() const;
  double canonical_bbox_diagonal() const;
  double mean_bone_length() const;

  nlohmann::json to_json() const;
  static SkeletonFrame from_json(const nlohmann::json& j);
};

// Convex per-point weights over bones.
struct SkinningWeights {
  VecX w;

  int size() const { return static_cast<int>(w.size()); }
  bool is_valid(double tol = 1e-5) const {
    return w.size() > 0 && (w.array() >= -1e-12).all() &&
           std::abs(w.sum() - 1.0) <= tol;
  }
  static SkinningWeights one_hot(int n, int index) {
    SkinningWeights sw;
    sw.w = VecX::Zero(n);
    sw.w[index] = 1.0;
    return sw;
  }
};

// Weighted blend of the bone transforms as an affine map (A, c):
// x -> A x + c. With sum(w) == 1 the homogeneous bottom row stays (0,0,0,1).
struct AffineBlend {
  Mat3 A = Mat3::Identity();
  Vec3 c = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return A * p + c; }
  Vec3 apply_inverse(const Vec3& p) const;
  double condition_number() const;
};

AffineBlend blend_transforms(const SkinningWeights& w, const SkeletonFrame& skel);

// Eq-style forward LBS: homogeneous blend of weighted bone transforms.
Vec3 lbs_forward(const SkinningWeights& w, const SkeletonFrame& skel,
                 const Vec3& x_c);

// One-hot selection of the posed joint nearest to x_v (ties: lowest index).
SkinningWeights nearest_joint_onehot(const Vec3& x_v, const SkeletonFrame& skel);

// Same, against the canonical joints.
SkinningWeights nearest_canonical_joint_onehot(const Vec3& x_c,
                                               const SkeletonFrame& skel);

// x_c^init: inverse of the nearest-joint blended transform applied to x_v.
Vec3 canonical_init(const Vec3& x_v, const SkeletonFrame& skel);

using WeightField = std::function<SkinningWeights(const Vec3&)>;

struct BroydenResult {
  Vec3 x_c = Vec3::Zero();
  double residual = 0.0;
  int iters = 0;
  bool converged = false;
};

// Solves LBS(w(x_c), B, x_c) - x_v = 0 with Broyden's good rank-one update.
// The Jacobian approximation starts from the blended transform at x0 and is
// reset if the residual grows for 5 consecutive iterations. Returns the best
// iterate seen. Throws NumericalError on non-finite iterates.
BroydenResult broyden_inverse_lbs(const Vec3& x_v, const WeightField& weight_field,
                                  const SkeletonFrame& skel, const Vec3& x0,
                                  double tol = 1e-5, int max_iter = 50);

// P points sampled along bone segments (joint-to-parent) with isotropic
// Gaussian offsets of scale `radius`. Placement along the bones is stratified
// and deterministic; only the offsets consume randomness, so paired calls with
// the same seed on canonical and posed skeletons correspond: the posed sample
// on bone b is exactly B_b applied to the canonical sample.
std::vector<Vec3> sample_bone_points(const SkeletonFrame& skel, bool use_posed,
                                     int P, double radius, std::uint64_t seed);

// Default sampling radius: 5% of the skeleton bounding-box diagonal.
double default_bone_sample_radius(const SkeletonFrame& skel);

}  // namespace tfs

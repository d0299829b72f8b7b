// SPDX-License-Identifier: Apache-2.0

#include "tfs/geometry.hpp"

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

namespace tfs {

bool RigidTransform::is_valid(double tol) const {
  Mat3 should_be_identity = rotation * rotation.transpose();
  if ((should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff() > tol)
    return false;
  return std::abs(rotation.determinant() - 1.0) <= tol;
}

RigidTransform RigidTransform::from_rows_3x4(const MatX& m) {
  if (m.rows() != 3 || m.cols() != 4)
    throw InvalidInput("RigidTransform::from_rows_3x4: expected 3x4 matrix");
  RigidTransform rt;
  rt.rotation = m.leftCols<3>();
  rt.translation = m.col(3);
  return rt;
}

MatX RigidTransform::to_rows_3x4() const {
  MatX m(3, 4);
  m.leftCols<3>() = rotation;
  m.col(3) = translation;
  return m;
}

void SkeletonFrame::validate(double joint_tol) const {
  if (n_b < 1) throw InvalidInput("SkeletonFrame: n_b must be >= 1");
  const auto n = static_cast<size_t>(n_b);
  if (parent.size() != n || canonical_joints.size() != n ||
      posed_joints.size() != n || bone_transforms.size() != n)
    throw InvalidInput("SkeletonFrame: field sizes do not match n_b");
  for (int b = 0; b < n_b; ++b) {
    if (parent[b] < -1 || parent[b] >= n_b)
      throw InvalidInput("SkeletonFrame: parent index out of range");
    // Walk to a root; more than n_b hops means a cycle.
    int cur = b;
    for (int hops = 0; cur != -1; ++hops) {
      if (hops > n_b) throw InvalidInput("SkeletonFrame: parent cycle detected");
      cur = parent[cur];
    }
    if (!bone_transforms[b].is_valid())
      throw InvalidInput("SkeletonFrame: bone transform is not a proper rotation");
    Vec3 posed = bone_transforms[b].apply(canonical_joints[b]);
    if ((posed - posed_joints[b]).norm() > joint_tol)
      throw InvalidInput("SkeletonFrame: B_b(J_p0[b]) != J_p[b]");
  }
}

bool SkeletonFrame::is_identity_pose(double tol) const {
  for (const auto& bt : bone_transforms) {
    if ((bt.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    if (bt.translation.cwiseAbs().maxCoeff() > tol) return false;
  }
  return true;
}

VecX SkeletonFrame::posed_flat() const {
  VecX v(3 * n_b);
  for (int b = 0; b < n_b; ++b) v.segment<3>(3 * b) = posed_joints[b];
  return v;
}

VecX SkeletonFrame::canonical_flat() const {
  VecX v(3 * n_b);
  for (int b = 0; b < n_b; ++b) v.segment<3>(3 * b) = canonical_joints[b];
  return v;
}

Vec3 SkeletonFrame::canonical_centroid() const {
  Vec3 c = Vec3::Zero();
  for (const auto& j : canonical_joints) c += j;
  return c / static_cast<double>(n_b);
}

double SkeletonFrame::canonical_bbox_diagonal() const {
  Vec3 lo = canonical_joints[0], hi = canonical_joints[0];
  for (const auto& j : canonical_joints) {
    lo = lo.cwiseMin(j);
    hi = hi.cwiseMax(j);
  }
  return (hi - lo).norm();
}

double SkeletonFrame::mean_bone_length() const {
  double total = 0.0;
  int count = 0;
  for (int b = 0; b < n_b; ++b) {
    if (parent[b] < 0) continue;
    total += (canonical_joints[b] - canonical_joints[parent[b]]).norm();
    ++count;
  }
  return count > 0 ? total / count : 0.0;
}

nlohmann::json SkeletonFrame::to_json() const {
  nlohmann::json j;
  j["n_b"] = n_b;
  j["parents"] = parent;
  auto vecs = [](const std::vector<Vec3>& vs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& v : vs) arr.push_back({v.x(), v.y(), v.z()});
    return arr;
  };
  j["canonical_joints"] = vecs(canonical_joints);
  j["posed_joints"] = vecs(posed_joints);
  nlohmann::json bts = nlohmann::json::array();
  for (const auto& bt : bone_transforms) {
    nlohmann::json flat = nlohmann::json::array();
    MatX m = bt.to_rows_3x4();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) flat.push_back(m(r, c));
    bts.push_back(flat);
  }
  j["bone_transforms"] = bts;
  return j;
}

SkeletonFrame SkeletonFrame::from_json(const nlohmann::json& j) {
  SkeletonFrame s;
  s.n_b = j.at("n_b").get<int>();
  s.parent = j.at("parents").get<std::vector<int>>();
  auto vecs = [](const nlohmann::json& arr) {
    std::vector<Vec3> vs;
    for (const auto& e : arr) vs.emplace_back(e[0].get<double>(), e[1].get<double>(), e[2].get<double>());
    return vs;
  };
  s.canonical_joints = vecs(j.at("canonical_joints"));
  s.posed_joints = vecs(j.at("posed_joints"));
  for (const auto& e : j.at("bone_transforms")) {
    MatX m(3, 4);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) m(r, c) = e[4 * r + c].get<double>();
    s.bone_transforms.push_back(RigidTransform::from_rows_3x4(m));
  }
  s.validate();
  return s;
}

Vec3 AffineBlend::apply_inverse(const Vec3& p) const {
  return A.partialPivLu().solve(p - c);
}

double AffineBlend::condition_number() const {
  Eigen::JacobiSVD<Mat3> svd(A);
  double smin = svd.singularValues().minCoeff();
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return svd.singularValues().maxCoeff() / smin;
}

AffineBlend blend_transforms(const SkinningWeights& w, const SkeletonFrame& skel) {
  if (w.size() != skel.n_b)
    throw InvalidInput("blend_transforms: weight/bone count mismatch");
  AffineBlend blend;
  blend.A.setZero();
  blend.c.setZero();
  for (int b = 0; b < skel.n_b; ++b) {
    blend.A += w.w[b] * skel.bone_transforms[b].rotation;
    blend.c += w.w[b] * skel.bone_transforms[b].translation;
  }
  return blend;
}

Vec3 lbs_forward(const SkinningWeights& w, const SkeletonFrame& skel,
                 const Vec3& x_c) {
  if (w.size() != skel.n_b)
    throw InvalidInput("lbs_forward: weight/bone count mismatch");
  if (!w.is_valid())
    throw InvalidInput("lbs_forward: weights must be nonnegative and sum to 1");
  return blend_transforms(w, skel).apply(x_c);
}

SkinningWeights nearest_joint_onehot(const Vec3& x_v, const SkeletonFrame& skel) {
  if (skel.n_b < 1) throw InvalidInput("nearest_joint_onehot: empty skeleton");
  int best = 0;
  double best_d2 = (x_v - skel.posed_joints[0]).squaredNorm();
  for (int b = 1; b < skel.n_b; ++b) {
    double d2 = (x_v - skel.posed_joints[b]).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = b;
    }
  }
  return SkinningWeights::one_hot(skel.n_b, best);
}

SkinningWeights nearest_canonical_joint_onehot(const Vec3& x_c,
                                               const SkeletonFrame& skel) {
  if (skel.n_b < 1) throw InvalidInput("nearest_canonical_joint_onehot: empty skeleton");
  int best = 0;
  double best_d2 = (x_c - skel.canonical_joints[0]).squaredNorm();
  for (int b = 1; b < skel.n_b; ++b) {
    double d2 = (x_c - skel.canonical_joints[b]).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = b;
    }
  }
  return SkinningWeights::one_hot(skel.n_b, best);
}

Vec3 canonical_init(const Vec3& x_v, const SkeletonFrame& skel) {
  SkinningWeights w = nearest_joint_onehot(x_v, skel);
  // One-hot blend is the selected rigid transform; its inverse always exists.
  return blend_transforms(w, skel).apply_inverse(x_v);
}

BroydenResult broyden_inverse_lbs(const Vec3& x_v, const WeightField& weight_field,
                                  const SkeletonFrame& skel, const Vec3& x0,
                                  double tol, int max_iter) {
  if (!x0.allFinite()) throw InvalidInput("broyden_inverse_lbs: x0 not finite");
  if (tol <= 0.0) throw InvalidInput("broyden_inverse_lbs: tol must be > 0");

  auto residual_fn = [&](const Vec3& x) -> Vec3 {
    return lbs_forward(weight_field(x), skel, x) - x_v;
  };
  auto jacobian_inverse_at = [&](const Vec3& x) -> Mat3 {
    // Linearization ignoring dw/dx: the blended rotation part.
    Mat3 A = blend_transforms(weight_field(x), skel).A;
    return A.partialPivLu().inverse();
  };

  BroydenResult result;
  Vec3 x = x0;
  Vec3 f = residual_fn(x);
  result.x_c = x;
  result.residual = f.norm();
  result.iters = 0;
  if (result.residual <= tol) {
    result.converged = true;
    return result;
  }

  Mat3 K = jacobian_inverse_at(x);
  double prev_norm = result.residual;
  int grow_streak = 0;

  for (int it = 1; it <= max_iter; ++it) {
    Vec3 dx = -K * f;
    Vec3 x_new = x + dx;
    if (!x_new.allFinite())
      throw NumericalError("broyden_inverse_lbs: non-finite iterate at iteration " +
                           std::to_string(it));
    Vec3 f_new = residual_fn(x_new);
    Vec3 df = f_new - f;

    double fn = f_new.norm();
    if (fn < result.residual) {
      result.x_c = x_new;
      result.residual = fn;
      result.iters = it;
    }
    if (fn <= tol) {
      result.converged = true;
      return result;
    }

    if (fn > prev_norm) {
      if (++grow_streak >= 5) {
        K = jacobian_inverse_at(x_new);
        grow_streak = 0;
      }
    } else {
      grow_streak = 0;
    }
    prev_norm = fn;

    // Good Broyden update on the inverse Jacobian (Sherman-Morrison form).
    Vec3 Kdf = K * df;
    double denom = dx.dot(Kdf);
    if (std::abs(denom) > 1e-14) {
      K += ((dx - Kdf) * (dx.transpose() * K)) / denom;
    }
    x = x_new;
    f = f_new;
  }
  return result;
}

std::vector<Vec3> sample_bone_points(const SkeletonFrame& skel, bool use_posed,
                                     int P, double radius, std::uint64_t seed) {
  if (P < 1) throw InvalidInput("sample_bone_points: P must be >= 1");
  if (radius < 0.0) throw InvalidInput("sample_bone_points: radius must be >= 0");

  // Segments run joint-to-parent; a skeleton of roots only degenerates to
  // Gaussian sampling around the joints themselves.
  std::vector<int> segments;
  for (int b = 0; b < skel.n_b; ++b)
    if (skel.parent[b] >= 0) segments.push_back(b);
  bool degenerate = segments.empty();
  if (degenerate)
    for (int b = 0; b < skel.n_b; ++b) segments.push_back(b);
  const int n_seg = static_cast<int>(segments.size());

  // Stratified placement: sample i lands on segment i % n_seg; its parameter
  // is the midpoint of its stratum among the samples assigned to that segment.
  std::vector<int> per_segment(n_seg, P / n_seg);
  for (int k = 0; k < P % n_seg; ++k) per_segment[k]++;

  std::mt19937_64 rng(seed);
  auto gauss = [&rng]() {
    // Box-Muller on explicit uniforms keeps the stream layout fixed.
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double u1 = std::max(uni(rng), 1e-300);
    double u2 = uni(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  };

  std::vector<Vec3> points;
  points.reserve(P);
  std::vector<int> emitted(n_seg, 0);
  for (int i = 0; i < P; ++i) {
    int s = i % n_seg;
    int b = segments[s];
    double t = (emitted[s] + 0.5) / std::max(per_segment[s], 1);
    emitted[s]++;

    Vec3 offset(gauss(), gauss(), gauss());
    offset *= radius;

    Vec3 canonical_point;
    if (degenerate) {
      canonical_point = skel.canonical_joints[b] + offset;
    } else {
      Vec3 a = skel.canonical_joints[b];
      Vec3 p = skel.canonical_joints[skel.parent[b]];
      canonical_point = a + t * (p - a) + offset;
    }
    points.push_back(use_posed ? skel.bone_transforms[b].apply(canonical_point)
                               : canonical_point);
  }
  return points;
}

double default_bone_sample_radius(const SkeletonFrame& skel) {
  return 0.05 * skel.canonical_bbox_diagonal();
}

}  // namespace tfs

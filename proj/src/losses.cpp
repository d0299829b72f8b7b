// SPDX-License-Identifier: Apache-2.0

#include "tfs/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tfs {

double loss_rgb(const MatX& rendered, const MatX& target, MatX* g_rendered) {
  if (rendered.rows() != 3 || rendered.rows() != target.rows() ||
      rendered.cols() != target.cols())
    throw InvalidInput("loss_rgb: batch size mismatch");
  const double n = static_cast<double>(rendered.cols());
  MatX diff = rendered - target;
  if (g_rendered) *g_rendered = diff.array().sign().matrix() / n;
  return diff.array().abs().sum() / n;
}

double loss_pose(CouplingINN& inn, const SkeletonFrame& skel, int P,
                 std::uint64_t seed, double radius, double grad_scale,
                 bool use_canonical_init) {
  if (P <= 0) throw InvalidInput("loss_pose: P must be positive");
  if (radius < 0.0) radius = default_bone_sample_radius(skel);
  std::vector<Vec3> posed = sample_bone_points(skel, true, P, radius, seed);
  std::vector<Vec3> canon = sample_bone_points(skel, false, P, radius, seed);

  MatX x_v(3, P);
  MatX x_t(3, P);
  for (int i = 0; i < P; ++i) {
    x_v.col(i) = posed[static_cast<size_t>(i)];
    x_t.col(i) = canon[static_cast<size_t>(i)];
  }
  CouplingCache cache;
  MatX mapped = inn_inverse_map(x_v, skel, inn, &cache, nullptr, use_canonical_init);
  MatX diff = mapped - x_t;
  double value = diff.array().abs().sum() / P;
  if (grad_scale > 0.0) {
    MatX g = diff.array().sign().matrix() * (grad_scale / P);
    inn.canonical_pass_backward(cache, g);
  }
  return value;
}

double loss_skinning(SkinningNet& snet, const SkeletonFrame& skel,
                     double grad_scale) {
  const int n_b = skel.n_b;
  if (snet.n_b() != n_b) throw InvalidInput("loss_skinning: bone count mismatch");
  MatX joints(3, n_b);
  for (int b = 0; b < n_b; ++b) joints.col(b) = skel.canonical_joints[static_cast<size_t>(b)];
  SkinningCache cache;
  MatX w = snet.forward(joints, &cache);
  MatX diff = w;
  for (int b = 0; b < n_b; ++b) diff(b, b) -= 1.0;
  double value = diff.array().square().sum() / n_b;
  if (grad_scale > 0.0) snet.backward(cache, diff * (2.0 * grad_scale / n_b));
  return value;
}

double loss_cycle(CouplingINN& inn, const SkeletonFrame& skel, const MatX& x_v,
                  double grad_scale, bool use_canonical_init) {
  const auto n = x_v.cols();
  CouplingCache inv_cache, fwd_cache;
  MatX x_c = inn_inverse_map(x_v, skel, inn, &inv_cache, nullptr, use_canonical_init);
  VecX pose = skel.posed_flat();
  MatX x_init = inn.view_pass(x_c, pose, &fwd_cache);
  MatX round(3, n);
  std::vector<int> joint(static_cast<size_t>(n), -1);
  if (use_canonical_init) {
    for (Eigen::Index c = 0; c < n; ++c) {
      SkinningWeights w = nearest_canonical_joint_onehot(x_init.col(c), skel);
      int b = 0;
      for (; b < skel.n_b; ++b)
        if (w.w[b] == 1.0) break;
      joint[static_cast<size_t>(c)] = b;
      round.col(c) = skel.bone_transforms[static_cast<size_t>(b)].apply(x_init.col(c));
    }
  } else {
    round = x_init;
  }
  MatX diff = round - x_v;
  double value = diff.array().square().sum() / n;
  if (grad_scale > 0.0) {
    MatX g_round = diff * (2.0 * grad_scale / n);
    MatX g_init = g_round;
    if (use_canonical_init)
      for (Eigen::Index c = 0; c < n; ++c)
        g_init.col(c) =
            skel.bone_transforms[static_cast<size_t>(joint[static_cast<size_t>(c)])]
                .rotation.transpose() *
            g_round.col(c);
    MatX g_x_c = inn.view_pass_backward(fwd_cache, g_init);
    inn.canonical_pass_backward(inv_cache, g_x_c);
  }
  return value;
}

double loss_consistency(const MatX& x_c_prime, const MatX& x_c,
                        const std::vector<char>& degenerate,
                        MatX* g_x_c_prime, MatX* g_x_c) {
  if (x_c_prime.cols() != x_c.cols() || x_c_prime.rows() != 3 || x_c.rows() != 3)
    throw InvalidInput("loss_consistency: batch size mismatch");
  const auto n = x_c.cols();
  int m = 0;
  for (Eigen::Index c = 0; c < n; ++c)
    if (degenerate.empty() || !degenerate[static_cast<size_t>(c)]) ++m;
  if (g_x_c_prime) *g_x_c_prime = MatX::Zero(3, n);
  if (g_x_c) *g_x_c = MatX::Zero(3, n);
  if (m == 0) return 0.0;

  double value = 0.0;
  for (Eigen::Index c = 0; c < n; ++c) {
    if (!degenerate.empty() && degenerate[static_cast<size_t>(c)]) continue;
    Vec3 d = x_c_prime.col(c) - x_c.col(c);
    value += d.squaredNorm();
    if (g_x_c_prime) g_x_c_prime->col(c) = 2.0 * d / m;
    if (g_x_c) g_x_c->col(c) = -2.0 * d / m;
  }
  return value / m;
}

bool in_init_cloud(const Vec3& x, const SkeletonFrame& skel, double r0) {
  for (int b = 0; b < skel.n_b; ++b) {
    int p = skel.parent[static_cast<size_t>(b)];
    Vec3 a = skel.canonical_joints[static_cast<size_t>(b)];
    Vec3 e = p >= 0 ? skel.canonical_joints[static_cast<size_t>(p)] : a;
    Vec3 ab = e - a;
    double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    if ((x - (a + t * ab)).norm() <= r0) return true;
  }
  return false;
}

double default_inshape_radius(const SkeletonFrame& skel) {
  return 0.15 * skel.mean_bone_length();
}

double loss_inshape(const VecX& alpha, const std::vector<char>& qualifies,
                    VecX* g_alpha) {
  if (static_cast<size_t>(alpha.size()) != qualifies.size())
    throw InvalidInput("loss_inshape: flag/alpha size mismatch");
  if (g_alpha) *g_alpha = VecX::Zero(alpha.size());
  int m = 0;
  for (char q : qualifies)
    if (q) ++m;
  if (m == 0) return 0.0;

  constexpr double kEps = 1e-6;
  double value = 0.0;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    if (!qualifies[static_cast<size_t>(i)]) continue;
    double a = std::clamp(alpha[i], kEps, 1.0);
    value -= std::log(a);
    if (g_alpha && alpha[i] > kEps && alpha[i] < 1.0) (*g_alpha)[i] = -1.0 / (a * m);
  }
  return value / m;
}

double loss_eikonal(const MatX& grads, MatX* g_grads) {
  const auto n = grads.cols();
  if (g_grads) *g_grads = MatX::Zero(3, n);
  if (n == 0) return 0.0;
  double value = 0.0;
  for (Eigen::Index c = 0; c < n; ++c) {
    double norm = grads.col(c).norm();
    double d = norm - 1.0;
    value += d * d;
    if (g_grads && norm > 1e-12)
      g_grads->col(c) = (2.0 * d / (n * norm)) * grads.col(c);
  }
  return value / n;
}

LossReport loss_total(LossReport terms, const LossWeights& weights) {
  if (!weights.valid()) throw InvalidInput("loss_total: negative weight");
  terms.total = terms.l_rgb + weights.lambda_pose * terms.l_pose +
                weights.lambda_w * terms.l_w + weights.lambda_inn * terms.l_inn +
                weights.lambda_consis * terms.l_consis +
                weights.lambda_shape * terms.l_shape;
  if (weights.use_eikonal) terms.total += weights.lambda_eikonal * terms.l_eikonal;
  return terms;
}

std::string loss_csv_header() {
  return "step,l_rgb,l_pose,l_w,l_inn,l_consis,l_shape,total,wall_s";
}

std::string loss_csv_row(int step, const LossReport& report, double wall_s) {
  std::ostringstream os;
  os.precision(9);
  os << step << ',' << report.l_rgb << ',' << report.l_pose << ',' << report.l_w
     << ',' << report.l_inn << ',' << report.l_consis << ',' << report.l_shape
     << ',' << report.total << ',' << wall_s;
  return os.str();
}

}  // namespace tfs

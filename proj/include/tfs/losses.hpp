// SPDX-License-Identifier: Apache-2.0
//
// The six training objectives, their gradients, and the weighted total.

#pragma once

#include "tfs/deformer.hpp"
#include "tfs/geometry.hpp"

#include <string>
#include <vector>

namespace tfs {

struct LossWeights {
  double lambda_pose = 2.0;
  double lambda_w = 10.0;
  double lambda_inn = 1.0;     // cycle consistency
  double lambda_consis = 1.0;
  double lambda_shape = 0.03;  // in-shape BCE
  // Optional eikonal regularizer; OFF by default and flagged as a deviation
  // in reports when enabled.
  bool use_eikonal = false;
  double lambda_eikonal = 0.1;

  bool valid() const {
    return lambda_pose >= 0 && lambda_w >= 0 && lambda_inn >= 0 &&
           lambda_consis >= 0 && lambda_shape >= 0 && lambda_eikonal >= 0;
  }
};

struct LossReport {
  double l_rgb = 0.0;
  double l_pose = 0.0;
  double l_w = 0.0;
  double l_inn = 0.0;
  double l_consis = 0.0;
  double l_shape = 0.0;
  double l_eikonal = 0.0;
  double total = 0.0;
};

// Mean over rays of the per-ray L1 color error; g_rendered (if non-null)
// receives dL/drendered.
double loss_rgb(const MatX& rendered, const MatX& target, MatX* g_rendered = nullptr);

// Mean L1 between canonical bone samples and the inverse-mapped posed samples
// (paired by seed). grad_scale > 0 accumulates scaled parameter gradients.
double loss_pose(CouplingINN& inn, const SkeletonFrame& skel, int P,
                 std::uint64_t seed, double radius = -1.0, double grad_scale = 0.0,
                 bool use_canonical_init = true);

// Mean squared L2 between skinning predictions at the canonical joints and
// the one-hot targets.
double loss_skinning(SkinningNet& snet, const SkeletonFrame& skel,
                     double grad_scale = 0.0);

// Mean squared round-trip error of the coupling map on the batch x_v (3xN).
double loss_cycle(CouplingINN& inn, const SkeletonFrame& skel, const MatX& x_v,
                  double grad_scale = 0.0, bool use_canonical_init = true);

// Mean squared L2 between x_c_prime and x_c over non-degenerate columns.
// Gradients (if requested) are zero at degenerate columns.
double loss_consistency(const MatX& x_c_prime, const MatX& x_c,
                        const std::vector<char>& degenerate,
                        MatX* g_x_c_prime = nullptr, MatX* g_x_c = nullptr);

// True when x lies within distance r0 of some canonical bone segment.
bool in_init_cloud(const Vec3& x, const SkeletonFrame& skel, double r0);

// Default in-shape capsule radius: 15% of the mean bone length.
double default_inshape_radius(const SkeletonFrame& skel);

// BCE pushing accumulated per-ray opacity toward 1 for qualifying rays (those
// with canonical samples inside the init cloud). Unconstrained rays get zero
// gradient; returns 0 when no ray qualifies.
double loss_inshape(const VecX& alpha, const std::vector<char>& qualifies,
                    VecX* g_alpha = nullptr);

// Mean squared deviation of gradient norms from 1 (optional regularizer).
double loss_eikonal(const MatX& grads, MatX* g_grads = nullptr);

// Weighted sum of the per-term values; fills report.total.
LossReport loss_total(LossReport terms, const LossWeights& weights);

// Training-log CSV helpers.
std::string loss_csv_header();
std::string loss_csv_row(int step, const LossReport& report, double wall_s);

}  // namespace tfs

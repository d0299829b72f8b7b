// SPDX-License-Identifier: Apache-2.0
//
// Canonical-space fields: frequency encoding, semantic point weights,
// per-entity SDF heads with geometry features and analytic input gradients
// (normals), and the unified radiance head.

#pragma once

#include "tfs/geometry.hpp"
#include "tfs/nn.hpp"

#include <array>

namespace tfs {

enum class Entity { Deformable = 0, NonDeformable = 1 };

// Identity passthrough plus sin/cos at octaves 2^0..2^5: 3 + 3*2*6 = 39 dims.
struct FreqEncoding {
  static constexpr int kOctaves = 6;
  static constexpr int kDim = 3 + 3 * 2 * kOctaves;

  static MatX encode(const MatX& p);  // (3xN) -> (39xN)
  // Per-row first/second derivative with respect to that row's own axis
  // (every channel depends on exactly one coordinate).
  static void derivs(const MatX& p, MatX& d1, MatX& d2);
  static int axis_of(int row);
};

struct SemanticPointWeights {
  double omega_d = 0.0;
  double omega_nd = 0.0;
  double omega_bg = 1.0;
};

// omega^j = exp(-dist^2 / sigma_j^2) to the nearest canonical joint of entity
// j; omega_bg = 1 - min(omega_d + omega_nd, 1).
SemanticPointWeights semantic_point_weights(const Vec3& x_c,
                                            const SkeletonFrame& skel_d,
                                            const SkeletonFrame& skel_nd,
                                            double sigma_d, double sigma_nd);

// Default sigma: 10% of the entity's canonical skeleton bbox diagonal.
double default_semantic_sigma(const SkeletonFrame& skel);

struct SemanticCache {
  MatX diff_d, diff_nd;     // 3xN, x_c - nearest joint
  VecX omega_d, omega_nd;   // per point
  std::vector<char> clamped;  // omega_d + omega_nd >= 1
  double sigma_d = 0.0, sigma_nd = 0.0;
};

// Batched weights as a 3xN matrix with rows (omega_d, omega_nd, omega_bg).
MatX semantic_point_weights_batch(const MatX& x_c, const SkeletonFrame& skel_d,
                                  const SkeletonFrame& skel_nd, double sigma_d,
                                  double sigma_nd, SemanticCache* cache);

// ---------------------------------------------------------------------------
// SDF head input assembly: u = [freq(x_c - origin), J_p0 flat, omega].
// The assembly also produces du/dx_c so the head can propagate input
// Jacobians for normals, and supports full backward including the
// second-order terms that arise when gradients flow through the normal.
// ---------------------------------------------------------------------------

struct SdfInputCache {
  MatX freq_d1, freq_d2;  // 39xN
  SemanticCache sem;
  int n_b = 0;
};

void assemble_sdf_input(const MatX& x_c, const SkeletonFrame& own_skel,
                        const SkeletonFrame& skel_d, const SkeletonFrame& skel_nd,
                        double sigma_d, double sigma_nd, const Vec3& origin,
                        MatX& u, std::array<MatX, 3>& j_u, SdfInputCache* cache);

// Accumulate gradient w.r.t. x_c from gradients on (u, du/dx).
MatX assemble_sdf_input_backward(const SdfInputCache& cache, const MatX& g_u,
                                 const std::array<MatX, 3>& g_ju);

struct SdfConfig {
  int n_b = 24;
  int hidden = 256;
  int n_layers = 8;    // number of linear layers
  int skip_layer = 4;  // input re-concatenated before this layer
  int feat_dim = 256;
  double sphere_radius = 0.3;  // geometric initialization radius

  int in_dim() const { return FreqEncoding::kDim + 3 * n_b + 3; }
};

// 8-layer MLP with a skip connection, softplus(beta=100) activations and
// geometric (sphere) initialization. The joint pass computes the SDF value,
// the geometry feature and the spatial gradient of the SDF in one sweep;
// its backward handles gradients flowing into all three outputs.
class SdfHead {
 public:
  SdfHead() = default;
  SdfHead(const SdfConfig& cfg, std::uint64_t seed, const Vec3& origin = Vec3::Zero());

  const SdfConfig& config() const { return cfg_; }
  const Vec3& origin() const { return origin_; }

  struct Cache {
    std::vector<MatX> hin;                   // input of each linear layer
    std::vector<std::array<MatX, 3>> jin;    // its input Jacobian columns
    std::vector<MatX> z;                     // pre-activations
    std::vector<std::array<MatX, 3>> jz;
  };

  void eval_joint(const MatX& u, const std::array<MatX, 3>& j_u, MatX& sdf,
                  MatX& feat, MatX& grad, Cache* cache) const;

  void backward(const Cache& cache, const MatX& g_sdf, const MatX& g_feat,
                const MatX& g_grad, MatX& g_u, std::array<MatX, 3>& g_ju);

  void collect_params(ParamList& out, const std::string& prefix);

 private:
  SdfConfig cfg_;
  Vec3 origin_ = Vec3::Zero();
  std::vector<Linear> layers_;
};

// Single-point convenience evaluation.
struct FieldEval {
  double sdf = 0.0;
  VecX feat;
  Vec3 grad = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  bool degenerate_normal = false;
};

FieldEval sdf_eval_point(const SdfHead& head, const Vec3& x_c,
                         const SkeletonFrame& own_skel, const SkeletonFrame& skel_d,
                         const SkeletonFrame& skel_nd, double sigma_d,
                         double sigma_nd);

// Normalizes SDF gradients into unit normals; rows with |g| < 1e-8 are
// flagged and replaced by +z.
void normals_from_gradients(const MatX& grad, MatX& normal,
                            std::vector<char>& degenerate);
// Backward of the normalization (degenerate columns receive zero gradient).
MatX normals_backward(const MatX& grad, const MatX& normal,
                      const std::vector<char>& degenerate, const MatX& g_normal);

struct RgbConfig {
  int pose_dim = 144;  // both entities' posed joints concatenated
  int pose_compressed = 8;
  int hidden = 256;
  int feat_dim = 256;

  int in_dim() const { return 3 + 3 + pose_compressed + feat_dim; }
};

// 5 linear layers with sigmoid output; pose compressed by a linear layer.
class RgbHead {
 public:
  RgbHead() = default;
  RgbHead(const RgbConfig& cfg, std::uint64_t seed);

  const RgbConfig& config() const { return cfg_; }

  struct Cache {
    MatX in;      // assembled input
    MatX pose8;   // compressed pose (broadcast column)
    VecX pose;
    std::vector<MatX> z;
    MatX rgb;
  };

  MatX forward(const MatX& x_c, const MatX& normal, const MatX& feat,
               const VecX& poses, Cache* cache) const;

  void backward(const Cache& cache, const MatX& g_rgb, MatX& g_x_c,
                MatX& g_normal, MatX& g_feat);

  void collect_params(ParamList& out, const std::string& prefix);

 private:
  RgbConfig cfg_;
  Linear pose_compress_;
  std::vector<Linear> layers_;
};

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0
//
// View-to-canonical deformation: an invertible coupling network conditioned
// on the posed skeleton, a skinning-weight network, and the blended inverse
// that produces the final canonical points.

#pragma once

#include "tfs/geometry.hpp"
#include "tfs/nn.hpp"

#include <array>
#include <optional>

namespace tfs {

struct InnConfig {
  int n_b = 24;        // bones; conditioning dimension is 3*n_b
  int hidden = 512;    // subnet hidden width
  int proj_dim = 256;  // projection of the padded passive coordinates
  // When set, the forward (canonical-to-view) pass uses its own parameters
  // instead of the algebraic inverse of the canonical-direction pass.
  bool separate_forward = false;

  int subnet_in() const { return 3 + proj_dim + 3 * n_b; }
};

struct CouplingSubnet {
  Linear l1, l2, l3;  // l3 starts at zero so the block begins as identity
};

struct CouplingBlock {
  std::vector<int> active;   // coordinates this block transforms
  std::vector<int> passive;  // coordinates it conditions on
  Linear proj;
  CouplingSubnet scale, trans;
};

struct BlockCache {
  MatX padded;          // 3xN passive coords, active rows zeroed
  MatX subnet_in;       // (3+proj+3n_b) x N
  MatX s_h1z, s_h2z;    // pre-activation hidden states, scale subnet
  MatX t_h1z, t_h2z;    // translation subnet
  MatX s_raw;           // 3xN raw scale output (pre-tanh)
  MatX s_val;           // 2*tanh(s_raw)
  MatX t_val;           // 3xN translation output
  MatX x_in;            // block input points
};

struct CouplingCache {
  std::array<BlockCache, 2> blocks;
};

// Two affine coupling blocks over 3 coordinates: block 0 transforms {z}
// conditioned on {x,y}; block 1 transforms {x,y} conditioned on {z}.
// Scale outputs pass through tanh scaled by 2 before exponentiation.
class CouplingINN {
 public:
  CouplingINN() = default;
  CouplingINN(const InnConfig& cfg, std::uint64_t seed);

  const InnConfig& config() const { return cfg_; }

  // Canonical-direction pass (view space toward canonical space).
  MatX canonical_pass(const MatX& x, const VecX& pose, CouplingCache* cache) const;
  // View-direction pass: algebraic inverse of the canonical pass, or the
  // separately parameterized stack when configured.
  MatX view_pass(const MatX& x, const VecX& pose, CouplingCache* cache) const;

  // Accumulate parameter gradients; return the gradient w.r.t. the pass input.
  MatX canonical_pass_backward(const CouplingCache& cache, const MatX& g_out);
  MatX view_pass_backward(const CouplingCache& cache, const MatX& g_out);

  void collect_params(ParamList& out, const std::string& prefix);

 private:
  MatX run_blocks(const std::array<CouplingBlock, 2>& blocks, bool canonical_dir,
                  const MatX& x, const VecX& pose, CouplingCache* cache) const;
  MatX run_blocks_backward(std::array<CouplingBlock, 2>& blocks, bool canonical_dir,
                           const CouplingCache& cache, const MatX& g_out);

  InnConfig cfg_;
  std::array<CouplingBlock, 2> blocks_;
  std::optional<std::array<CouplingBlock, 2>> fwd_blocks_;
};

struct SkinningCache {
  MatX x_in;    // 3xN
  MatX h1z, h2z;
  MatX logits;  // n_b x N
  MatX w;       // softmax output
};

// 3 -> 256 -> 256 -> n_b with softmax output.
class SkinningNet {
 public:
  SkinningNet() = default;
  SkinningNet(int n_b, int hidden, std::uint64_t seed);

  int n_b() const { return n_b_; }

  MatX forward(const MatX& x, SkinningCache* cache) const;
  // Accumulates parameter gradients, returns gradient w.r.t. x.
  MatX backward(const SkinningCache& cache, const MatX& g_w);

  SkinningWeights predict(const Vec3& x_c_prime) const;

  void collect_params(ParamList& out, const std::string& prefix);

 private:
  int n_b_ = 0;
  Linear l1_, l2_, l3_;
};

// Per-point result of the canonicalization pipeline.
struct DeformerForward {
  MatX x_v;        // 3xN inputs
  MatX x_c_init;   // 3xN, constant w.r.t. parameters
  MatX x_c_prime;  // INN output
  MatX w_s;        // n_b x N skinning weights
  MatX x_c;        // blended-inverse output
  std::vector<AffineBlend> blends;
  std::vector<char> degenerate;  // condition number > 1e8, excluded from losses
  CouplingCache inn_cache;
  SkinningCache snet_cache;
};

// x_c_init via nearest posed joint, then the coupling canonical pass.
// use_canonical_init = false skips the warm start (x_c_init = x_v), the
// ablation configuration.
MatX inn_inverse_map(const MatX& x_v, const SkeletonFrame& skel,
                     const CouplingINN& net, CouplingCache* cache = nullptr,
                     MatX* x_c_init_out = nullptr, bool use_canonical_init = true);

// Exact inverse composition: view-direction coupling pass followed by the
// forward blend that inverts canonical_init (nearest canonical joint).
MatX inn_forward_map(const MatX& x_c, const SkeletonFrame& skel,
                     const CouplingINN& net, CouplingCache* cache = nullptr);

// Full canonicalization of a batch.
DeformerForward canonicalize(const MatX& x_v, const SkeletonFrame& skel,
                             const CouplingINN& inn, const SkinningNet& snet,
                             bool use_canonical_init = true);

// Backward through the blended inverse, the skinning net and the INN.
// g_x_c / g_x_c_prime / g_w_s may be empty (treated as zero).
void canonicalize_backward(const DeformerForward& fwd, const SkeletonFrame& skel,
                           CouplingINN& inn, SkinningNet& snet, const MatX& g_x_c,
                           const MatX& g_x_c_prime, const MatX& g_w_s);

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0

#include "tfs/deformer.hpp"

namespace tfs {

namespace {

constexpr Act kHiddenAct = Act::Softplus10;
constexpr double kDegenerateCondition = 1e8;

MatX subnet_forward(const CouplingSubnet& net, const MatX& in, MatX& h1z, MatX& h2z) {
  h1z = net.l1.forward(in);
  h2z = net.l2.forward(act_forward(kHiddenAct, h1z));
  return net.l3.forward(act_forward(kHiddenAct, h2z));
}

// Returns gradient w.r.t. the subnet input.
MatX subnet_backward(CouplingSubnet& net, const MatX& in, const MatX& h1z,
                     const MatX& h2z, const MatX& g_out) {
  MatX h2 = act_forward(kHiddenAct, h2z);
  MatX g_h2 = net.l3.backward(h2, g_out);
  MatX g_h2z = g_h2.cwiseProduct(act_deriv(kHiddenAct, h2z));
  MatX h1 = act_forward(kHiddenAct, h1z);
  MatX g_h1 = net.l2.backward(h1, g_h2z);
  MatX g_h1z = g_h1.cwiseProduct(act_deriv(kHiddenAct, h1z));
  return net.l1.backward(in, g_h1z);
}

void init_subnet(CouplingSubnet& net, int in_dim, int hidden, NormalSampler& rng) {
  net.l1.init(in_dim, hidden, rng, std::sqrt(2.0 / in_dim));
  net.l2.init(hidden, hidden, rng, std::sqrt(2.0 / hidden));
  net.l3.init_zero(hidden, 3);
}

void check_finite(const MatX& m, const char* where) {
  if (!m.allFinite())
    throw NumericalError(std::string("CouplingINN: non-finite activations in ") + where);
}

}  // namespace

CouplingINN::CouplingINN(const InnConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  NormalSampler rng(seed);
  auto make_blocks = [&](std::array<CouplingBlock, 2>& blocks) {
    blocks[0].active = {2};
    blocks[0].passive = {0, 1};
    blocks[1].active = {0, 1};
    blocks[1].passive = {2};
    for (auto& blk : blocks) {
      blk.proj.init(3, cfg_.proj_dim, rng, std::sqrt(2.0 / 3.0));
      init_subnet(blk.scale, cfg_.subnet_in(), cfg_.hidden, rng);
      init_subnet(blk.trans, cfg_.subnet_in(), cfg_.hidden, rng);
    }
  };
  make_blocks(blocks_);
  if (cfg_.separate_forward) {
    fwd_blocks_.emplace();
    make_blocks(*fwd_blocks_);
  }
}

MatX CouplingINN::run_blocks(const std::array<CouplingBlock, 2>& blocks,
                             bool canonical_dir, const MatX& x, const VecX& pose,
                             CouplingCache* cache) const {
  if (x.rows() != 3) throw InvalidInput("CouplingINN: expected 3xN input");
  if (pose.size() != 3 * cfg_.n_b)
    throw InvalidInput("CouplingINN: conditioning pose has wrong dimension");
  const auto N = x.cols();

  MatX cur = x;
  for (int step = 0; step < 2; ++step) {
    int bi = canonical_dir ? step : 1 - step;
    const CouplingBlock& blk = blocks[static_cast<size_t>(bi)];

    MatX padded = cur;
    for (int a : blk.active) padded.row(a).setZero();

    MatX sub_in(cfg_.subnet_in(), N);
    sub_in.topRows(3) = padded;
    sub_in.middleRows(3, cfg_.proj_dim) = blk.proj.forward(padded);
    sub_in.bottomRows(3 * cfg_.n_b) = pose.replicate(1, N);

    BlockCache* bc = cache ? &cache->blocks[static_cast<size_t>(bi)] : nullptr;
    MatX s_h1z, s_h2z, t_h1z, t_h2z;
    MatX s_raw = subnet_forward(blk.scale, sub_in, s_h1z, s_h2z);
    MatX t_val = subnet_forward(blk.trans, sub_in, t_h1z, t_h2z);
    check_finite(s_raw, "scale subnet");
    check_finite(t_val, "translation subnet");
    MatX s_val = 2.0 * s_raw.array().tanh();

    if (bc) {
      bc->x_in = cur;
      bc->padded = padded;
      bc->subnet_in = sub_in;
      bc->s_h1z = std::move(s_h1z);
      bc->s_h2z = std::move(s_h2z);
      bc->t_h1z = std::move(t_h1z);
      bc->t_h2z = std::move(t_h2z);
      bc->s_raw = s_raw;
      bc->s_val = s_val;
      bc->t_val = t_val;
    }

    for (int a : blk.active) {
      if (canonical_dir) {
        cur.row(a) = (cur.row(a) - t_val.row(a)).array() * (-s_val.row(a).array()).exp();
      } else {
        cur.row(a) = cur.row(a).array() * s_val.row(a).array().exp() + t_val.row(a).array();
      }
    }
  }
  check_finite(cur, "coupling output");
  return cur;
}

MatX CouplingINN::run_blocks_backward(std::array<CouplingBlock, 2>& blocks,
                                      bool canonical_dir, const CouplingCache& cache,
                                      const MatX& g_out) {
  MatX g = g_out;
  for (int step = 1; step >= 0; --step) {
    int bi = canonical_dir ? step : 1 - step;
    CouplingBlock& blk = blocks[static_cast<size_t>(bi)];
    const BlockCache& bc = cache.blocks[static_cast<size_t>(bi)];

    MatX g_s_raw = MatX::Zero(3, g.cols());
    MatX g_t = MatX::Zero(3, g.cols());
    MatX g_in = g;  // passive rows pass through; active rows replaced below

    for (int a : blk.active) {
      Eigen::ArrayXXd e = canonical_dir
                              ? Eigen::ArrayXXd((-bc.s_val.row(a).array()).exp())
                              : Eigen::ArrayXXd(bc.s_val.row(a).array().exp());
      Eigen::ArrayXXd ga = g.row(a).array();
      Eigen::ArrayXXd in_a = bc.x_in.row(a).array();
      Eigen::ArrayXXd t_a = bc.t_val.row(a).array();
      Eigen::ArrayXXd g_s_val;
      if (canonical_dir) {
        // out = (in - t) * e, e = exp(-s)
        g_in.row(a) = (ga * e).matrix();
        g_t.row(a) = (-(ga * e)).matrix();
        g_s_val = -ga * (in_a - t_a) * e;
      } else {
        // out = in * e + t, e = exp(s)
        g_in.row(a) = (ga * e).matrix();
        g_t.row(a) = g.row(a);
        g_s_val = ga * in_a * e;
      }
      // s_val = 2*tanh(s_raw)
      Eigen::ArrayXXd th = bc.s_raw.row(a).array().tanh();
      g_s_raw.row(a) = (g_s_val * 2.0 * (1.0 - th.square())).matrix();
    }

    MatX g_sub_in = subnet_backward(blk.scale, bc.subnet_in, bc.s_h1z, bc.s_h2z, g_s_raw);
    g_sub_in += subnet_backward(blk.trans, bc.subnet_in, bc.t_h1z, bc.t_h2z, g_t);

    MatX g_padded = g_sub_in.topRows(3);
    g_padded += blk.proj.backward(bc.padded, g_sub_in.middleRows(3, cfg_.proj_dim));
    for (int a : blk.active) g_padded.row(a).setZero();
    g_in += g_padded;
    g = g_in;
  }
  return g;
}

MatX CouplingINN::canonical_pass(const MatX& x, const VecX& pose,
                                 CouplingCache* cache) const {
  return run_blocks(blocks_, true, x, pose, cache);
}

MatX CouplingINN::view_pass(const MatX& x, const VecX& pose,
                            CouplingCache* cache) const {
  if (fwd_blocks_) return run_blocks(*fwd_blocks_, false, x, pose, cache);
  return run_blocks(blocks_, false, x, pose, cache);
}

MatX CouplingINN::canonical_pass_backward(const CouplingCache& cache, const MatX& g_out) {
  return run_blocks_backward(blocks_, true, cache, g_out);
}

MatX CouplingINN::view_pass_backward(const CouplingCache& cache, const MatX& g_out) {
  if (fwd_blocks_) return run_blocks_backward(*fwd_blocks_, false, cache, g_out);
  return run_blocks_backward(blocks_, false, cache, g_out);
}

void CouplingINN::collect_params(ParamList& out, const std::string& prefix) {
  auto collect = [&](std::array<CouplingBlock, 2>& blocks, const std::string& base) {
    for (int i = 0; i < 2; ++i) {
      std::string bp = base + ".block" + std::to_string(i);
      append_linear_params(out, bp + ".proj", blocks[static_cast<size_t>(i)].proj);
      append_linear_params(out, bp + ".scale.l1", blocks[static_cast<size_t>(i)].scale.l1);
      append_linear_params(out, bp + ".scale.l2", blocks[static_cast<size_t>(i)].scale.l2);
      append_linear_params(out, bp + ".scale.l3", blocks[static_cast<size_t>(i)].scale.l3);
      append_linear_params(out, bp + ".trans.l1", blocks[static_cast<size_t>(i)].trans.l1);
      append_linear_params(out, bp + ".trans.l2", blocks[static_cast<size_t>(i)].trans.l2);
      append_linear_params(out, bp + ".trans.l3", blocks[static_cast<size_t>(i)].trans.l3);
    }
  };
  collect(blocks_, prefix);
  if (fwd_blocks_) collect(*fwd_blocks_, prefix + ".fwd");
}

SkinningNet::SkinningNet(int n_b, int hidden, std::uint64_t seed) : n_b_(n_b) {
  NormalSampler rng(seed);
  l1_.init(3, hidden, rng, std::sqrt(2.0 / 3.0));
  l2_.init(hidden, hidden, rng, std::sqrt(2.0 / hidden));
  l3_.init(hidden, n_b, rng, std::sqrt(2.0 / hidden));
}

MatX SkinningNet::forward(const MatX& x, SkinningCache* cache) const {
  if (x.rows() != 3) throw InvalidInput("SkinningNet: expected 3xN input");
  MatX h1z = l1_.forward(x);
  MatX h2z = l2_.forward(act_forward(kHiddenAct, h1z));
  MatX logits = l3_.forward(act_forward(kHiddenAct, h2z));
  // Stable softmax per column.
  MatX w(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    VecX col = logits.col(c);
    col.array() -= col.maxCoeff();
    VecX e = col.array().exp();
    w.col(c) = e / e.sum();
  }
  if (cache) {
    cache->x_in = x;
    cache->h1z = std::move(h1z);
    cache->h2z = std::move(h2z);
    cache->logits = std::move(logits);
    cache->w = w;
  }
  return w;
}

MatX SkinningNet::backward(const SkinningCache& cache, const MatX& g_w) {
  // Softmax backward: gz = w .* (g - sum(g .* w)).
  MatX gz(g_w.rows(), g_w.cols());
  for (Eigen::Index c = 0; c < g_w.cols(); ++c) {
    double dot = g_w.col(c).dot(cache.w.col(c));
    gz.col(c) = cache.w.col(c).cwiseProduct(g_w.col(c).array().matrix() -
                                            VecX::Constant(g_w.rows(), dot));
  }
  MatX h2 = act_forward(kHiddenAct, cache.h2z);
  MatX g_h2 = l3_.backward(h2, gz);
  MatX g_h2z = g_h2.cwiseProduct(act_deriv(kHiddenAct, cache.h2z));
  MatX h1 = act_forward(kHiddenAct, cache.h1z);
  MatX g_h1 = l2_.backward(h1, g_h2z);
  MatX g_h1z = g_h1.cwiseProduct(act_deriv(kHiddenAct, cache.h1z));
  return l1_.backward(cache.x_in, g_h1z);
}

SkinningWeights SkinningNet::predict(const Vec3& x_c_prime) const {
  MatX w = forward(x_c_prime, nullptr);
  SkinningWeights sw;
  sw.w = w.col(0);
  return sw;
}

void SkinningNet::collect_params(ParamList& out, const std::string& prefix) {
  append_linear_params(out, prefix + ".l1", l1_);
  append_linear_params(out, prefix + ".l2", l2_);
  append_linear_params(out, prefix + ".l3", l3_);
}

MatX inn_inverse_map(const MatX& x_v, const SkeletonFrame& skel,
                     const CouplingINN& net, CouplingCache* cache,
                     MatX* x_c_init_out, bool use_canonical_init) {
  if (!x_v.allFinite()) throw InvalidInput("inn_inverse_map: non-finite input");
  MatX x_init(3, x_v.cols());
  if (use_canonical_init) {
    for (Eigen::Index c = 0; c < x_v.cols(); ++c)
      x_init.col(c) = canonical_init(x_v.col(c), skel);
  } else {
    x_init = x_v;
  }
  if (x_c_init_out) *x_c_init_out = x_init;
  return net.canonical_pass(x_init, skel.posed_flat(), cache);
}

MatX inn_forward_map(const MatX& x_c, const SkeletonFrame& skel,
                     const CouplingINN& net, CouplingCache* cache) {
  MatX x_init = net.view_pass(x_c, skel.posed_flat(), cache);
  MatX x_v(3, x_c.cols());
  for (Eigen::Index c = 0; c < x_c.cols(); ++c) {
    SkinningWeights w = nearest_canonical_joint_onehot(x_init.col(c), skel);
    x_v.col(c) = blend_transforms(w, skel).apply(x_init.col(c));
  }
  return x_v;
}

DeformerForward canonicalize(const MatX& x_v, const SkeletonFrame& skel,
                             const CouplingINN& inn, const SkinningNet& snet,
                             bool use_canonical_init) {
  DeformerForward fwd;
  fwd.x_v = x_v;
  fwd.x_c_prime = inn_inverse_map(x_v, skel, inn, &fwd.inn_cache, &fwd.x_c_init,
                                  use_canonical_init);
  fwd.w_s = snet.forward(fwd.x_c_prime, &fwd.snet_cache);

  const auto N = x_v.cols();
  fwd.x_c.resize(3, N);
  fwd.blends.resize(static_cast<size_t>(N));
  fwd.degenerate.assign(static_cast<size_t>(N), 0);
  SkinningWeights w;
  for (Eigen::Index c = 0; c < N; ++c) {
    w.w = fwd.w_s.col(c);
    AffineBlend blend = blend_transforms(w, skel);
    fwd.blends[static_cast<size_t>(c)] = blend;
    if (blend.condition_number() > 1e8) {
      fwd.degenerate[static_cast<size_t>(c)] = 1;
      fwd.x_c.col(c) = fwd.x_c_prime.col(c);
      continue;
    }
    fwd.x_c.col(c) = blend.apply_inverse(x_v.col(c));
  }
  return fwd;
}

void canonicalize_backward(const DeformerForward& fwd, const SkeletonFrame& skel,
                           CouplingINN& inn, SkinningNet& snet, const MatX& g_x_c,
                           const MatX& g_x_c_prime, const MatX& g_w_s) {
  const auto N = fwd.x_v.cols();
  MatX g_w = g_w_s.size() ? g_w_s : MatX::Zero(skel.n_b, N);

  if (g_x_c.size()) {
    // x_c = A(w)^{-1} (x_v - c(w)); dx_c/dw_b = -A^{-1} (R_b x_c + t_b).
    for (Eigen::Index c = 0; c < N; ++c) {
      if (fwd.degenerate[static_cast<size_t>(c)]) continue;
      const AffineBlend& blend = fwd.blends[static_cast<size_t>(c)];
      Vec3 y = blend.A.transpose().partialPivLu().solve(Vec3(g_x_c.col(c)));
      Vec3 xc = fwd.x_c.col(c);
      for (int b = 0; b < skel.n_b; ++b) {
        const RigidTransform& bt = skel.bone_transforms[static_cast<size_t>(b)];
        g_w(b, c) -= y.dot(bt.rotation * xc + bt.translation);
      }
    }
  }

  MatX g_prime = snet.backward(fwd.snet_cache, g_w);
  if (g_x_c_prime.size()) g_prime += g_x_c_prime;
  // x_c_init is constant w.r.t. parameters; the input gradient stops here.
  inn.canonical_pass_backward(fwd.inn_cache, g_prime);
}

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0

#include "tfs/fields.hpp"

namespace tfs {

namespace {
constexpr Act kSdfAct = Act::Softplus100;
constexpr Act kRgbAct = Act::Softplus10;
}  // namespace

MatX FreqEncoding::encode(const MatX& p) {
  if (p.rows() != 3) throw InvalidInput("FreqEncoding: expected 3xN input");
  if (!p.allFinite()) throw InvalidInput("FreqEncoding: non-finite input");
  MatX u(kDim, p.cols());
  u.topRows(3) = p;
  for (int k = 0; k < kOctaves; ++k) {
    double f = std::pow(2.0, k) * M_PI;
    for (int a = 0; a < 3; ++a) {
      u.row(3 + 6 * k + a) = (f * p.row(a).array()).sin();
      u.row(3 + 6 * k + 3 + a) = (f * p.row(a).array()).cos();
    }
  }
  return u;
}

void FreqEncoding::derivs(const MatX& p, MatX& d1, MatX& d2) {
  d1.resize(kDim, p.cols());
  d2.resize(kDim, p.cols());
  d1.topRows(3).setOnes();
  d2.topRows(3).setZero();
  for (int k = 0; k < kOctaves; ++k) {
    double f = std::pow(2.0, k) * M_PI;
    for (int a = 0; a < 3; ++a) {
      Eigen::ArrayXXd s = (f * p.row(a).array()).sin();
      Eigen::ArrayXXd c = (f * p.row(a).array()).cos();
      d1.row(3 + 6 * k + a) = (f * c).matrix();
      d2.row(3 + 6 * k + a) = (-f * f * s).matrix();
      d1.row(3 + 6 * k + 3 + a) = (-f * s).matrix();
      d2.row(3 + 6 * k + 3 + a) = (-f * f * c).matrix();
    }
  }
}

int FreqEncoding::axis_of(int row) {
  if (row < 3) return row;
  return (row - 3) % 6 % 3;
}

double default_semantic_sigma(const SkeletonFrame& skel) {
  double diag = skel.canonical_bbox_diagonal();
  // A single-joint skeleton has zero diagonal; fall back to a unit scale.
  return diag > 0.0 ? 0.1 * diag : 0.1;
}

MatX semantic_point_weights_batch(const MatX& x_c, const SkeletonFrame& skel_d,
                                  const SkeletonFrame& skel_nd, double sigma_d,
                                  double sigma_nd, SemanticCache* cache) {
  if (sigma_d <= 0.0 || sigma_nd <= 0.0)
    throw InvalidInput("semantic_point_weights: sigma must be > 0");
  const auto N = x_c.cols();
  MatX omega(3, N);
  MatX diff_d(3, N), diff_nd(3, N);
  std::vector<char> clamped(static_cast<size_t>(N), 0);

  auto nearest_diff = [](const Vec3& x, const SkeletonFrame& skel) -> Vec3 {
    int best = 0;
    double best_d2 = (x - skel.canonical_joints[0]).squaredNorm();
    for (int b = 1; b < skel.n_b; ++b) {
      double d2 = (x - skel.canonical_joints[b]).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = b;
      }
    }
    return x - skel.canonical_joints[best];
  };

  for (Eigen::Index c = 0; c < N; ++c) {
    Vec3 x = x_c.col(c);
    Vec3 dd = nearest_diff(x, skel_d);
    Vec3 dn = nearest_diff(x, skel_nd);
    diff_d.col(c) = dd;
    diff_nd.col(c) = dn;
    double wd = std::exp(-dd.squaredNorm() / (sigma_d * sigma_d));
    double wn = std::exp(-dn.squaredNorm() / (sigma_nd * sigma_nd));
    double sum = wd + wn;
    clamped[static_cast<size_t>(c)] = sum >= 1.0;
    omega(0, c) = wd;
    omega(1, c) = wn;
    omega(2, c) = 1.0 - std::min(sum, 1.0);
  }

  if (cache) {
    cache->diff_d = std::move(diff_d);
    cache->diff_nd = std::move(diff_nd);
    cache->omega_d = omega.row(0).transpose();
    cache->omega_nd = omega.row(1).transpose();
    cache->clamped = std::move(clamped);
    cache->sigma_d = sigma_d;
    cache->sigma_nd = sigma_nd;
  }
  return omega;
}

SemanticPointWeights semantic_point_weights(const Vec3& x_c,
                                            const SkeletonFrame& skel_d,
                                            const SkeletonFrame& skel_nd,
                                            double sigma_d, double sigma_nd) {
  MatX omega = semantic_point_weights_batch(x_c, skel_d, skel_nd, sigma_d,
                                            sigma_nd, nullptr);
  return {omega(0, 0), omega(1, 0), omega(2, 0)};
}

void assemble_sdf_input(const MatX& x_c, const SkeletonFrame& own_skel,
                        const SkeletonFrame& skel_d, const SkeletonFrame& skel_nd,
                        double sigma_d, double sigma_nd, const Vec3& origin,
                        MatX& u, std::array<MatX, 3>& j_u, SdfInputCache* cache) {
  const auto N = x_c.cols();
  const int n_b = own_skel.n_b;
  const int dim = FreqEncoding::kDim + 3 * n_b + 3;
  const int sem_row0 = FreqEncoding::kDim + 3 * n_b;

  MatX p = x_c.colwise() - origin;
  u.resize(dim, N);
  u.topRows(FreqEncoding::kDim) = FreqEncoding::encode(p);
  u.middleRows(FreqEncoding::kDim, 3 * n_b) = own_skel.canonical_flat().replicate(1, N);

  SemanticCache local_sem;
  SemanticCache& sem = cache ? cache->sem : local_sem;
  u.bottomRows(3) =
      semantic_point_weights_batch(x_c, skel_d, skel_nd, sigma_d, sigma_nd, &sem);

  MatX d1, d2;
  FreqEncoding::derivs(p, d1, d2);

  for (auto& j : j_u) j = MatX::Zero(dim, N);
  for (int row = 0; row < FreqEncoding::kDim; ++row)
    j_u[static_cast<size_t>(FreqEncoding::axis_of(row))].row(row) = d1.row(row);

  // d omega / dx = -(2/sigma^2) * omega * diff.
  for (int k = 0; k < 3; ++k) {
    Eigen::ArrayXXd gd =
        (-2.0 / (sigma_d * sigma_d)) * sem.omega_d.transpose().array() *
        sem.diff_d.row(k).array();
    Eigen::ArrayXXd gn =
        (-2.0 / (sigma_nd * sigma_nd)) * sem.omega_nd.transpose().array() *
        sem.diff_nd.row(k).array();
    j_u[static_cast<size_t>(k)].row(sem_row0 + 0) = gd.matrix();
    j_u[static_cast<size_t>(k)].row(sem_row0 + 1) = gn.matrix();
    for (Eigen::Index c = 0; c < N; ++c)
      j_u[static_cast<size_t>(k)](sem_row0 + 2, c) =
          sem.clamped[static_cast<size_t>(c)] ? 0.0 : -(gd(0, c) + gn(0, c));
  }

  if (cache) {
    cache->freq_d1 = std::move(d1);
    cache->freq_d2 = std::move(d2);
    cache->n_b = n_b;
  }
}

MatX assemble_sdf_input_backward(const SdfInputCache& cache, const MatX& g_u,
                                 const std::array<MatX, 3>& g_ju) {
  const auto N = g_u.cols();
  const int sem_row0 = FreqEncoding::kDim + 3 * cache.n_b;
  MatX g_x = MatX::Zero(3, N);

  for (int row = 0; row < FreqEncoding::kDim; ++row) {
    int a = FreqEncoding::axis_of(row);
    g_x.row(a) += g_u.row(row).cwiseProduct(cache.freq_d1.row(row));
    g_x.row(a) +=
        g_ju[static_cast<size_t>(a)].row(row).cwiseProduct(cache.freq_d2.row(row));
  }

  const SemanticCache& sem = cache.sem;
  auto add_entity = [&](int row, const MatX& diff, const VecX& omega, double sigma,
                        double sign, bool respect_clamp) {
    double inv_s2 = 1.0 / (sigma * sigma);
    for (Eigen::Index c = 0; c < N; ++c) {
      if (respect_clamp && sem.clamped[static_cast<size_t>(c)]) continue;
      Vec3 d = diff.col(c);
      double w = omega[c];
      Vec3 grad = -2.0 * inv_s2 * w * d;
      Mat3 hess =
          -2.0 * inv_s2 * w * (Mat3::Identity() - 2.0 * inv_s2 * d * d.transpose());
      Vec3 jbar(g_ju[0](row, c), g_ju[1](row, c), g_ju[2](row, c));
      g_x.col(c) += sign * (grad * g_u(row, c) + hess * jbar);
    }
  };
  add_entity(sem_row0 + 0, sem.diff_d, sem.omega_d, sem.sigma_d, 1.0, false);
  add_entity(sem_row0 + 1, sem.diff_nd, sem.omega_nd, sem.sigma_nd, 1.0, false);
  add_entity(sem_row0 + 2, sem.diff_d, sem.omega_d, sem.sigma_d, -1.0, true);
  add_entity(sem_row0 + 2, sem.diff_nd, sem.omega_nd, sem.sigma_nd, -1.0, true);
  return g_x;
}

SdfHead::SdfHead(const SdfConfig& cfg, std::uint64_t seed, const Vec3& origin)
    : cfg_(cfg), origin_(origin) {
  NormalSampler rng(seed);
  const int in = cfg_.in_dim();
  layers_.resize(static_cast<size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    int in_l = (l == 0) ? in : (l == cfg_.skip_layer ? cfg_.hidden + in : cfg_.hidden);
    int out_l = (l == cfg_.n_layers - 1) ? 1 + cfg_.feat_dim : cfg_.hidden;
    Linear& lin = layers_[static_cast<size_t>(l)];

    // Geometric initialization. The scene lives inside a fraction of a
    // unit, so pre-activations are boosted past the softplus smoothing band
    // (width 1/beta) and the output layer compensates. Layer 0 projects onto
    // an evenly spread set of unit directions (so the relu responses average
    // to a multiple of |x|), the hidden layers start as the identity (relu
    // passes their nonnegative inputs through unchanged), and the output
    // layer averages the responses into |x| - r with bias -r.
    const double boost = 20.0;

    if (l == 0) {
      // Fibonacci-sphere direction kernels on the raw xyz columns; the
      // encoded / pose / semantic columns start at zero.
      lin.init_zero(in_l, out_l);
      const double golden = M_PI * (3.0 - std::sqrt(5.0));
      for (int r = 0; r < out_l; ++r) {
        double zc = 1.0 - 2.0 * (r + 0.5) / out_l;
        double rho = std::sqrt(std::max(0.0, 1.0 - zc * zc));
        double phi = golden * r;
        lin.W(r, 0) = boost * rho * std::cos(phi);
        lin.W(r, 1) = boost * rho * std::sin(phi);
        lin.W(r, 2) = boost * zc;
      }
      continue;
    }

    if (l == cfg_.n_layers - 1) {
      // A uniform direction set satisfies sum_k relu(d_k . x) ~= K |x| / 4.
      double mean = 4.0 / (boost * cfg_.hidden);
      lin.W.resize(out_l, in_l);
      for (int c = 0; c < in_l; ++c)
        for (int r = 0; r < out_l; ++r)
          lin.W(r, c) = mean * (1.0 + 1e-3 * rng());
      lin.b = MatX::Zero(out_l, 1);
      lin.b(0, 0) = -cfg_.sphere_radius;
      lin.zero_grad();
      continue;
    }

    // Near-identity hidden layer (skip columns start at zero).
    lin.init_zero(in_l, out_l);
    double noise = 1e-3 * std::sqrt(2.0 / out_l);
    for (int c = 0; c < in_l; ++c)
      for (int r = 0; r < out_l; ++r)
        lin.W(r, c) = (c == r ? 1.0 : 0.0) + noise * rng();
    if (l == cfg_.skip_layer) lin.W.rightCols(in).setZero();
  }
}

void SdfHead::eval_joint(const MatX& u, const std::array<MatX, 3>& j_u, MatX& sdf,
                         MatX& feat, MatX& grad, Cache* cache) const {
  if (u.rows() != cfg_.in_dim())
    throw InvalidInput("SdfHead: input dimension mismatch (expected " +
                       std::to_string(cfg_.in_dim()) + ")");
  const auto N = u.cols();
  const int L = cfg_.n_layers;

  if (cache) {
    cache->hin.resize(static_cast<size_t>(L));
    cache->jin.resize(static_cast<size_t>(L));
    cache->z.resize(static_cast<size_t>(L));
    cache->jz.resize(static_cast<size_t>(L));
  }

  MatX h = u;
  std::array<MatX, 3> jh = j_u;
  MatX z;
  std::array<MatX, 3> jz;
  for (int l = 0; l < L; ++l) {
    const Linear& lin = layers_[static_cast<size_t>(l)];
    MatX hin;
    std::array<MatX, 3> jin;
    if (l == cfg_.skip_layer) {
      hin.resize(h.rows() + u.rows(), N);
      hin << h, u;
      for (int k = 0; k < 3; ++k) {
        jin[static_cast<size_t>(k)].resize(h.rows() + u.rows(), N);
        jin[static_cast<size_t>(k)] << jh[static_cast<size_t>(k)],
            j_u[static_cast<size_t>(k)];
      }
    } else {
      hin = h;
      jin = jh;
    }

    z = lin.forward(hin);
    for (int k = 0; k < 3; ++k)
      jz[static_cast<size_t>(k)] = lin.W * jin[static_cast<size_t>(k)];

    if (cache) {
      cache->hin[static_cast<size_t>(l)] = hin;
      cache->jin[static_cast<size_t>(l)] = jin;
      cache->z[static_cast<size_t>(l)] = z;
      cache->jz[static_cast<size_t>(l)] = jz;
    }

    if (l < L - 1) {
      MatX d1 = act_deriv(kSdfAct, z);
      h = act_forward(kSdfAct, z);
      for (int k = 0; k < 3; ++k)
        jh[static_cast<size_t>(k)] = d1.cwiseProduct(jz[static_cast<size_t>(k)]);
    }
  }

  if (!z.allFinite()) throw NumericalError("SdfHead: non-finite output");
  sdf = z.topRows(1);
  feat = z.bottomRows(cfg_.feat_dim);
  grad.resize(3, N);
  for (int k = 0; k < 3; ++k) grad.row(k) = jz[static_cast<size_t>(k)].row(0);
}

void SdfHead::backward(const Cache& cache, const MatX& g_sdf, const MatX& g_feat,
                       const MatX& g_grad, MatX& g_u, std::array<MatX, 3>& g_ju) {
  const int L = cfg_.n_layers;
  const auto N = cache.z[static_cast<size_t>(L - 1)].cols();
  const int in_dim = cfg_.in_dim();

  g_u = MatX::Zero(in_dim, N);
  for (auto& g : g_ju) g = MatX::Zero(in_dim, N);

  MatX gz = MatX::Zero(1 + cfg_.feat_dim, N);
  if (g_sdf.size()) gz.row(0) = g_sdf;
  if (g_feat.size()) gz.bottomRows(cfg_.feat_dim) = g_feat;
  std::array<MatX, 3> gjz;
  for (int k = 0; k < 3; ++k) {
    gjz[static_cast<size_t>(k)] = MatX::Zero(1 + cfg_.feat_dim, N);
    if (g_grad.size()) gjz[static_cast<size_t>(k)].row(0) = g_grad.row(k);
  }

  for (int l = L - 1; l >= 0; --l) {
    Linear& lin = layers_[static_cast<size_t>(l)];
    const MatX& hin = cache.hin[static_cast<size_t>(l)];
    const auto& jin = cache.jin[static_cast<size_t>(l)];

    lin.gW.noalias() += gz * hin.transpose();
    for (int k = 0; k < 3; ++k)
      lin.gW.noalias() +=
          gjz[static_cast<size_t>(k)] * jin[static_cast<size_t>(k)].transpose();
    lin.gb.col(0) += gz.rowwise().sum();

    MatX ghin = lin.W.transpose() * gz;
    std::array<MatX, 3> gjin;
    for (int k = 0; k < 3; ++k)
      gjin[static_cast<size_t>(k)] = lin.W.transpose() * gjz[static_cast<size_t>(k)];

    if (l == cfg_.skip_layer) {
      g_u += ghin.bottomRows(in_dim);
      for (int k = 0; k < 3; ++k)
        g_ju[static_cast<size_t>(k)] +=
            gjin[static_cast<size_t>(k)].bottomRows(in_dim);
      ghin = ghin.topRows(ghin.rows() - in_dim).eval();
      for (int k = 0; k < 3; ++k)
        gjin[static_cast<size_t>(k)] =
            gjin[static_cast<size_t>(k)].topRows(gjin[static_cast<size_t>(k)].rows() - in_dim).eval();
    }

    if (l == 0) {
      g_u += ghin;
      for (int k = 0; k < 3; ++k) g_ju[static_cast<size_t>(k)] += gjin[static_cast<size_t>(k)];
      break;
    }

    // Through h = act(z_prev), Jh = act'(z_prev) .* Jz_prev.
    const MatX& zprev = cache.z[static_cast<size_t>(l - 1)];
    const auto& jzprev = cache.jz[static_cast<size_t>(l - 1)];
    MatX d1 = act_deriv(kSdfAct, zprev);
    MatX d2 = act_second_deriv(kSdfAct, zprev);
    MatX sum_term = MatX::Zero(zprev.rows(), N);
    for (int k = 0; k < 3; ++k)
      sum_term += gjin[static_cast<size_t>(k)].cwiseProduct(jzprev[static_cast<size_t>(k)]);
    gz = d1.cwiseProduct(ghin) + d2.cwiseProduct(sum_term);
    for (int k = 0; k < 3; ++k)
      gjz[static_cast<size_t>(k)] = d1.cwiseProduct(gjin[static_cast<size_t>(k)]);
  }
}

void SdfHead::collect_params(ParamList& out, const std::string& prefix) {
  for (int l = 0; l < cfg_.n_layers; ++l)
    append_linear_params(out, prefix + ".l" + std::to_string(l),
                         layers_[static_cast<size_t>(l)]);
}

void normals_from_gradients(const MatX& grad, MatX& normal,
                            std::vector<char>& degenerate) {
  const auto N = grad.cols();
  normal.resize(3, N);
  degenerate.assign(static_cast<size_t>(N), 0);
  for (Eigen::Index c = 0; c < N; ++c) {
    double n = grad.col(c).norm();
    if (n < 1e-8) {
      degenerate[static_cast<size_t>(c)] = 1;
      normal.col(c) = Vec3::UnitZ();
    } else {
      normal.col(c) = grad.col(c) / n;
    }
  }
}

MatX normals_backward(const MatX& grad, const MatX& normal,
                      const std::vector<char>& degenerate, const MatX& g_normal) {
  MatX g = MatX::Zero(3, grad.cols());
  for (Eigen::Index c = 0; c < grad.cols(); ++c) {
    if (degenerate[static_cast<size_t>(c)]) continue;
    double n = grad.col(c).norm();
    Vec3 nv = normal.col(c);
    Vec3 gn = g_normal.col(c);
    g.col(c) = (gn - nv * nv.dot(gn)) / n;
  }
  return g;
}

FieldEval sdf_eval_point(const SdfHead& head, const Vec3& x_c,
                         const SkeletonFrame& own_skel, const SkeletonFrame& skel_d,
                         const SkeletonFrame& skel_nd, double sigma_d,
                         double sigma_nd) {
  MatX u;
  std::array<MatX, 3> ju;
  assemble_sdf_input(x_c, own_skel, skel_d, skel_nd, sigma_d, sigma_nd,
                     head.origin(), u, ju, nullptr);
  MatX sdf, feat, grad;
  head.eval_joint(u, ju, sdf, feat, grad, nullptr);
  FieldEval out;
  out.sdf = sdf(0, 0);
  out.feat = feat.col(0);
  out.grad = grad.col(0);
  MatX normal;
  std::vector<char> degenerate;
  normals_from_gradients(grad, normal, degenerate);
  out.normal = normal.col(0);
  out.degenerate_normal = degenerate[0] != 0;
  return out;
}

RgbHead::RgbHead(const RgbConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  NormalSampler rng(seed);
  pose_compress_.init(cfg_.pose_dim, cfg_.pose_compressed, rng,
                      std::sqrt(2.0 / cfg_.pose_dim));
  layers_.resize(5);
  int dims[6] = {cfg_.in_dim(), cfg_.hidden, cfg_.hidden, cfg_.hidden, cfg_.hidden, 3};
  for (int l = 0; l < 5; ++l)
    layers_[static_cast<size_t>(l)].init(dims[l], dims[l + 1], rng,
                                         std::sqrt(2.0 / dims[l]));
}

MatX RgbHead::forward(const MatX& x_c, const MatX& normal, const MatX& feat,
                      const VecX& poses, Cache* cache) const {
  if (poses.size() != cfg_.pose_dim)
    throw InvalidInput("RgbHead: pose dimension mismatch");
  const auto N = x_c.cols();
  MatX pose8 = pose_compress_.forward(poses);

  MatX in(cfg_.in_dim(), N);
  in.topRows(3) = x_c;
  in.middleRows(3, 3) = normal;
  in.middleRows(6, cfg_.pose_compressed) = pose8.replicate(1, N);
  in.bottomRows(cfg_.feat_dim) = feat;

  std::vector<MatX> zs(5);
  MatX h = in;
  for (int l = 0; l < 5; ++l) {
    zs[static_cast<size_t>(l)] = layers_[static_cast<size_t>(l)].forward(h);
    if (l < 4) h = act_forward(kRgbAct, zs[static_cast<size_t>(l)]);
  }
  MatX rgb = zs[4].unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });

  if (cache) {
    cache->in = std::move(in);
    cache->pose8 = std::move(pose8);
    cache->pose = poses;
    cache->z = std::move(zs);
    cache->rgb = rgb;
  }
  return rgb;
}

void RgbHead::backward(const Cache& cache, const MatX& g_rgb, MatX& g_x_c,
                       MatX& g_normal, MatX& g_feat) {
  MatX gz = g_rgb.cwiseProduct(cache.rgb.cwiseProduct(
      (1.0 - cache.rgb.array()).matrix()));
  for (int l = 4; l >= 1; --l) {
    MatX h = act_forward(kRgbAct, cache.z[static_cast<size_t>(l - 1)]);
    MatX gh = layers_[static_cast<size_t>(l)].backward(h, gz);
    gz = gh.cwiseProduct(act_deriv(kRgbAct, cache.z[static_cast<size_t>(l - 1)]));
  }
  MatX g_in = layers_[0].backward(cache.in, gz);

  g_x_c = g_in.topRows(3);
  g_normal = g_in.middleRows(3, 3);
  g_feat = g_in.bottomRows(cfg_.feat_dim);
  MatX g_pose8 = g_in.middleRows(6, cfg_.pose_compressed).rowwise().sum();
  pose_compress_.backward(cache.pose, g_pose8);
}

void RgbHead::collect_params(ParamList& out, const std::string& prefix) {
  append_linear_params(out, prefix + ".pose_compress", pose_compress_);
  for (int l = 0; l < 5; ++l)
    append_linear_params(out, prefix + ".l" + std::to_string(l),
                         layers_[static_cast<size_t>(l)]);
}

}  // namespace tfs

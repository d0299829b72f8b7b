// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "tfs/deformer.hpp"

using namespace tfs;
using namespace tfs::test;

namespace {

InnConfig small_cfg(int n_b) {
  InnConfig cfg;
  cfg.n_b = n_b;
  cfg.hidden = 24;
  cfg.proj_dim = 12;
  return cfg;
}

// Perturb every parameter so the network is no longer the identity while
// staying well-conditioned.
void jitter_params(const ParamList& params, double scale, std::uint64_t seed) {
  NormalSampler rng(seed);
  for (const ParamRef& p : params)
    for (Eigen::Index i = 0; i < p.value->size(); ++i)
      (*p.value)(i) += scale * rng();
}

VecX chain_pose(const SkeletonFrame& skel) {
  VecX pose(3 * skel.n_b);
  for (int b = 0; b < skel.n_b; ++b)
    pose.segment<3>(3 * b) = skel.posed_joints[static_cast<size_t>(b)];
  return pose;
}

}  // namespace

TEST_CASE("freshly initialized coupling network is the identity") {
  InnConfig cfg = small_cfg(3);
  CHECK(cfg.subnet_in() == 3 + 12 + 9);
  CouplingINN inn(cfg, 7);
  MatX x = MatX::Random(3, 20);
  VecX pose = VecX::Random(9);
  CHECK((inn.canonical_pass(x, pose, nullptr) - x).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((inn.view_pass(x, pose, nullptr) - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("coupling round trip inverts to 1e-5 after parameter jitter") {
  InnConfig cfg = small_cfg(4);
  CouplingINN inn(cfg, 11);
  ParamList params;
  inn.collect_params(params, "inn");
  jitter_params(params, 0.05, 99);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  MatX x(3, 2000);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = uni(rng);
  VecX pose = VecX::Random(12);
  MatX x_c = inn.canonical_pass(x, pose, nullptr);
  MatX back = inn.view_pass(x_c, pose, nullptr);
  CHECK((back - x).colwise().norm().maxCoeff() < 1e-5);
  // And the other direction.
  MatX x_v = inn.view_pass(x, pose, nullptr);
  MatX back2 = inn.canonical_pass(x_v, pose, nullptr);
  CHECK((back2 - x).colwise().norm().maxCoeff() < 1e-5);
}

TEST_CASE("separate_forward decouples the two directions") {
  InnConfig cfg = small_cfg(3);
  cfg.separate_forward = true;
  CouplingINN inn(cfg, 5);
  ParamList params;
  inn.collect_params(params, "inn");
  // Jitter only the canonical-direction stack: the view stack has distinct
  // parameter names when separately parameterized.
  int n_fwd = 0;
  for (const ParamRef& p : params)
    if (p.name.find("fwd") != std::string::npos) ++n_fwd;
  CHECK(n_fwd > 0);
  for (const ParamRef& p : params)
    if (p.name.find("fwd") == std::string::npos)
      p.value->array() += 0.05;
  MatX x = MatX::Random(3, 8);
  VecX pose = VecX::Random(9);
  MatX canon = inn.canonical_pass(x, pose, nullptr);
  MatX view = inn.view_pass(x, pose, nullptr);
  CHECK((canon - x).cwiseAbs().maxCoeff() > 1e-6);   // canonical stack moved
  CHECK((view - x).cwiseAbs().maxCoeff() < 1e-12);   // view stack still identity
}

TEST_CASE("pose conditioning changes the output") {
  InnConfig cfg = small_cfg(3);
  CouplingINN inn(cfg, 13);
  ParamList params;
  inn.collect_params(params, "inn");
  jitter_params(params, 0.05, 17);
  MatX x = MatX::Random(3, 4);
  VecX p1 = VecX::Random(9);
  VecX p2 = p1;
  p2[0] += 0.5;
  CHECK((inn.canonical_pass(x, p1, nullptr) - inn.canonical_pass(x, p2, nullptr))
            .cwiseAbs()
            .maxCoeff() > 1e-8);
}

TEST_CASE("canonical pass gradients match finite differences") {
  InnConfig cfg = small_cfg(3);
  CouplingINN inn(cfg, 21);
  ParamList params;
  inn.collect_params(params, "inn");
  jitter_params(params, 0.05, 31);
  MatX x = MatX::Random(3, 6);
  VecX pose = VecX::Random(9);
  auto run = [&]() {
    CouplingCache cache;
    MatX y = inn.canonical_pass(x, pose, &cache);
    MatX g = MatX::Ones(3, 6);
    inn.canonical_pass_backward(cache, g);
    return y.sum();
  };
  check_param_grads(params, run, 1e-4, 3);
}

TEST_CASE("view pass gradients match finite differences") {
  InnConfig cfg = small_cfg(3);
  CouplingINN inn(cfg, 22);
  ParamList params;
  inn.collect_params(params, "inn");
  jitter_params(params, 0.05, 32);
  MatX x = MatX::Random(3, 6);
  VecX pose = VecX::Random(9);
  auto run = [&]() {
    CouplingCache cache;
    MatX y = inn.view_pass(x, pose, &cache);
    MatX g = MatX::Ones(3, 6);
    inn.view_pass_backward(cache, g);
    return y.sum();
  };
  check_param_grads(params, run, 1e-4, 3);
}

TEST_CASE("skinning net outputs a softmax") {
  SkinningNet snet(5, 16, 3);
  MatX x = MatX::Random(3, 10);
  MatX w = snet.forward(x, nullptr);
  REQUIRE(w.rows() == 5);
  REQUIRE(w.cols() == 10);
  CHECK((w.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(w.minCoeff() > 0.0);
  SkinningWeights single = snet.predict(Vec3(0.1, 0.2, 0.3));
  CHECK(single.is_valid());
}

TEST_CASE("skinning net gradients match finite differences") {
  SkinningNet snet(4, 16, 9);
  ParamList params;
  snet.collect_params(params, "snet");
  jitter_params(params, 0.1, 41);
  MatX x = MatX::Random(3, 5);
  MatX g(4, 5);
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = 0.1 * (i % 7) - 0.3;
  auto run = [&]() {
    SkinningCache cache;
    MatX w = snet.forward(x, &cache);
    snet.backward(cache, g);
    return (w.array() * g.array()).sum();
  };
  check_param_grads(params, run, 1e-4, 4);
}

TEST_CASE("inn_inverse_map at init reduces to the nearest-joint warm start") {
  SkeletonFrame skel = chain_skeleton(3, 0.3, {0.4, -0.3, 0.2});
  CouplingINN inn(small_cfg(3), 2);
  MatX x_v(3, 3);
  for (int b = 0; b < 3; ++b)
    x_v.col(b) = skel.posed_joints[static_cast<size_t>(b)] + Vec3(0.01, 0.02, 0.0);
  MatX x_init;
  MatX x_c = inn_inverse_map(x_v, skel, inn, nullptr, &x_init);
  for (int i = 0; i < 3; ++i) {
    Vec3 want = canonical_init(x_v.col(i), skel);
    CHECK((Vec3(x_init.col(i)) - want).norm() < 1e-12);
    CHECK((Vec3(x_c.col(i)) - want).norm() < 1e-12);
  }
  // Ablation: no warm start passes x_v straight through the identity net.
  MatX raw = inn_inverse_map(x_v, skel, inn, nullptr, nullptr, false);
  CHECK((raw - x_v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("inn_forward_map inverts inn_inverse_map near the bones") {
  SkeletonFrame skel = chain_skeleton(4, 0.3, {0.5, -0.2, 0.3, 0.1});
  CouplingINN inn(small_cfg(4), 33);
  ParamList params;
  inn.collect_params(params, "inn");
  jitter_params(params, 0.02, 55);
  std::vector<Vec3> pts = sample_bone_points(skel, true, 200, 0.02, 4);
  MatX x_v(3, static_cast<Eigen::Index>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) x_v.col(static_cast<Eigen::Index>(i)) = pts[i];
  MatX x_c = inn_inverse_map(x_v, skel, inn);
  MatX back = inn_forward_map(x_c, skel, inn);
  // The composition is exact where the nearest-joint assignment agrees in
  // both spaces; count near-misses rather than demanding all.
  int ok = 0;
  for (Eigen::Index i = 0; i < x_v.cols(); ++i)
    if ((back.col(i) - x_v.col(i)).norm() < 1e-6) ++ok;
  CHECK(ok >= static_cast<int>(0.95 * static_cast<double>(x_v.cols())));
}

TEST_CASE("canonicalize: blends reproduce inputs and weights match the net") {
  SkeletonFrame skel = chain_skeleton(3, 0.3, {0.3, -0.4, 0.2});
  CouplingINN inn(small_cfg(3), 8);
  SkinningNet snet(3, 16, 9);
  std::vector<Vec3> pts = sample_bone_points(skel, true, 64, 0.03, 6);
  MatX x_v(3, static_cast<Eigen::Index>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) x_v.col(static_cast<Eigen::Index>(i)) = pts[i];
  DeformerForward fwd = canonicalize(x_v, skel, inn, snet);
  REQUIRE(fwd.x_c.cols() == x_v.cols());
  REQUIRE(fwd.blends.size() == pts.size());
  for (Eigen::Index i = 0; i < x_v.cols(); ++i) {
    if (fwd.degenerate[static_cast<size_t>(i)]) continue;
    // The blended transform maps the canonical result back to the input.
    Vec3 re = fwd.blends[static_cast<size_t>(i)].apply(Vec3(fwd.x_c.col(i)));
    CHECK((re - Vec3(x_v.col(i))).norm() < 1e-9);
    // Weights in the forward record agree with a direct prediction.
    SkinningWeights w = snet.predict(Vec3(fwd.x_c_prime.col(i)));
    CHECK((w.w - fwd.w_s.col(i)).norm() < 1e-12);
  }
}

TEST_CASE("canonicalize_backward gradients match finite differences") {
  SkeletonFrame skel = chain_skeleton(3, 0.25, {0.4, -0.1, 0.3});
  CouplingINN inn(small_cfg(3), 44);
  SkinningNet snet(3, 16, 45);
  ParamList params;
  inn.collect_params(params, "inn");
  snet.collect_params(params, "snet");
  jitter_params(params, 0.03, 77);
  std::vector<Vec3> pts = sample_bone_points(skel, true, 8, 0.02, 12);
  MatX x_v(3, static_cast<Eigen::Index>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) x_v.col(static_cast<Eigen::Index>(i)) = pts[i];

  auto run = [&]() {
    DeformerForward fwd = canonicalize(x_v, skel, inn, snet);
    MatX g = MatX::Ones(3, x_v.cols());
    canonicalize_backward(fwd, skel, inn, snet, g, MatX(), MatX());
    return fwd.x_c.sum();
  };
  check_param_grads(params, run, 1e-3, 3);
}

TEST_CASE("canonicalize_backward routes x_c_prime and w_s gradients") {
  SkeletonFrame skel = chain_skeleton(3, 0.25, {0.2, 0.3, -0.2});
  CouplingINN inn(small_cfg(3), 46);
  SkinningNet snet(3, 16, 47);
  ParamList params;
  inn.collect_params(params, "inn");
  snet.collect_params(params, "snet");
  jitter_params(params, 0.03, 78);
  std::vector<Vec3> pts = sample_bone_points(skel, true, 6, 0.02, 13);
  MatX x_v(3, static_cast<Eigen::Index>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) x_v.col(static_cast<Eigen::Index>(i)) = pts[i];
  MatX gw(3, x_v.cols());
  for (Eigen::Index i = 0; i < gw.size(); ++i) gw(i) = 0.05 * (i % 5) - 0.1;

  auto run = [&]() {
    DeformerForward fwd = canonicalize(x_v, skel, inn, snet);
    MatX g_prime = MatX::Constant(3, x_v.cols(), 0.5);
    MatX g_ws(static_cast<Eigen::Index>(3), x_v.cols());
    g_ws = gw;
    canonicalize_backward(fwd, skel, inn, snet, MatX(), g_prime, g_ws);
    return 0.5 * fwd.x_c_prime.sum() + (fwd.w_s.array() * gw.array()).sum();
  };
  check_param_grads(params, run, 1e-3, 3);
}

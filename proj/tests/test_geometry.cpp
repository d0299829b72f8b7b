// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "tfs/geometry.hpp"

#include <nlohmann/json.hpp>

using namespace tfs;
using namespace tfs::test;

namespace {

SkeletonFrame translated_bone(const Vec3& t) {
  SkeletonFrame s;
  s.n_b = 1;
  s.parent = {-1};
  s.canonical_joints = {Vec3::Zero()};
  s.bone_transforms = {{Mat3::Identity(), t}};
  s.posed_joints = {t};
  s.validate();
  return s;
}

}  // namespace

TEST_CASE("lbs_forward identity and single transforms") {
  SkeletonFrame s = identity_chain(2);
  CHECK(lbs_forward(SkinningWeights::one_hot(2, 0), s, Vec3(1, 2, 3))
            .isApprox(Vec3(1, 2, 3)));

  SkeletonFrame t = translated_bone(Vec3(0, 0, 5));
  CHECK(lbs_forward(SkinningWeights::one_hot(1, 0), t, Vec3(1, 0, 0))
            .isApprox(Vec3(1, 0, 5)));
}

TEST_CASE("lbs_forward blends pure translations affinely") {
  SkeletonFrame s;
  s.n_b = 2;
  s.parent = {-1, 0};
  s.canonical_joints = {Vec3::Zero(), Vec3(0, 1, 0)};
  s.bone_transforms = {{Mat3::Identity(), Vec3(2, 0, 0)},
                       {Mat3::Identity(), Vec3(0, 2, 0)}};
  s.posed_joints = {Vec3(2, 0, 0), Vec3(0, 3, 0)};
  s.validate();
  SkinningWeights w;
  w.w = VecX::Constant(2, 0.5);
  CHECK(lbs_forward(w, s, Vec3::Zero()).isApprox(Vec3(1, 1, 0)));
}

TEST_CASE("lbs_forward rejects dimension mismatch") {
  SkeletonFrame s = identity_chain(2);
  CHECK_THROWS_AS(lbs_forward(SkinningWeights::one_hot(3, 0), s, Vec3::Zero()),
                  InvalidInput);
}

TEST_CASE("one-hot lbs equals the selected rigid transform exactly") {
  SkeletonFrame s = chain_skeleton(4, 0.3, {0.3, -0.5, 0.7, 0.2});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vec3 x(uni(rng), uni(rng), uni(rng));
    int b = static_cast<int>(rng() % 4);
    Vec3 got = lbs_forward(SkinningWeights::one_hot(4, b), s, x);
    Vec3 want = s.bone_transforms[static_cast<size_t>(b)].apply(x);
    CHECK((got - want).norm() == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("nearest_joint_onehot exact, ties and brute force") {
  SkeletonFrame s = identity_chain(24, 0.2);
  CHECK(nearest_joint_onehot(s.posed_joints[3], s).w[3] == 1.0);

  // Exactly equidistant between joints 1 and 2 -> lowest index wins.
  SkeletonFrame grid = identity_chain(4, 2.0);
  Vec3 mid = 0.5 * (grid.posed_joints[1] + grid.posed_joints[2]);
  CHECK((mid - grid.posed_joints[1]).norm() ==
        (mid - grid.posed_joints[2]).norm());
  SkinningWeights tie = nearest_joint_onehot(mid, grid);
  CHECK(tie.w[1] == 1.0);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uni(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 x(uni(rng), uni(rng), uni(rng));
    SkinningWeights w = nearest_joint_onehot(x, s);
    int best = 0;
    for (int b = 1; b < 24; ++b)
      if ((x - s.posed_joints[static_cast<size_t>(b)]).norm() <
          (x - s.posed_joints[static_cast<size_t>(best)]).norm())
        best = b;
    CHECK(w.w[best] == 1.0);
  }
}

TEST_CASE("canonical_init maps posed joints to canonical joints") {
  SkeletonFrame s = chain_skeleton(4, 0.3, {0.4, -0.2, 0.6, -0.3});
  for (int k = 0; k < 4; ++k)
    CHECK((canonical_init(s.posed_joints[static_cast<size_t>(k)], s) -
           s.canonical_joints[static_cast<size_t>(k)])
              .norm() < 1e-9);

  SkeletonFrame id = identity_chain(4);
  Vec3 x(0.3, -0.2, 0.9);
  CHECK((canonical_init(x, id) - x).norm() < 1e-12);
}

TEST_CASE("canonical_init rotation oracle: offset from a posed joint") {
  // Pure rotation about the origin-anchored root joint.
  double a = 0.7;
  SkeletonFrame s;
  s.n_b = 2;
  s.parent = {-1, 0};
  s.canonical_joints = {Vec3::Zero(), Vec3(0, 5, 0)};  // joint 1 far away
  Mat3 R = rot_z(a);
  s.bone_transforms = {{R, Vec3::Zero()}, {Mat3::Identity(), Vec3::Zero()}};
  s.posed_joints = {Vec3::Zero(), Vec3(0, 5, 0)};
  s.validate();
  Vec3 delta(0.01, 0.02, -0.01);
  Vec3 x_v = s.posed_joints[0] + delta;
  Vec3 want = s.canonical_joints[0] + R.transpose() * delta;
  CHECK((canonical_init(x_v, s) - want).norm() < 1e-12);
}

TEST_CASE("canonical_init inverts the one-hot forward blend") {
  SkeletonFrame s = chain_skeleton(4, 0.3, {0.5, 0.1, -0.4, 0.3});
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni(-0.05, 0.05);
  for (int b = 0; b < 4; ++b) {
    // Points near posed joint b stay assigned to b under the nearest rule.
    Vec3 x_c = s.canonical_joints[static_cast<size_t>(b)] +
               Vec3(uni(rng), uni(rng), uni(rng));
    Vec3 x_v = lbs_forward(SkinningWeights::one_hot(4, b), s, x_c);
    if (nearest_joint_onehot(x_v, s).w[b] != 1.0) continue;
    CHECK((canonical_init(x_v, s) - x_c).norm() < 1e-6);
  }
}

TEST_CASE("broyden trivial cases") {
  SkeletonFrame id = identity_chain(3);
  WeightField f = smooth_chain_weights(id);
  Vec3 x(0.2, 0.1, -0.3);
  BroydenResult r = broyden_inverse_lbs(x, f, id, Vec3::Zero());
  CHECK(r.converged);
  CHECK((r.x_c - x).norm() < 1e-5);

  SkeletonFrame t = translated_bone(Vec3(0.3, -0.1, 0.2));
  WeightField one = [](const Vec3&) { return SkinningWeights::one_hot(1, 0); };
  BroydenResult rt = broyden_inverse_lbs(Vec3(1, 1, 1), one, t, Vec3::Zero());
  CHECK(rt.converged);
  CHECK((rt.x_c - (Vec3(1, 1, 1) - Vec3(0.3, -0.1, 0.2))).norm() < 1e-5);
}

TEST_CASE("broyden recovers forward-map generator points on a 4-bone chain") {
  SkeletonFrame s = chain_skeleton(4, 0.3, {0.5, -0.3, 0.4, 0.25});
  WeightField f = smooth_chain_weights(s);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> uni(-0.15, 0.15);
  int ok = 0;
  const int trials = 300;
  for (int i = 0; i < trials; ++i) {
    int b = static_cast<int>(rng() % 4);
    Vec3 x_c = s.canonical_joints[static_cast<size_t>(b)] +
               Vec3(uni(rng), uni(rng), uni(rng));
    Vec3 x_v = lbs_forward(f(x_c), s, x_c);
    BroydenResult r =
        broyden_inverse_lbs(x_v, f, s, canonical_init(x_v, s), 1e-7, 50);
    if (r.converged && (r.x_c - x_c).norm() < 1e-4) ++ok;
  }
  CHECK(ok >= trials * 99 / 100);
}

TEST_CASE("sample_bone_points: midpoints, pairing, determinism, spread") {
  SkeletonFrame s = chain_skeleton(3, 0.4, {0.3, -0.2, 0.5});

  // Radius 0 with one point per segment lands on exact midpoints.
  std::vector<Vec3> mids = sample_bone_points(s, false, 2, 0.0, 9);
  for (const Vec3& m : mids) {
    double best = 1e9;
    for (int b = 1; b < 3; ++b) {
      Vec3 mid = 0.5 * (s.canonical_joints[static_cast<size_t>(b)] +
                        s.canonical_joints[static_cast<size_t>(b - 1)]);
      best = std::min(best, (m - mid).norm());
    }
    CHECK(best < 1e-12);
  }

  // Paired seeds: posed sample = B_b(canonical sample).
  const int P = 64;
  double radius = 0.02;
  std::vector<Vec3> canon = sample_bone_points(s, false, P, radius, 42);
  std::vector<Vec3> posed = sample_bone_points(s, true, P, radius, 42);
  REQUIRE(canon.size() == posed.size());
  for (size_t i = 0; i < canon.size(); ++i) {
    double best = 1e9;
    for (int b = 0; b < 3; ++b)
      best = std::min(best,
                      (posed[i] - s.bone_transforms[static_cast<size_t>(b)].apply(
                                      canon[i]))
                          .norm());
    CHECK(best < 1e-9);
  }

  // Determinism is bitwise.
  std::vector<Vec3> again = sample_bone_points(s, false, P, radius, 42);
  for (size_t i = 0; i < canon.size(); ++i)
    CHECK(canon[i] == again[i]);

  // Monte-Carlo spread: mean distance to the nearest segment <= 2 radius.
  SkeletonFrame two = chain_skeleton(2, 0.4, {});
  std::vector<Vec3> cloud = sample_bone_points(two, false, 1000, 0.03, 7);
  double mean = 0.0;
  for (const Vec3& p : cloud) {
    Vec3 a = two.canonical_joints[1], bq = two.canonical_joints[0];
    Vec3 ab = bq - a;
    double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
    mean += (p - (a + t * ab)).norm();
  }
  CHECK(mean / 1000.0 <= 2.0 * 0.03);
}

TEST_CASE("single-joint skeleton samples gaussians around the joint") {
  SkeletonFrame s = translated_bone(Vec3(1, 2, 3));
  std::vector<Vec3> pts = sample_bone_points(s, false, 32, 0.05, 3);
  CHECK(pts.size() == 32);
  for (const Vec3& p : pts) CHECK((p - s.canonical_joints[0]).norm() < 1.0);
}

TEST_CASE("rigid transform compose/inverse closure") {
  RigidTransform a{rot_z(0.4), Vec3(1, 2, 3)};
  RigidTransform b{rot_z(-1.1), Vec3(-0.5, 0.2, 0.9)};
  Vec3 x(0.3, -0.7, 0.1);
  CHECK((a.compose(b).apply(x) - a.apply(b.apply(x))).norm() < 1e-12);
  CHECK((a.inverse().apply(a.apply(x)) - x).norm() < 1e-12);
  CHECK(a.compose(a.inverse()).rotation.isApprox(Mat3::Identity(), 1e-12));
}

TEST_CASE("skeleton JSON round trip is exact") {
  SkeletonFrame s = chain_skeleton(4, 0.3, {0.2, -0.6, 0.1, 0.9});
  SkeletonFrame r = SkeletonFrame::from_json(s.to_json());
  CHECK(r.n_b == s.n_b);
  CHECK(r.parent == s.parent);
  for (int b = 0; b < 4; ++b) {
    CHECK(r.canonical_joints[static_cast<size_t>(b)] ==
          s.canonical_joints[static_cast<size_t>(b)]);
    CHECK(r.posed_joints[static_cast<size_t>(b)] ==
          s.posed_joints[static_cast<size_t>(b)]);
    CHECK(r.bone_transforms[static_cast<size_t>(b)].rotation ==
          s.bone_transforms[static_cast<size_t>(b)].rotation);
    CHECK(r.bone_transforms[static_cast<size_t>(b)].translation ==
          s.bone_transforms[static_cast<size_t>(b)].translation);
  }
}

TEST_CASE("skeleton invariant: B_b maps canonical joint to posed joint") {
  SkeletonFrame s = chain_skeleton(6, 0.25, {0.1, 0.2, -0.3, 0.5, -0.1, 0.4});
  CHECK_NOTHROW(s.validate());
  SkeletonFrame broken = s;
  broken.posed_joints[2] += Vec3(0.1, 0, 0);
  CHECK_THROWS_AS(broken.validate(), InvalidInput);
}

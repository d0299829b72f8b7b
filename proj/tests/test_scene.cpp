// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "tfs/losses.hpp"
#include "tfs/scene.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

using namespace tfs;
using namespace tfs::test;
namespace fs = std::filesystem;

namespace {

SceneConfig tiny_config() {
  SceneConfig cfg;
  cfg.n_bones = 3;
  cfg.frames = 3;
  cfg.cams = 1;
  cfg.width = 32;
  cfg.height = 32;  // focal is scaled with width by make_cameras
  return cfg;
}

// Distance from p to segment [a, b].
double seg_dist(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

TEST_CASE("scene skeleton topology and defaults") {
  SceneConfig cfg;  // defaults: 4 bones
  CHECK(cfg.frames >= 45);
  CHECK(cfg.frames <= 50);
  AnalyticScene scene = build_scene(cfg);
  const SkeletonFrame& d = scene.canonical_deformable();
  CHECK(d.n_b == 4);
  CHECK(d.parent == std::vector<int>{-1, 0, 1, 2});
  CHECK(scene.canonical_rigid().n_b == 1);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("analytic weights: joint equidistance, normalization, rigid one-hot") {
  AnalyticScene scene = build_scene(SceneConfig{});
  const SkeletonFrame& d = scene.canonical_deformable();
  // Canonical joint 2 is shared by the segments on either side.
  SkinningWeights at_joint = scene.analytic_weights(d.canonical_joints[2]);
  CHECK(at_joint.is_valid());
  double big1 = 0.0, big2 = 0.0;
  for (int b = 0; b < d.n_b; ++b) {
    double w = at_joint.w[b];
    if (w > big1) {
      big2 = big1;
      big1 = w;
    } else if (w > big2) {
      big2 = w;
    }
  }
  CHECK(big1 == doctest::Approx(0.5));
  CHECK(big2 == doctest::Approx(0.5));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    Vec3 p(uni(rng), uni(rng), uni(rng));
    SkinningWeights w = scene.analytic_weights(p);
    CHECK(w.w.sum() == doctest::Approx(1.0));
    CHECK(w.w.minCoeff() >= 0.0);
  }
  CHECK(scene.analytic_weights_rigid(Vec3(1, 2, 3)).w[0] == 1.0);
}

TEST_CASE("analytic SDFs are exact capsule and box distances") {
  SceneConfig cfg;
  AnalyticScene scene = build_scene(cfg);
  const SkeletonFrame& d = scene.canonical_deformable();

  // On the chain axis: depth is the capsule radius.
  Vec3 mid = 0.5 * (d.canonical_joints[0] + d.canonical_joints[1]);
  CHECK(scene.sdf_deformable(mid) == doctest::Approx(-cfg.capsule_radius));
  // At radius + 0.1 off the axis: positive 0.1.
  Vec3 off = mid + Vec3(cfg.capsule_radius + 0.1, 0, 0);
  CHECK(scene.sdf_deformable(off) == doctest::Approx(0.1));
  // Brute-force capsule union oracle at random points.
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> uni(-0.8, 0.8);
  for (int i = 0; i < 200; ++i) {
    Vec3 p(uni(rng), uni(rng), uni(rng));
    double best = 1e9;
    for (int b = 1; b < d.n_b; ++b)
      best = std::min(best, seg_dist(p, d.canonical_joints[static_cast<size_t>(b - 1)],
                                     d.canonical_joints[static_cast<size_t>(b)]));
    if (best - cfg.capsule_radius > 0)  // outside: exact distance
      CHECK(scene.sdf_deformable(p) ==
            doctest::Approx(best - cfg.capsule_radius).epsilon(1e-9));
  }

  // Box: center depth is the smallest half extent; outside along +x exact.
  CHECK(scene.sdf_rigid(cfg.box_center) == doctest::Approx(-cfg.box_half.minCoeff()));
  Vec3 bx = cfg.box_center + Vec3(cfg.box_half.x() + 0.2, 0, 0);
  CHECK(scene.sdf_rigid(bx) == doctest::Approx(0.2));
}

TEST_CASE("pose sequence: amplitude zero freezes the canonical pose") {
  SceneConfig cfg = tiny_config();
  cfg.amplitude = 0.0;
  AnalyticScene scene = build_scene(cfg);
  std::vector<FramePose> poses = pose_sequence(scene, 4);
  REQUIRE(poses.size() == 4);
  for (const FramePose& p : poses) {
    CHECK_NOTHROW(p.deformable.validate());
    CHECK_NOTHROW(p.rigid.validate());
    for (int b = 0; b < p.deformable.n_b; ++b)
      CHECK((p.deformable.posed_joints[static_cast<size_t>(b)] -
             p.deformable.canonical_joints[static_cast<size_t>(b)])
                .norm() < 1e-12);
  }
}

TEST_CASE("pose sequence: handover path overlaps the chain workspace") {
  SceneConfig cfg;  // defaults
  AnalyticScene scene = build_scene(cfg);
  std::vector<FramePose> poses = pose_sequence(scene, 50);
  REQUIRE(poses.size() == 50);
  int overlaps = 0;
  for (const FramePose& p : poses) {
    CHECK_NOTHROW(p.deformable.validate());
    CHECK_NOTHROW(p.rigid.validate());
    Vec3 dlo = Vec3::Constant(1e9), dhi = Vec3::Constant(-1e9);
    for (const Vec3& j : p.deformable.posed_joints) {
      dlo = dlo.cwiseMin(j - Vec3::Constant(cfg.capsule_radius));
      dhi = dhi.cwiseMax(j + Vec3::Constant(cfg.capsule_radius));
    }
    Vec3 c = p.rigid.bone_transforms[0].apply(cfg.box_center);
    Vec3 rlo = c - 1.8 * cfg.box_half, rhi = c + 1.8 * cfg.box_half;
    bool hit = (dlo.array() <= rhi.array()).all() &&
               (rlo.array() <= dhi.array()).all();
    if (hit) ++overlaps;
  }
  CHECK(overlaps >= 15);  // >= 30% of frames
}

TEST_CASE("posed sdf matches the canonical sdf at identity pose") {
  SceneConfig cfg = tiny_config();
  AnalyticScene scene = build_scene(cfg);
  SkeletonFrame id = scene.canonical_deformable();  // canonical == posed
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(-0.6, 0.6);
  double r = cfg.capsule_radius;
  for (int i = 0; i < 40; ++i) {
    Vec3 p(uni(rng), uni(rng), uni(rng));
    double exact = scene.sdf_deformable(p);
    double got = scene.sdf_posed(Entity::Deformable, id, p);
    if (exact <= r) {
      // Near and inside the surface the inverse-LBS evaluation is exact.
      CHECK(got == doctest::Approx(exact).epsilon(1e-6));
    } else {
      // Far field uses a conservative capsule proxy: never larger than the
      // true distance, short by at most half a capsule radius.
      CHECK(got <= exact + 1e-9);
      CHECK(got >= exact - 0.5 * r - 1e-9);
    }
  }
}

TEST_CASE("ground-truth render: empty view, occlusion label, mask consistency") {
  SceneConfig cfg = tiny_config();
  AnalyticScene scene = build_scene(cfg);
  std::vector<FramePose> poses = pose_sequence(scene, 3);
  std::vector<Camera> cams = make_cameras(cfg);
  REQUIRE(static_cast<int>(cams.size()) == cfg.cams);

  // Camera aimed at empty space renders pure background.
  Camera away = cams[0];
  away.extrinsics.translation += Vec3(0, 0, -50.0);
  DatasetFrame empty = render_ground_truth(scene, poses[0], away);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      CHECK(empty.mask.at(x, y, 0) == kMaskBackground);

  // Mask label agrees with an independent fixed-step double ray cast.
  DatasetFrame frame = render_ground_truth(scene, poses[1], cams[0]);
  std::mt19937_64 rng(11);
  int checked = 0, mismatches = 0;
  for (int trial = 0; trial < 400; ++trial) {
    int px = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.width));
    int py = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.height));
    Vec3 o = cams[0].center();
    Vec3 dir = cams[0].ray_direction(px + 0.5, py + 0.5);
    double tn, tf;
    if (!ray_aabb(o, dir, scene.bounds(), tn, tf)) {
      CHECK(frame.mask.at(px, py, 0) == kMaskBackground);
      continue;
    }
    double t_d = -1.0, t_nd = -1.0;
    Vec3 warm_d, warm_nd;
    bool have_warm_d = false, have_warm_nd = false;
    for (double t = std::max(tn, 0.0); t <= tf; t += 2e-3) {
      Vec3 p = o + t * dir;
      if (t_d < 0) {
        Vec3 w = have_warm_d ? warm_d : p;
        double s = scene.sdf_posed(Entity::Deformable, poses[1].deformable, p, &w);
        warm_d = w;
        have_warm_d = true;
        if (s < 0) t_d = t;
      }
      if (t_nd < 0) {
        Vec3 w = have_warm_nd ? warm_nd : p;
        double s = scene.sdf_posed(Entity::NonDeformable, poses[1].rigid, p, &w);
        warm_nd = w;
        have_warm_nd = true;
        if (s < 0) t_nd = t;
      }
      if (t_d >= 0 && t_nd >= 0) break;
    }
    unsigned char want = kMaskBackground;
    if (t_d >= 0 && (t_nd < 0 || t_d <= t_nd)) want = kMaskDeformable;
    else if (t_nd >= 0) want = kMaskNonDeformable;
    // Skip grazing-ambiguity pixels where both hits are nearly simultaneous.
    if (t_d >= 0 && t_nd >= 0 && std::abs(t_d - t_nd) < 0.02) continue;
    ++checked;
    if (frame.mask.at(px, py, 0) != want) ++mismatches;
  }
  CHECK(checked > 200);
  CHECK(mismatches <= checked / 50);  // allow 2% edge-pixel disagreement
}

TEST_CASE("dataset export, reload, determinism, and refusal") {
  SceneConfig cfg = tiny_config();
  AnalyticScene scene = build_scene(cfg);
  std::vector<FramePose> poses = pose_sequence(scene, cfg.frames);
  std::vector<Camera> cams = make_cameras(cfg);
  std::string dir = scratch_dir("scene_ds");
  std::string ds1 = dir + "/a", ds2 = dir + "/b";
  export_dataset(scene, poses, cams, ds1, 5, false, 16);
  export_dataset(scene, poses, cams, ds2, 5, false, 16);

  // Layout: meta + per-frame files + gt meshes.
  CHECK(fs::exists(ds1 + "/meta.json"));
  for (int t = 0; t < cfg.frames; ++t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/frames/%04d", t);
    CHECK(fs::exists(ds1 + buf + "/rgb_0.png"));
    CHECK(fs::exists(ds1 + buf + "/mask_0.png"));
    CHECK(fs::exists(ds1 + buf + "/skel.json"));
  }
  Dataset probe = load_dataset(ds1);
  CHECK(fs::exists(probe.gt_canonical_path(Entity::Deformable)));
  CHECK(fs::exists(probe.gt_canonical_path(Entity::NonDeformable)));
  CHECK(fs::exists(probe.gt_posed_path(0, Entity::Deformable)));
  CHECK(fs::exists(probe.gt_posed_path(0, Entity::NonDeformable)));

  // Bitwise determinism across runs.
  CHECK(dataset_hash(ds1) == dataset_hash(ds2));

  // Round trip reproduces config and skeletons bitwise.
  Dataset loaded = load_dataset(ds1);
  CHECK(loaded.frames() == cfg.frames);
  CHECK(loaded.scene.n_bones == cfg.n_bones);
  CHECK(static_cast<int>(loaded.cameras.size()) == cfg.cams);
  for (int t = 0; t < cfg.frames; ++t) {
    const SkeletonFrame& got = loaded.poses[static_cast<size_t>(t)].deformable;
    const SkeletonFrame& want = poses[static_cast<size_t>(t)].deformable;
    for (int b = 0; b < want.n_b; ++b) {
      CHECK(got.posed_joints[static_cast<size_t>(b)] ==
            want.posed_joints[static_cast<size_t>(b)]);
      CHECK(got.bone_transforms[static_cast<size_t>(b)].rotation ==
            want.bone_transforms[static_cast<size_t>(b)].rotation);
    }
  }

  // Posed mesh equals analytic LBS of the canonical mesh.
  Mesh canon = read_obj(loaded.gt_canonical_path(Entity::Deformable));
  Mesh posed1 = read_obj(loaded.gt_posed_path(1, Entity::Deformable));
  REQUIRE(canon.vertices.size() == posed1.vertices.size());
  const SkeletonFrame& skel1 = loaded.poses[1].deformable;
  double worst = 0.0;
  for (size_t i = 0; i < canon.vertices.size(); ++i) {
    Vec3 v = lbs_forward(scene.analytic_weights(canon.vertices[i]), skel1,
                         canon.vertices[i]);
    worst = std::max(worst, (v - posed1.vertices[i]).norm());
  }
  CHECK(worst < 1e-5);  // OBJ text round-trip precision

  // Non-empty directory refused without overwrite, accepted with it.
  CHECK_THROWS_AS(export_dataset(scene, poses, cams, ds1, 5, false, 16),
                  InvalidInput);
  CHECK_NOTHROW(export_dataset(scene, poses, cams, ds1, 5, true, 16));

  fs::remove_all(dir);
}

TEST_CASE("scene config json round trip") {
  SceneConfig cfg = tiny_config();
  cfg.amplitude = 0.37;
  SceneConfig back = SceneConfig::from_json(cfg.to_json());
  CHECK(back.n_bones == cfg.n_bones);
  CHECK(back.amplitude == cfg.amplitude);
  CHECK(back.box_half == cfg.box_half);
  CHECK(back.focal == cfg.focal);
}

// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "tfs/evaluation.hpp"
#include "tfs/plot.hpp"
#include "tfs/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace tfs;
using namespace tfs::test;
namespace fs = std::filesystem;

namespace {

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.rays_per_entity = 8;
  cfg.samples_per_ray = 8;
  cfg.steps = 3;
  cfg.checkpoint_every = 2;
  cfg.inn_hidden = 24;
  cfg.inn_proj = 12;
  cfg.snet_hidden = 32;
  cfg.sdf_hidden = 32;
  cfg.sdf_feat = 8;
  cfg.rgb_hidden = 32;
  cfg.bone_samples = 16;
  cfg.chunk_points = 256;
  return cfg;
}

// One shared tiny dataset for the whole suite.
const Dataset& tiny_dataset() {
  static std::string root = [] {
    SceneConfig sc;
    sc.n_bones = 3;
    sc.frames = 3;
    sc.cams = 1;
    sc.width = 32;
    sc.height = 32;
    AnalyticScene scene = build_scene(sc);
    std::string dir = scratch_dir("train_ds");
    export_dataset(scene, pose_sequence(scene, sc.frames), make_cameras(sc), dir,
                   3, true, 16);
    return dir;
  }();
  static Dataset ds = load_dataset(root);
  return ds;
}

bool same_tensors(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) return false;
    if (t.rows() != it->second.rows() || t.cols() != it->second.cols()) return false;
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (std::memcmp(&t(i), &it->second(i), sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("train config validation and json round trip") {
  TrainConfig cfg = quick_config();
  CHECK_NOTHROW(cfg.validate());
  TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.rays_per_entity == 8);
  CHECK(back.backend == "inn");

  TrainConfig bad = cfg;
  bad.lr = -1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.backend = "newton";
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.samples_per_ray = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("scene model assembly: shapes, beta, pose vector, parameter names") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  SceneModel model = SceneModel::build(cfg, ds);
  CHECK(model.beta() == doctest::Approx(cfg.beta_init));
  CHECK_FALSE(model.share_heads());
  CHECK(model.head_of(Entity::Deformable).config().n_b == 3);
  CHECK(model.head_of(Entity::NonDeformable).config().n_b == 1);

  // Radiance conditioning: both entities' posed joints.
  VecX pv = model.pose_vector(ds.poses[0]);
  CHECK(pv.size() == 3 * (3 + 1));

  ParamList params = model.params();
  CHECK(param_count(params) > 0);
  bool has_d = false, has_nd = false, has_rgb = false, has_beta = false;
  for (const ParamRef& p : params) {
    if (p.name.rfind("d.", 0) == 0) has_d = true;
    if (p.name.rfind("nd.", 0) == 0) has_nd = true;
    if (p.name.rfind("rgb", 0) == 0) has_rgb = true;
    if (p.name == "beta") has_beta = true;
  }
  CHECK(has_d);
  CHECK(has_nd);
  CHECK(has_rgb);
  CHECK(has_beta);
}

TEST_CASE("per-entity sdf gradients stay in their own head") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  SceneModel model = SceneModel::build(cfg, ds);
  zero_grads(model.params());

  MatX x = MatX::Random(3, 5) * 0.2;
  MatX sdf, feat, grad;
  SdfEvalCaches caches;
  model.sdf_forward(Entity::Deformable, x, sdf, feat, grad, &caches);
  model.sdf_backward(Entity::Deformable, caches, MatX::Ones(1, 5),
                     MatX::Zero(feat.rows(), 5), MatX::Zero(3, 5));

  double nd_grad = 0.0, d_grad = 0.0;
  for (const ParamRef& p : model.params()) {
    if (p.name.rfind("nd.sdf", 0) == 0) nd_grad += p.grad->cwiseAbs().sum();
    if (p.name.rfind("d.sdf", 0) == 0) d_grad += p.grad->cwiseAbs().sum();
  }
  CHECK(d_grad > 0.0);
  CHECK(nd_grad == 0.0);

  // Point value agrees with the batched path.
  CHECK(model.sdf_value(Entity::Deformable, Vec3(x.col(2))) ==
        doctest::Approx(sdf(0, 2)));
}

TEST_CASE("shared-head ablation uses one sdf head for both entities") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.share_heads = true;
  SceneModel model = SceneModel::build(cfg, ds);
  CHECK(model.share_heads());
  CHECK(&model.head_of(Entity::Deformable) == &model.head_of(Entity::NonDeformable));
  for (const ParamRef& p : model.params())
    CHECK(p.name.rfind("nd.sdf", 0) != 0);

  // Rigid entity evaluation pads its joint block to the shared width.
  MatX x = MatX::Random(3, 4) * 0.2;
  MatX sdf, feat, grad;
  SdfEvalCaches caches;
  model.sdf_forward(Entity::NonDeformable, x, sdf, feat, grad, &caches);
  CHECK(caches.pad_rows > 0);
  CHECK(sdf.allFinite());
  MatX gx = model.sdf_backward(Entity::NonDeformable, caches, MatX::Ones(1, 4),
                               MatX::Zero(feat.rows(), 4), MatX::Zero(3, 4));
  CHECK(gx.rows() == 3);
  CHECK(gx.allFinite());
}

TEST_CASE("checkpoint round trip restores the model bitwise") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  SceneModel model = SceneModel::build(cfg, ds);
  Checkpoint ck = model.to_checkpoint({{"note", "probe"}});
  CHECK(ck.metadata.count("train_config") == 1);
  SceneModel re = SceneModel::load(ck, ds);
  Checkpoint ck2 = re.to_checkpoint({{"note", "probe"}});
  CHECK(same_tensors(ck, ck2));
}

TEST_CASE("zero-step training writes the initial checkpoint and log") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.steps = 0;
  std::string dir = scratch_dir("train_zero");
  TrainResult res = train(cfg, ds, dir);
  CHECK(res.steps_done == 0);
  CHECK_FALSE(res.nan_abort);
  CHECK(fs::exists(dir + "/train_log.csv"));
  CHECK(fs::exists(dir + "/checkpoints/step_000000.ckpt"));
  CHECK(fs::exists(dir + "/checkpoints/final.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic per seed and descends on rgb") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.steps = 3;
  std::string d1 = scratch_dir("train_a"), d2 = scratch_dir("train_b");
  SceneModel m1, m2;
  TrainResult r1 = train(cfg, ds, d1, &m1);
  TrainResult r2 = train(cfg, ds, d2, &m2);
  REQUIRE(r1.log.size() == 3);
  REQUIRE(r2.log.size() == 3);
  for (size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].total == r2.log[i].total);
    CHECK(r1.log[i].l_rgb == r2.log[i].l_rgb);
    CHECK(std::isfinite(r1.log[i].total));
  }
  Checkpoint c1 = m1.to_checkpoint({});
  Checkpoint c2 = m2.to_checkpoint({});
  CHECK(same_tensors(c1, c2));

  // Different seed changes the trajectory.
  TrainConfig other = cfg;
  other.seed = 99;
  std::string d3 = scratch_dir("train_c");
  TrainResult r3 = train(other, ds, d3);
  CHECK(r3.log[2].total != r1.log[2].total);

  // Checkpoint cadence: steps 0 and 2, plus final.
  CHECK(fs::exists(d1 + "/checkpoints/step_000000.ckpt"));
  CHECK(fs::exists(d1 + "/checkpoints/step_000002.ckpt"));
  CHECK(fs::exists(d1 + "/checkpoints/final.ckpt"));
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);
}

TEST_CASE("broyden backend trains without deformer losses") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.backend = "broyden";
  cfg.steps = 2;
  std::string dir = scratch_dir("train_broyden");
  TrainResult res = train(cfg, ds, dir);
  REQUIRE(res.log.size() == 2);
  for (const LossReport& r : res.log) {
    CHECK(std::isfinite(r.total));
    CHECK(r.l_pose == 0.0);
    CHECK(r.l_inn == 0.0);
    CHECK(r.l_consis == 0.0);
    CHECK(r.l_w > 0.0);  // skinning supervision remains
  }
  fs::remove_all(dir);
}

TEST_CASE("untrained heads extract the initialization sphere") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  SceneModel model = SceneModel::build(cfg, ds);
  Mesh m = extract_canonical_mesh(model, Entity::NonDeformable, 48);
  REQUIRE_FALSE(m.empty());
  Vec3 c = model.entity(Entity::NonDeformable).canonical.canonical_centroid();
  double r0 = cfg.sphere_radius;
  double mean = 0.0;
  for (const Vec3& v : m.vertices) mean += (v - c).norm();
  mean /= static_cast<double>(m.vertices.size());
  double var = 0.0;
  for (const Vec3& v : m.vertices) var += std::pow((v - c).norm() - mean, 2);
  double stddev = std::sqrt(var / static_cast<double>(m.vertices.size()));
  CHECK(std::abs(mean - r0) < 0.05 * r0);
  CHECK(stddev < 0.05 * r0);
}

TEST_CASE("pose_mesh: identity leaves vertices, one bone moves rigidly") {
  Mesh sphere = marching_cubes(
      [](const Vec3& p) { return p.norm() - 0.2; }, Vec3::Constant(-0.4),
      Vec3::Constant(0.4), 12);
  SkeletonFrame id = identity_chain(3);
  SkinningNet snet(3, 16, 5);
  Mesh posed = pose_mesh(sphere, snet, id);
  REQUIRE(posed.vertices.size() == sphere.vertices.size());
  CHECK(posed.faces == sphere.faces);
  CHECK(posed.vertex_weights.size() == posed.vertices.size());
  for (size_t i = 0; i < sphere.vertices.size(); ++i)
    CHECK((posed.vertices[i] - sphere.vertices[i]).norm() < 1e-12);

  SkeletonFrame one;
  one.n_b = 1;
  one.parent = {-1};
  one.canonical_joints = {Vec3::Zero()};
  one.bone_transforms = {{rot_z(0.4), Vec3(0.1, 0.2, -0.3)}};
  one.posed_joints = {Vec3(0.1, 0.2, -0.3)};
  one.validate();
  SkinningNet snet1(1, 8, 6);
  Mesh rigid = pose_mesh(sphere, snet1, one);
  for (size_t i = 0; i < sphere.vertices.size(); ++i)
    CHECK((rigid.vertices[i] - one.bone_transforms[0].apply(sphere.vertices[i]))
              .norm() < 1e-12);
}

TEST_CASE("evaluate_run emits three groups and records skipped frames") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  SceneModel model = SceneModel::build(cfg, ds);

  EvalOptions opts;
  opts.frames = {0, 1};
  opts.mesh_res = 24;
  opts.n_points = 500;
  opts.seed = 3;
  opts.write_meshes = false;
  std::string dir = scratch_dir("eval_run");
  EvalResult res = evaluate_run(model, ds, opts, dir);
  CHECK(res.skipped_frames.empty());
  CHECK(res.aggregate.count("scene") == 1);
  CHECK(res.aggregate.count("deformable") == 1);
  CHECK(res.aggregate.count("non-deformable") == 1);
  CHECK(fs::exists(dir + "/metrics.csv"));
  CHECK(fs::exists(dir + "/metrics.json"));
  std::ifstream js(dir + "/metrics.json");
  nlohmann::json j = nlohmann::json::parse(js);
  CHECK(j.contains("chamfer_convention"));
  CHECK(j["groups"].contains("scene"));

  // Remove one posed gt mesh: that frame is skipped and recorded.
  std::string victim = ds.gt_posed_path(1, Entity::Deformable);
  std::string backup = victim + ".bak";
  fs::rename(victim, backup);
  std::string dir2 = scratch_dir("eval_skip");
  EvalResult res2 = evaluate_run(model, ds, opts, dir2);
  fs::rename(backup, victim);
  REQUIRE(res2.skipped_frames.size() == 1);
  CHECK(res2.skipped_frames[0] == 1);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("num_workers respects the environment bound") {
  CHECK(num_workers() >= 1);
}

TEST_CASE("plots: per-term training curves and bench chart") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.steps = 2;
  std::string dir = scratch_dir("plot_run");
  (void)train(cfg, ds, dir);
  std::vector<std::string> written = plot_train_log(dir + "/train_log.csv", dir);
  CHECK(written.size() >= 7);  // six terms + total
  bool total = false;
  for (const std::string& p : written) {
    CHECK(fs::exists(p));
    if (p.find("total") != std::string::npos) total = true;
    std::ifstream f(p);
    std::string head(5, '\0');
    f.read(head.data(), 5);
    CHECK(head == "<svg ");
  }
  CHECK(total);

  // Bench chart from a handwritten csv.
  std::string bcsv = dir + "/bench.csv";
  {
    std::ofstream f(bcsv);
    f << "backend,step,wall_s,chamfer_cm\n";
    f << "inn,0,0.5,9.0\ninn,2,1.0,4.0\nbroyden,0,1.2,9.5\nbroyden,2,2.4,5.0\n";
  }
  std::string svg = plot_bench(bcsv, dir + "/bench.svg");
  CHECK(fs::exists(svg));

  // Degenerate inputs are rejected.
  Series empty_series;
  empty_series.label = "x";
  CHECK_THROWS_AS(svg_line_chart("t", "x", "y", {empty_series}), InvalidInput);
  fs::remove_all(dir);
}

TEST_CASE("backend benchmark produces points for both backends") {
  const Dataset& ds = tiny_dataset();
  TrainConfig cfg = quick_config();
  cfg.steps = 2;
  cfg.checkpoint_every = 1;
  std::string dir = scratch_dir("bench_run");
  BenchResult res = bench_backends(cfg, ds, 60.0, dir, 16, 200);
  CHECK(res.step_time_inn > 0.0);
  CHECK(res.step_time_broyden > 0.0);
  bool inn = false, broy = false;
  for (const BenchPoint& p : res.points) {
    if (p.backend == "inn") inn = true;
    if (p.backend == "broyden") broy = true;
    CHECK(p.wall_s >= 0.0);
  }
  CHECK(inn);
  CHECK(broy);
  CHECK(fs::exists(dir + "/bench.csv"));
  fs::remove_all(dir);
}

// SPDX-License-Identifier: Apache-2.0

#include "tfs/scene.hpp"

#include "tfs/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;

namespace tfs {

namespace {

double capsule_sdf(const Vec3& x, const Vec3& a, const Vec3& b, double r) {
  Vec3 ab = b - a;
  double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (x - (a + t * ab)).norm() - r;
}

double box_sdf(const Vec3& x, const Vec3& center, const Vec3& half) {
  Vec3 q = (x - center).cwiseAbs() - half;
  Vec3 qp = q.cwiseMax(0.0);
  return qp.norm() + std::min(q.maxCoeff(), 0.0);
}

Mat3 rot_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return m;
}

Mat3 rot_y(double a) {
  Mat3 m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return m;
}

// Canonical segment (joint -> parent joint) of bone b; root collapses to a point.
void bone_segment(const SkeletonFrame& skel, int b, Vec3& a, Vec3& e) {
  a = skel.canonical_joints[static_cast<size_t>(b)];
  int p = skel.parent[static_cast<size_t>(b)];
  e = p >= 0 ? skel.canonical_joints[static_cast<size_t>(p)] : a;
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

std::string frame_dir_name(int t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", t);
  return buf;
}

}  // namespace

nlohmann::json SceneConfig::to_json() const {
  return nlohmann::json{
      {"n_bones", n_bones},
      {"bone_length", bone_length},
      {"capsule_radius", capsule_radius},
      {"box_half", {box_half[0], box_half[1], box_half[2]}},
      {"box_center", {box_center[0], box_center[1], box_center[2]}},
      {"color_d", {color_d[0], color_d[1], color_d[2]}},
      {"color_nd", {color_nd[0], color_nd[1], color_nd[2]}},
      {"amplitude", amplitude},
      {"frames", frames},
      {"cams", cams},
      {"width", width},
      {"height", height},
      {"focal", focal}};
}

SceneConfig SceneConfig::from_json(const nlohmann::json& j) {
  SceneConfig c;
  auto vec = [&](const char* key, Vec3 dflt) {
    if (!j.contains(key)) return dflt;
    auto a = j.at(key).get<std::vector<double>>();
    return Vec3(a.at(0), a.at(1), a.at(2));
  };
  c.n_bones = j.value("n_bones", c.n_bones);
  c.bone_length = j.value("bone_length", c.bone_length);
  c.capsule_radius = j.value("capsule_radius", c.capsule_radius);
  c.box_half = vec("box_half", c.box_half);
  c.box_center = vec("box_center", c.box_center);
  c.color_d = vec("color_d", c.color_d);
  c.color_nd = vec("color_nd", c.color_nd);
  c.amplitude = j.value("amplitude", c.amplitude);
  c.frames = j.value("frames", c.frames);
  c.cams = j.value("cams", c.cams);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.focal = j.value("focal", c.focal);
  if (c.n_bones < 1 || c.frames < 1 || c.cams < 1 || c.width < 8 || c.height < 8 ||
      c.bone_length <= 0 || c.capsule_radius <= 0)
    throw InvalidInput("SceneConfig: invalid values");
  return c;
}

AnalyticScene::AnalyticScene(const SceneConfig& cfg) : cfg_(cfg) {
  const int n = cfg.n_bones;
  canon_d_.n_b = n;
  canon_d_.parent.resize(static_cast<size_t>(n));
  double y0 = -0.5 * (n - 1) * cfg.bone_length;
  for (int b = 0; b < n; ++b) {
    canon_d_.parent[static_cast<size_t>(b)] = b - 1;
    canon_d_.canonical_joints.push_back(Vec3(0.0, y0 + b * cfg.bone_length, 0.0));
  }
  canon_d_.posed_joints = canon_d_.canonical_joints;
  canon_d_.bone_transforms.assign(static_cast<size_t>(n), RigidTransform::identity());
  canon_d_.validate();

  canon_nd_.n_b = 1;
  canon_nd_.parent = {-1};
  canon_nd_.canonical_joints = {cfg.box_center};
  canon_nd_.posed_joints = {cfg.box_center};
  canon_nd_.bone_transforms = {RigidTransform::identity()};
  canon_nd_.validate();

  double reach = 0.5 * n * cfg.bone_length + cfg.capsule_radius + 0.1;
  double rigid_reach = cfg.box_center.norm() + cfg.box_half.norm() + 0.1;
  double r = std::max(reach, rigid_reach);
  bounds_.lo = Vec3::Constant(-r);
  bounds_.hi = Vec3::Constant(r);
}

AnalyticScene build_scene(const SceneConfig& cfg) { return AnalyticScene(cfg); }

double AnalyticScene::sdf_deformable(const Vec3& x) const {
  double d = std::numeric_limits<double>::infinity();
  Vec3 a, e;
  for (int b = 0; b < canon_d_.n_b; ++b) {
    bone_segment(canon_d_, b, a, e);
    d = std::min(d, capsule_sdf(x, a, e, cfg_.capsule_radius));
  }
  return d;
}

double AnalyticScene::sdf_rigid(const Vec3& x) const {
  return box_sdf(x, cfg_.box_center, cfg_.box_half);
}

SkinningWeights AnalyticScene::analytic_weights(const Vec3& x_c) const {
  const int n = canon_d_.n_b;
  SkinningWeights sw;
  sw.w = VecX::Zero(n);
  if (n == 1) {
    sw.w[0] = 1.0;
    return sw;
  }
  VecX dist(n);
  Vec3 a, e;
  for (int b = 0; b < n; ++b) {
    bone_segment(canon_d_, b, a, e);
    dist[b] = (x_c - (a + std::clamp((x_c - a).dot(e - a) /
                                         std::max((e - a).squaredNorm(), 1e-30),
                                     0.0, 1.0) *
                              (e - a)))
                  .norm();
  }
  int i0 = 0, i1 = 1;
  if (dist[1] < dist[0]) std::swap(i0, i1);
  for (int b = 2; b < n; ++b) {
    if (dist[b] < dist[i0]) { i1 = i0; i0 = b; }
    else if (dist[b] < dist[i1]) i1 = b;
  }
  constexpr double kEps = 1e-12;
  double w0 = 1.0 / (dist[i0] * dist[i0] + kEps);
  double w1 = 1.0 / (dist[i1] * dist[i1] + kEps);
  sw.w[i0] = w0 / (w0 + w1);
  sw.w[i1] = w1 / (w0 + w1);
  return sw;
}

double AnalyticScene::sdf_posed(Entity e, const SkeletonFrame& skel, const Vec3& x,
                                Vec3* warm_start) const {
  if (e == Entity::NonDeformable)
    return sdf_rigid(skel.bone_transforms[0].inverse().apply(x));

  // Conservative far-field distance from the posed capsule union; the LBS
  // surface bulges at most ~r/2 outside it at blended joints.
  const double r = cfg_.capsule_radius;
  double proxy = std::numeric_limits<double>::infinity();
  Vec3 a, s;
  for (int b = 0; b < skel.n_b; ++b) {
    bone_segment(skel, b, a, s);
    const RigidTransform& B = skel.bone_transforms[static_cast<size_t>(b)];
    proxy = std::min(proxy, capsule_sdf(x, B.apply(a), B.apply(s), r));
  }
  if (proxy > 1.5 * r) return proxy - 0.5 * r;

  Vec3 x0 = (warm_start && warm_start->allFinite() && warm_start->norm() < 1e6)
                ? *warm_start
                : canonical_init(x, skel);
  WeightField field = [this](const Vec3& p) { return analytic_weights(p); };
  BroydenResult res = broyden_inverse_lbs(x, field, skel, x0, 1e-7, 50);
  if (warm_start) *warm_start = res.x_c;
  return sdf_deformable(res.x_c);
}

std::vector<FramePose> pose_sequence(const AnalyticScene& scene, int T) {
  const SceneConfig& cfg = scene.config();
  const SkeletonFrame& canon = scene.canonical_deformable();
  std::vector<FramePose> out;
  out.reserve(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    double phase = 2.0 * std::numbers::pi * t / std::max(T, 1);

    FramePose fp;
    fp.deformable = canon;
    std::vector<RigidTransform>& B = fp.deformable.bone_transforms;
    B[0] = RigidTransform::identity();
    for (int b = 1; b < canon.n_b; ++b) {
      double theta = cfg.amplitude * std::sin(phase + b * std::numbers::pi / 3.0);
      Vec3 pivot = canon.canonical_joints[static_cast<size_t>(b - 1)];
      Mat3 r = rot_z(theta);
      RigidTransform local{r, pivot - r * pivot};
      B[static_cast<size_t>(b)] = B[static_cast<size_t>(b - 1)].compose(local);
    }
    for (int b = 0; b < canon.n_b; ++b)
      fp.deformable.posed_joints[static_cast<size_t>(b)] =
          B[static_cast<size_t>(b)].apply(canon.canonical_joints[static_cast<size_t>(b)]);
    fp.deformable.validate();

    // Rigid "handover": glide through the chain workspace and back while
    // spinning about the vertical axis.
    fp.rigid = scene.canonical_rigid();
    double s = 0.5 - 0.5 * std::cos(phase);  // 0 -> 1 -> 0 over the sequence
    Vec3 target = Vec3(-0.35, 0.12, 0.0);
    Vec3 offset = s * (target - cfg.box_center);
    Mat3 r = rot_y(phase);
    Vec3 c0 = cfg.box_center;
    RigidTransform B0{r, c0 - r * c0 + offset};
    fp.rigid.bone_transforms[0] = B0;
    fp.rigid.posed_joints[0] = B0.apply(c0);
    fp.rigid.validate();

    out.push_back(std::move(fp));
  }
  return out;
}

std::vector<Camera> make_cameras(const SceneConfig& cfg) {
  std::vector<Camera> cams;
  double dist = 2.1 * std::max(1.0, cfg.n_bones * cfg.bone_length);
  for (int i = 0; i < cfg.cams; ++i) {
    double ang = 2.0 * std::numbers::pi * i / cfg.cams;
    Vec3 eye(dist * std::sin(ang), 0.15, dist * std::cos(ang));
    Vec3 fwd = (-eye).normalized();
    Vec3 up(0.0, 1.0, 0.0);
    Vec3 xc = fwd.cross(up).norm() > 1e-6 ? Vec3(fwd.cross(up)).normalized()
                                          : Vec3(1, 0, 0);
    // Image y points down.
    Vec3 yc = fwd.cross(xc);

    Camera cam;
    cam.extrinsics.rotation.row(0) = xc.transpose();
    cam.extrinsics.rotation.row(1) = yc.transpose();
    cam.extrinsics.rotation.row(2) = fwd.transpose();
    cam.extrinsics.translation = -(cam.extrinsics.rotation * eye);
    cam.width = cfg.width;
    cam.height = cfg.height;
    double f = cfg.focal * cfg.width / 256.0;
    cam.intrinsics << f, 0, cfg.width / 2.0, 0, f, cfg.height / 2.0, 0, 0, 1;
    cam.validate();
    cams.push_back(cam);
  }
  return cams;
}

namespace {

struct TraceHit {
  bool hit = false;
  double t = 0.0;
};

TraceHit sphere_trace(const AnalyticScene& scene, Entity e,
                      const SkeletonFrame& skel, const Vec3& origin,
                      const Vec3& dir, double t0, double t1) {
  Vec3 warm = Vec3::Constant(std::numeric_limits<double>::quiet_NaN());
  double t = t0;
  for (int iter = 0; iter < 400 && t <= t1; ++iter) {
    double d = scene.sdf_posed(e, skel, origin + t * dir, &warm);
    if (d < 1e-4) return {true, t};
    t += std::max(0.9 * d, 1e-4);
  }
  return {false, 0.0};
}

Vec3 posed_normal(const AnalyticScene& scene, Entity e, const SkeletonFrame& skel,
                  const Vec3& p) {
  const double h = 2e-4;
  Vec3 warm = Vec3::Constant(std::numeric_limits<double>::quiet_NaN());
  Vec3 n;
  for (int a = 0; a < 3; ++a) {
    Vec3 dp = Vec3::Zero();
    dp[a] = h;
    n[a] = scene.sdf_posed(e, skel, p + dp, &warm) -
           scene.sdf_posed(e, skel, p - dp, &warm);
  }
  double norm = n.norm();
  return norm > 1e-12 ? Vec3(n / norm) : Vec3::UnitZ();
}

}  // namespace

DatasetFrame render_ground_truth(const AnalyticScene& scene, const FramePose& pose,
                                 const Camera& cam) {
  DatasetFrame out;
  out.rgb = Image(cam.width, cam.height);
  out.mask = Image(cam.width, cam.height);
  const Vec3 eye = cam.center();
  const Vec3 light = Vec3(0.4, 0.8, 0.6).normalized();

  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      Vec3 dir = cam.ray_direction(x + 0.5, y + 0.5);
      double t0, t1;
      if (!ray_aabb(eye, dir, scene.bounds(), t0, t1)) continue;

      TraceHit hit_d = sphere_trace(scene, Entity::Deformable, pose.deformable,
                                    eye, dir, t0, t1);
      TraceHit hit_nd = sphere_trace(scene, Entity::NonDeformable, pose.rigid,
                                     eye, dir, t0, t1);
      Entity front;
      double t_hit;
      if (hit_d.hit && (!hit_nd.hit || hit_d.t <= hit_nd.t)) {
        front = Entity::Deformable;
        t_hit = hit_d.t;
      } else if (hit_nd.hit) {
        front = Entity::NonDeformable;
        t_hit = hit_nd.t;
      } else {
        continue;  // background stays black / label 0
      }

      const SkeletonFrame& skel =
          front == Entity::Deformable ? pose.deformable : pose.rigid;
      Vec3 p = eye + t_hit * dir;
      Vec3 n = posed_normal(scene, front, skel, p);
      if (n.dot(dir) > 0.0) n = -n;
      double shade = 0.25 + 0.75 * std::max(n.dot(light), 0.0);
      Vec3 rgb = scene.color(front) * shade;
      for (int c = 0; c < 3; ++c)
        out.rgb.at(x, y, c) = static_cast<unsigned char>(
            std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
      out.mask.at(x, y, 0) =
          front == Entity::Deformable ? kMaskDeformable : kMaskNonDeformable;
    }
  }
  return out;
}

std::string Dataset::rgb_path(int t, int cam) const {
  return root + "/frames/" + frame_dir_name(t) + "/rgb_" + std::to_string(cam) + ".png";
}
std::string Dataset::mask_path(int t, int cam) const {
  return root + "/frames/" + frame_dir_name(t) + "/mask_" + std::to_string(cam) + ".png";
}
std::string Dataset::gt_canonical_path(Entity e) const {
  return root + "/gt/canonical_" +
         (e == Entity::Deformable ? std::string("d") : std::string("nd")) + ".obj";
}
std::string Dataset::gt_posed_path(int t, Entity e) const {
  return root + "/gt/posed_" + frame_dir_name(t) + "_" +
         (e == Entity::Deformable ? std::string("d") : std::string("nd")) + ".obj";
}

void export_dataset(const AnalyticScene& scene, const std::vector<FramePose>& poses,
                    const std::vector<Camera>& cams, const std::string& path,
                    std::uint64_t seed, bool overwrite, int mesh_res) {
  fs::path root(path);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!overwrite)
      throw InvalidInput("export_dataset: " + path +
                         " exists and is not empty (use overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root / "frames");
  fs::create_directories(root / "gt");

  nlohmann::json meta;
  meta["scene"] = scene.config().to_json();
  meta["seed"] = seed;
  meta["frames"] = static_cast<int>(poses.size());
  meta["bounds"] = {{"lo", {scene.bounds().lo[0], scene.bounds().lo[1], scene.bounds().lo[2]}},
                    {"hi", {scene.bounds().hi[0], scene.bounds().hi[1], scene.bounds().hi[2]}}};
  nlohmann::json jcams = nlohmann::json::array();
  for (const Camera& c : cams) jcams.push_back(c.to_json());
  meta["cameras"] = jcams;
  write_json_file(meta, root / "meta.json");

  // Canonical meshes over each entity's padded bbox.
  auto extract = [&](Entity e) {
    const SkeletonFrame& skel = e == Entity::Deformable
                                    ? scene.canonical_deformable()
                                    : scene.canonical_rigid();
    Vec3 lo = skel.canonical_joints[0], hi = skel.canonical_joints[0];
    for (const Vec3& j : skel.canonical_joints) {
      lo = lo.cwiseMin(j);
      hi = hi.cwiseMax(j);
    }
    double pad = e == Entity::Deformable
                     ? scene.config().capsule_radius * 2.5
                     : scene.config().box_half.norm() + 0.05;
    lo.array() -= pad;
    hi.array() += pad;
    return marching_cubes([&](const Vec3& p) { return scene.sdf(e, p); }, lo, hi,
                          mesh_res, e == Entity::Deformable ? "d" : "nd");
  };
  Mesh canon_d = largest_component(extract(Entity::Deformable));
  Mesh canon_nd = largest_component(extract(Entity::NonDeformable));
  write_obj(canon_d, (root / "gt" / "canonical_d.obj").string());
  write_obj(canon_nd, (root / "gt" / "canonical_nd.obj").string());

  for (size_t t = 0; t < poses.size(); ++t) {
    fs::path fdir = root / "frames" / frame_dir_name(static_cast<int>(t));
    fs::create_directories(fdir);
    for (size_t c = 0; c < cams.size(); ++c) {
      DatasetFrame frame = render_ground_truth(scene, poses[t], cams[c]);
      write_png(frame.rgb, (fdir / ("rgb_" + std::to_string(c) + ".png")).string());
      write_png(frame.mask, (fdir / ("mask_" + std::to_string(c) + ".png")).string());
    }
    nlohmann::json skels;
    skels["deformable"] = poses[t].deformable.to_json();
    skels["rigid"] = poses[t].rigid.to_json();
    write_json_file(skels, fdir / "skel.json");

    // Posed ground-truth meshes: exact Eq.-1 LBS of the canonical vertices.
    auto pose_gt = [&](const Mesh& canon, Entity e) {
      Mesh posed = canon;
      const SkeletonFrame& skel =
          e == Entity::Deformable ? poses[t].deformable : poses[t].rigid;
      for (Vec3& v : posed.vertices) {
        SkinningWeights w = e == Entity::Deformable
                                ? scene.analytic_weights(v)
                                : scene.analytic_weights_rigid(v);
        v = lbs_forward(w, skel, v);
      }
      return posed;
    };
    write_obj(pose_gt(canon_d, Entity::Deformable),
              (root / "gt" / ("posed_" + frame_dir_name(static_cast<int>(t)) + "_d.obj")).string());
    write_obj(pose_gt(canon_nd, Entity::NonDeformable),
              (root / "gt" / ("posed_" + frame_dir_name(static_cast<int>(t)) + "_nd.obj")).string());
  }
}

Dataset load_dataset(const std::string& path) {
  fs::path root(path);
  nlohmann::json meta = read_json_file(root / "meta.json");
  Dataset ds;
  ds.root = path;
  ds.scene = SceneConfig::from_json(meta.at("scene"));
  ds.seed = meta.at("seed").get<std::uint64_t>();
  auto lo = meta.at("bounds").at("lo").get<std::vector<double>>();
  auto hi = meta.at("bounds").at("hi").get<std::vector<double>>();
  ds.bounds.lo = Vec3(lo[0], lo[1], lo[2]);
  ds.bounds.hi = Vec3(hi[0], hi[1], hi[2]);
  for (const auto& jc : meta.at("cameras")) ds.cameras.push_back(Camera::from_json(jc));

  int T = meta.at("frames").get<int>();
  for (int t = 0; t < T; ++t) {
    nlohmann::json skels = read_json_file(root / "frames" / frame_dir_name(t) / "skel.json");
    FramePose fp;
    fp.deformable = SkeletonFrame::from_json(skels.at("deformable"));
    fp.rigid = SkeletonFrame::from_json(skels.at("rigid"));
    ds.poses.push_back(std::move(fp));
  }
  return ds;
}

std::string dataset_hash(const std::string& path) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    // The run manifest describes the dataset (with timestamps); it is not
    // part of the data itself.
    if (entry.path().filename() == "manifest.json") continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::string bytes;
  for (const fs::path& f : files) {
    bytes += fs::relative(f, path).generic_string();
    bytes += '\0';
    std::ifstream in(f, std::ios::binary);
    bytes.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return fnv1a_hex(bytes);
}

}  // namespace tfs

// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "tfs/mesh.hpp"
#include "tfs/metrics.hpp"

#include <filesystem>

using namespace tfs;
using namespace tfs::test;

namespace {

ScalarField sphere_field(const Vec3& center, double r) {
  return [center, r](const Vec3& p) { return (p - center).norm() - r; };
}

double mean_vertex_radius(const Mesh& m, const Vec3& c, double& stddev) {
  double mean = 0.0;
  for (const Vec3& v : m.vertices) mean += (v - c).norm();
  mean /= static_cast<double>(m.vertices.size());
  double var = 0.0;
  for (const Vec3& v : m.vertices) var += std::pow((v - c).norm() - mean, 2);
  stddev = std::sqrt(var / static_cast<double>(m.vertices.size()));
  return mean;
}

}  // namespace

TEST_CASE("marching cubes reconstructs a sphere") {
  double r = 0.3;
  Vec3 lo = Vec3::Constant(-0.5), hi = Vec3::Constant(0.5);
  Mesh m = marching_cubes(sphere_field(Vec3::Zero(), r), lo, hi, 48);
  REQUIRE_FALSE(m.empty());
  double stddev = 0.0;
  double mean = mean_vertex_radius(m, Vec3::Zero(), stddev);
  CHECK(std::abs(mean - r) < 0.05 * r);
  CHECK(stddev < 0.05 * r);
  CHECK(m.surface_area() == doctest::Approx(4.0 * M_PI * r * r).epsilon(0.03));
  // All vertices inside the grid box.
  Vec3 blo, bhi;
  m.bbox(blo, bhi);
  CHECK((blo.array() >= lo.array() - 1e-12).all());
  CHECK((bhi.array() <= hi.array() + 1e-12).all());
}

TEST_CASE("marching cubes self-convergence under refinement") {
  double r = 0.3;
  Vec3 lo = Vec3::Constant(-0.5), hi = Vec3::Constant(0.5);
  auto worst_surface_err = [&](int res) {
    Mesh m = marching_cubes(sphere_field(Vec3::Zero(), r), lo, hi, res);
    double worst = 0.0;
    for (const Vec3& v : m.vertices)
      worst = std::max(worst, std::abs(v.norm() - r));
    return worst;
  };
  double coarse_cell = (hi - lo).norm() / 24.0;
  CHECK(worst_surface_err(48) < coarse_cell);
  CHECK(worst_surface_err(48) <= worst_surface_err(24) + 1e-12);
}

TEST_CASE("marching cubes without a zero crossing is an error naming the entity") {
  Vec3 lo = Vec3::Constant(-0.5), hi = Vec3::Constant(0.5);
  ScalarField all_pos = [](const Vec3&) { return 1.0; };
  try {
    marching_cubes(all_pos, lo, hi, 8, "deformable");
    FAIL("expected InvalidInput");
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("deformable") != std::string::npos);
  }
}

TEST_CASE("grid variant matches the callback variant") {
  double r = 0.25;
  Vec3 lo = Vec3::Constant(-0.4), hi = Vec3::Constant(0.4);
  int res = 16;
  std::vector<double> vals(static_cast<size_t>((res + 1) * (res + 1) * (res + 1)));
  for (int ix = 0; ix <= res; ++ix)
    for (int iy = 0; iy <= res; ++iy)
      for (int iz = 0; iz <= res; ++iz) {
        Vec3 p = lo + Vec3((hi - lo).x() * ix / res, (hi - lo).y() * iy / res,
                           (hi - lo).z() * iz / res);
        vals[static_cast<size_t>((ix * (res + 1) + iy) * (res + 1) + iz)] =
            p.norm() - r;
      }
  Mesh a = marching_cubes_grid(vals, lo, hi, res);
  Mesh b = marching_cubes(sphere_field(Vec3::Zero(), r), lo, hi, res);
  REQUIRE(a.vertices.size() == b.vertices.size());
  REQUIRE(a.faces.size() == b.faces.size());
  for (size_t i = 0; i < a.vertices.size(); ++i)
    CHECK((a.vertices[i] - b.vertices[i]).norm() < 1e-12);
}

TEST_CASE("largest connected component keeps the bigger sphere") {
  ScalarField two = [](const Vec3& p) {
    double a = (p - Vec3(-0.5, 0, 0)).norm() - 0.3;
    double b = (p - Vec3(0.6, 0, 0)).norm() - 0.1;
    return std::min(a, b);
  };
  Mesh both = marching_cubes(two, Vec3::Constant(-1.0), Vec3::Constant(1.0), 40);
  Mesh big = largest_component(both);
  CHECK(big.faces.size() < both.faces.size());
  for (const Vec3& v : big.vertices)
    CHECK((v - Vec3(-0.5, 0, 0)).norm() < 0.45);
}

TEST_CASE("degenerate triangle and orphan vertex cleanup") {
  Mesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(5, 5, 5)};
  m.faces = {{0, 1, 2}, {0, 1, 1}};  // second face has zero area
  Mesh c = remove_degenerate(m);
  CHECK(c.faces.size() == 1);
  CHECK(c.vertices.size() == 3);  // the orphan (5,5,5) is dropped
  CHECK(c.surface_area() == doctest::Approx(0.5));
}

TEST_CASE("obj round trip") {
  Mesh m = marching_cubes(sphere_field(Vec3::Zero(), 0.2),
                          Vec3::Constant(-0.4), Vec3::Constant(0.4), 12);
  std::string dir = scratch_dir("mesh_obj");
  std::string path = dir + "/m.obj";
  write_obj(m, path);
  Mesh r = read_obj(path);
  REQUIRE(r.vertices.size() == m.vertices.size());
  REQUIRE(r.faces.size() == m.faces.size());
  for (size_t i = 0; i < m.vertices.size(); ++i)
    CHECK((r.vertices[i] - m.vertices[i]).norm() < 1e-5);
  CHECK(r.faces == m.faces);
  std::filesystem::remove_all(dir);
}

TEST_CASE("surface sampling: count, determinism, on-surface") {
  Mesh m = marching_cubes(sphere_field(Vec3::Zero(), 0.3),
                          Vec3::Constant(-0.5), Vec3::Constant(0.5), 32);
  MatX s = sample_surface(m, 500, 9);
  REQUIRE(s.cols() == 500);
  CHECK(sample_surface(m, 500, 9) == s);
  CHECK(sample_surface(m, 500, 10) != s);
  for (int i = 0; i < 500; ++i)
    CHECK(std::abs(s.col(i).norm() - 0.3) < 0.03);
}

TEST_CASE("metrics: identical sets are perfect") {
  MatX pts = MatX::Random(3, 200);
  MetricReport r = metrics_from_points(pts, pts, 5.0);
  CHECK(r.dist_acc_cm == doctest::Approx(0.0));
  CHECK(r.completeness_cm == doctest::Approx(0.0));
  CHECK(r.chamfer_cm == doctest::Approx(0.0));
  CHECK(r.precision_pct == doctest::Approx(100.0));
  CHECK(r.recall_pct == doctest::Approx(100.0));
  CHECK(r.f_score_pct == doctest::Approx(100.0));
}

TEST_CASE("metrics: 1 cm hand case") {
  MatX a = MatX::Zero(3, 1);
  MatX b = MatX::Zero(3, 1);
  b(0, 0) = 0.01;  // meters
  MetricReport r = metrics_from_points(a, b, 5.0);
  CHECK(r.dist_acc_cm == doctest::Approx(1.0));
  CHECK(r.completeness_cm == doctest::Approx(1.0));
  CHECK(r.chamfer_cm == doctest::Approx(1.0));
  CHECK(r.precision_pct == doctest::Approx(100.0));
  CHECK(r.recall_pct == doctest::Approx(100.0));
  CHECK(r.threshold_cm == 5.0);
}

TEST_CASE("grid nearest neighbors equal brute force") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    MatX q(3, 300), ref(3, 500);
    for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = uni(rng);
    for (Eigen::Index i = 0; i < ref.size(); ++i) ref(i) = uni(rng);
    VecX fast = nearest_distances(q, ref);
    VecX slow = nearest_distances_bruteforce(q, ref);
    CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-12);

    MetricReport a = metrics_from_points(q, ref, 5.0, false);
    MetricReport b = metrics_from_points(q, ref, 5.0, true);
    CHECK(std::abs(a.chamfer_cm - b.chamfer_cm) < 1e-9);
    CHECK(std::abs(a.f_score_pct - b.f_score_pct) < 1e-9);
  }
}

TEST_CASE("metric symmetry: swapping sides swaps the directed fields") {
  MatX a = MatX::Random(3, 120), b = MatX::Random(3, 80);
  MetricReport ab = metrics_from_points(a, b, 5.0);
  MetricReport ba = metrics_from_points(b, a, 5.0);
  CHECK(ab.dist_acc_cm == doctest::Approx(ba.completeness_cm));
  CHECK(ab.completeness_cm == doctest::Approx(ba.dist_acc_cm));
  CHECK(ab.precision_pct == doctest::Approx(ba.recall_pct));
  CHECK(ab.recall_pct == doctest::Approx(ba.precision_pct));
  CHECK(ab.chamfer_cm == doctest::Approx(ba.chamfer_cm));
  // f-score is the harmonic mean of precision and recall.
  if (ab.precision_pct + ab.recall_pct > 0) {
    double want = 2.0 * ab.precision_pct * ab.recall_pct /
                  (ab.precision_pct + ab.recall_pct);
    CHECK(std::abs(ab.f_score_pct - want) < 1e-6);
  }
}

TEST_CASE("metrics are invariant to a joint rigid transform") {
  MatX a = MatX::Random(3, 150), b = MatX::Random(3, 150);
  RigidTransform t{rot_z(0.8), Vec3(0.3, -0.7, 1.2)};
  MatX at(3, a.cols()), bt(3, b.cols());
  for (Eigen::Index i = 0; i < a.cols(); ++i) at.col(i) = t.apply(a.col(i));
  for (Eigen::Index i = 0; i < b.cols(); ++i) bt.col(i) = t.apply(b.col(i));
  MetricReport r0 = metrics_from_points(a, b, 5.0);
  MetricReport r1 = metrics_from_points(at, bt, 5.0);
  CHECK(std::abs(r0.chamfer_cm - r1.chamfer_cm) < 1e-6);
  CHECK(std::abs(r0.f_score_pct - r1.f_score_pct) < 1e-6);
  CHECK(std::abs(r0.dist_acc_cm - r1.dist_acc_cm) < 1e-6);
}

TEST_CASE("compute_metrics on meshes and empty-mesh rejection") {
  Mesh s1 = marching_cubes(sphere_field(Vec3::Zero(), 0.3),
                           Vec3::Constant(-0.5), Vec3::Constant(0.5), 24);
  // Same mesh, independent sample draws: chamfer is pure sampling noise,
  // bounded by a couple of grid cells; f-score stays perfect at 5 cm.
  MetricReport self = compute_metrics(s1, s1, 2000, 5.0, 3, false);
  CHECK(self.chamfer_cm < 2.0);
  CHECK(self.f_score_pct == doctest::Approx(100.0));

  Mesh s2 = marching_cubes(sphere_field(Vec3(0.02, 0, 0), 0.3),
                           Vec3::Constant(-0.5), Vec3::Constant(0.5), 24);
  MetricReport shift = compute_metrics(s1, s2, 4000, 5.0, 3, false);
  CHECK(shift.chamfer_cm > 0.2);
  CHECK(shift.chamfer_cm < 4.0);

  Mesh empty;
  CHECK_THROWS_AS(compute_metrics(empty, s1, 100, 5.0, 1), InvalidInput);

  // use_vertices path runs and stays sane.
  MetricReport v = compute_metrics(s1, s2, 0, 5.0, 3, true);
  CHECK(v.chamfer_cm > 0.0);
}

TEST_CASE("metric csv helpers") {
  CHECK(metric_csv_header().rfind("group", 0) == 0);
  MetricReport r;
  r.chamfer_cm = 1.5;
  std::string row = metric_csv_row("scene", 4, r);
  CHECK(row.rfind("scene,4,", 0) == 0);
}

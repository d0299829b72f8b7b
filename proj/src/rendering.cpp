// SPDX-License-Identifier: Apache-2.0

#include "tfs/rendering.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <random>

namespace tfs {

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw InvalidInput("Camera: bad resolution");
  if (intrinsics(0, 0) <= 0.0 || intrinsics(1, 1) <= 0.0)
    throw InvalidInput("Camera: focal lengths must be positive");
  if (std::abs(intrinsics.determinant()) < 1e-12)
    throw InvalidInput("Camera: intrinsics not invertible");
  if (!extrinsics.is_valid()) throw InvalidInput("Camera: invalid extrinsics");
}

Vec3 Camera::center() const {
  return -(extrinsics.rotation.transpose() * extrinsics.translation);
}

Vec3 Camera::ray_direction(double px, double py) const {
  Vec3 pix(px, py, 1.0);
  Vec3 dir_cam = intrinsics.inverse() * pix;
  Vec3 dir = extrinsics.rotation.transpose() * dir_cam;
  return dir.normalized();
}

nlohmann::json Camera::to_json() const {
  nlohmann::json j;
  std::vector<double> k;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) k.push_back(intrinsics(r, c));
  j["intrinsics"] = k;
  std::vector<double> e;
  MatX m = extrinsics.to_rows_3x4();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) e.push_back(m(r, c));
  j["extrinsics"] = e;
  j["width"] = width;
  j["height"] = height;
  return j;
}

Camera Camera::from_json(const nlohmann::json& j) {
  Camera cam;
  auto k = j.at("intrinsics").get<std::vector<double>>();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.intrinsics(r, c) = k[static_cast<size_t>(3 * r + c)];
  auto e = j.at("extrinsics").get<std::vector<double>>();
  MatX m(3, 4);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = e[static_cast<size_t>(4 * r + c)];
  cam.extrinsics = RigidTransform::from_rows_3x4(m);
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.validate();
  return cam;
}

std::vector<char> dilate_mask(const std::vector<char>& mask, int w, int h, int radius) {
  std::vector<char> out(mask.size(), 0);
  // Two-pass Chebyshev distance via separable max filter.
  std::vector<char> tmp(mask.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      char v = 0;
      for (int dx = -radius; dx <= radius && !v; ++dx) {
        int xx = x + dx;
        if (xx >= 0 && xx < w && mask[static_cast<size_t>(y) * w + xx]) v = 1;
      }
      tmp[static_cast<size_t>(y) * w + x] = v;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      char v = 0;
      for (int dy = -radius; dy <= radius && !v; ++dy) {
        int yy = y + dy;
        if (yy >= 0 && yy < h && tmp[static_cast<size_t>(yy) * w + x]) v = 1;
      }
      out[static_cast<size_t>(y) * w + x] = v;
    }
  }
  return out;
}

bool ray_aabb(const Vec3& origin, const Vec3& dir, const SceneBounds& bounds,
              double& t_near, double& t_far) {
  t_near = 0.0;
  t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-12) {
      if (origin[a] < bounds.lo[a] || origin[a] > bounds.hi[a]) return false;
      continue;
    }
    double t0 = (bounds.lo[a] - origin[a]) / dir[a];
    double t1 = (bounds.hi[a] - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  return t_near < t_far;
}

std::pair<RayBatch, RayBatch> SemanticRaySampler::sample(
    const Image& image, const Image& mask, const Camera& cam,
    const SceneBounds& bounds, int n_rays_per_entity, std::uint64_t seed) {
  if (mask.width != image.width || mask.height != image.height)
    throw InvalidInput("SemanticRaySampler: mask/image resolution mismatch");
  const int w = image.width, h = image.height;
  const size_t n_px = static_cast<size_t>(w) * h;

  std::vector<char> inside_d(n_px, 0), inside_nd(n_px, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      unsigned char label = mask.at(x, y, 0);
      if (label == kMaskDeformable) inside_d[static_cast<size_t>(y) * w + x] = 1;
      else if (label == kMaskNonDeformable) inside_nd[static_cast<size_t>(y) * w + x] = 1;
    }
  }
  auto band_of = [&](const std::vector<char>& inside) {
    std::vector<char> dil = dilate_mask(inside, w, h, dilation_radius_);
    for (size_t i = 0; i < n_px; ++i)
      dil[i] = dil[i] && !inside[i];
    return dil;
  };
  std::vector<char> band_d = band_of(inside_d);
  std::vector<char> band_nd = band_of(inside_nd);

  bool have_d = std::find(inside_d.begin(), inside_d.end(), 1) != inside_d.end();
  bool have_nd = std::find(inside_nd.begin(), inside_nd.end(), 1) != inside_nd.end();
  if (have_d) { last_band_d_ = band_d; last_w_ = w; last_h_ = h; }
  if (have_nd) { last_band_nd_ = band_nd; last_w_ = w; last_h_ = h; }

  RayBatch batch_d = sample_entity(
      Entity::Deformable, image, inside_d,
      have_d ? band_d : (last_band_d_ && last_w_ == w ? *last_band_d_ : band_d),
      cam, bounds, n_rays_per_entity, seed);
  RayBatch batch_nd = sample_entity(
      Entity::NonDeformable, image, inside_nd,
      have_nd ? band_nd : (last_band_nd_ && last_w_ == w ? *last_band_nd_ : band_nd),
      cam, bounds, n_rays_per_entity, seed + 0x9e3779b97f4a7c15ull);
  return {std::move(batch_d), std::move(batch_nd)};
}

RayBatch SemanticRaySampler::sample_entity(Entity entity, const Image& image,
                                           const std::vector<char>& inside,
                                           const std::vector<char>& band,
                                           const Camera& cam, const SceneBounds& bounds,
                                           int n_rays, std::uint64_t seed) {
  const int w = image.width, h = image.height;
  std::vector<int> in_px, band_px;
  for (int i = 0; i < w * h; ++i) {
    if (inside[static_cast<size_t>(i)]) in_px.push_back(i);
    if (band[static_cast<size_t>(i)]) band_px.push_back(i);
  }

  std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(entity) << 32));
  auto pick = [&rng](const std::vector<int>& pool) {
    std::uniform_int_distribution<size_t> dist(0, pool.size() - 1);
    return pool[dist(rng)];
  };

  std::vector<int> chosen;
  chosen.reserve(static_cast<size_t>(n_rays));
  if (!in_px.empty()) {
    int n_in = band_px.empty() ? n_rays
                               : static_cast<int>(std::lround(0.8 * n_rays));
    for (int i = 0; i < n_in; ++i) chosen.push_back(pick(in_px));
    for (int i = n_in; i < n_rays; ++i) chosen.push_back(pick(band_px));
  } else if (!band_px.empty()) {
    // Entity absent this frame: draw from the dilation band around the last
    // known region.
    for (int i = 0; i < n_rays; ++i) chosen.push_back(pick(band_px));
  } else {
    ++warnings_;
    std::uniform_int_distribution<int> dist(0, w * h - 1);
    for (int i = 0; i < n_rays; ++i) chosen.push_back(dist(rng));
  }

  RayBatch batch;
  batch.entity = entity;
  batch.origins.resize(3, n_rays);
  batch.directions.resize(3, n_rays);
  batch.target_rgb.resize(3, n_rays);
  batch.near.resize(n_rays);
  batch.far.resize(n_rays);
  batch.pixels.resize(static_cast<size_t>(n_rays));

  Vec3 center = cam.center();
  double fallback_far = (bounds.hi - bounds.lo).norm() +
                        (center - 0.5 * (bounds.lo + bounds.hi)).norm();
  for (int i = 0; i < n_rays; ++i) {
    int px = chosen[static_cast<size_t>(i)] % w;
    int py = chosen[static_cast<size_t>(i)] / w;
    batch.pixels[static_cast<size_t>(i)] = {px, py};
    Vec3 dir = cam.ray_direction(px + 0.5, py + 0.5);
    batch.origins.col(i) = center;
    batch.directions.col(i) = dir;
    for (int c = 0; c < 3; ++c)
      batch.target_rgb(c, i) = image.at(px, py, c) / 255.0;
    double t0, t1;
    if (ray_aabb(center, dir, bounds, t0, t1)) {
      batch.near[i] = std::max(t0, 0.05);
      batch.far[i] = t1;
    } else {
      batch.near[i] = 0.05;
      batch.far[i] = fallback_far;
    }
  }
  return batch;
}

MatX stratified_depths(const RayBatch& batch, int n_samples, std::uint64_t seed,
                       bool jitter) {
  if (n_samples < 2) throw InvalidInput("stratified_depths: n_samples must be >= 2");
  const int n = batch.size();
  MatX depths(n_samples, n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int r = 0; r < n; ++r) {
    double near = batch.near[r], far = batch.far[r];
    double span = (far - near) / n_samples;
    for (int s = 0; s < n_samples; ++s) {
      double u = jitter ? uni(rng) : 0.5;
      depths(s, r) = near + (s + u) * span;
    }
  }
  return depths;
}

MatX points_along_rays(const RayBatch& batch, const MatX& depths) {
  const int n = batch.size();
  const int s_count = static_cast<int>(depths.rows());
  MatX pts(3, static_cast<Eigen::Index>(n) * s_count);
  for (int r = 0; r < n; ++r)
    for (int s = 0; s < s_count; ++s)
      pts.col(static_cast<Eigen::Index>(r) * s_count + s) =
          batch.origins.col(r) + depths(s, r) * batch.directions.col(r);
  return pts;
}

double sdf_to_density(double sdf, double beta, double alpha_scale) {
  if (beta <= 0.0) throw InvalidInput("sdf_to_density: beta must be > 0");
  if (sdf >= 0.0) return alpha_scale * 0.5 * std::exp(-sdf / beta);
  return alpha_scale * (1.0 - 0.5 * std::exp(sdf / beta));
}

void sdf_to_density_grad(double sdf, double beta, double alpha_scale,
                         double& d_sdf, double& d_beta, double& d_alpha) {
  double e = std::exp(-std::abs(sdf) / beta);
  d_sdf = -alpha_scale * 0.5 * e / beta;
  // d/dbeta of exp(-|s|/beta) = exp(..) * |s|/beta^2; sign flips on the
  // inside branch where the exponential is subtracted.
  d_beta = alpha_scale * 0.5 * e * std::abs(sdf) / (beta * beta) *
           (sdf >= 0.0 ? 1.0 : -1.0);
  d_alpha = sdf >= 0.0 ? 0.5 * e : (1.0 - 0.5 * e);
}

RenderOutput composite_render(const SampleSet& set_d, const SampleSet& set_nd,
                              double far) {
  auto check_sorted = [](const SampleSet& s) {
    for (Eigen::Index i = 0; i + 1 < s.depths.size(); ++i)
      if (s.depths[i + 1] < s.depths[i])
        throw NumericalError("composite_render: branch depths not sorted");
  };
  check_sorted(set_d);
  check_sorted(set_nd);

  const int nd_count = static_cast<int>(set_nd.depths.size());
  const int d_count = static_cast<int>(set_d.depths.size());
  const int total = d_count + nd_count;

  RenderOutput out;
  out.weights.resize(total);
  out.deltas.resize(total);
  out.trans.resize(total);
  out.density.resize(total);
  out.merged_rgb.resize(3, total);
  out.src_entity.resize(static_cast<size_t>(total));
  out.src_index.resize(static_cast<size_t>(total));

  // Merge by depth; ties keep the deformable branch first.
  VecX depths(total);
  int i = 0, j = 0;
  for (int k = 0; k < total; ++k) {
    bool take_d = j >= nd_count ||
                  (i < d_count && set_d.depths[i] <= set_nd.depths[j]);
    if (take_d) {
      depths[k] = set_d.depths[i];
      out.density[k] = set_d.density[i];
      out.merged_rgb.col(k) = set_d.rgb.col(i);
      out.src_entity[static_cast<size_t>(k)] = Entity::Deformable;
      out.src_index[static_cast<size_t>(k)] = i++;
    } else {
      depths[k] = set_nd.depths[j];
      out.density[k] = set_nd.density[j];
      out.merged_rgb.col(k) = set_nd.rgb.col(j);
      out.src_entity[static_cast<size_t>(k)] = Entity::NonDeformable;
      out.src_index[static_cast<size_t>(k)] = j++;
    }
  }

  for (int k = 0; k < total; ++k) {
    double next = (k + 1 < total) ? depths[k + 1] : std::max(far, depths[k]);
    out.deltas[k] = std::max(next - depths[k], 0.0);
  }
  if (total > 0 && out.deltas[total - 1] <= 0.0) out.deltas[total - 1] = 1e-8;

  double t_cur = 1.0;
  for (int k = 0; k < total; ++k) {
    out.trans[k] = t_cur;
    double a = -std::expm1(-out.density[k] * out.deltas[k]);
    double wgt = t_cur * a;
    out.weights[k] = wgt;
    out.rgb += wgt * Vec3(out.merged_rgb.col(k));
    out.alpha += wgt;
    if (out.src_entity[static_cast<size_t>(k)] == Entity::Deformable)
      out.alpha_d += wgt;
    else
      out.alpha_nd += wgt;
    t_cur *= 1.0 - a;
  }
  return out;
}

SampleGrads composite_backward(const RenderOutput& out, const Vec3& g_rgb,
                               double g_alpha, double g_alpha_d, double g_alpha_nd,
                               const VecX* g_weights) {
  const int total = static_cast<int>(out.weights.size());
  if (g_weights && g_weights->size() != total)
    throw InvalidInput("composite_backward: g_weights size mismatch");
  VecX gw(total);
  for (int k = 0; k < total; ++k) {
    double g = g_rgb.dot(out.merged_rgb.col(k)) + g_alpha;
    g += (out.src_entity[static_cast<size_t>(k)] == Entity::Deformable) ? g_alpha_d
                                                                        : g_alpha_nd;
    if (g_weights) g += (*g_weights)[k];
    gw[k] = g;
  }

  // dL/dsigma_i = delta_i * (gw_i * T_{i+1} - sum_{k>i} gw_k w_k).
  VecX g_sigma(total);
  double suffix = 0.0;
  for (int k = total - 1; k >= 0; --k) {
    double a = -std::expm1(-out.density[k] * out.deltas[k]);
    double t_next = out.trans[k] * (1.0 - a);
    g_sigma[k] = out.deltas[k] * (gw[k] * t_next - suffix);
    suffix += gw[k] * out.weights[k];
  }

  int d_count = 0, nd_count = 0;
  for (int k = 0; k < total; ++k)
    (out.src_entity[static_cast<size_t>(k)] == Entity::Deformable ? d_count : nd_count)++;

  SampleGrads grads;
  grads.g_density_d = VecX::Zero(d_count);
  grads.g_density_nd = VecX::Zero(nd_count);
  grads.g_rgb_d = MatX::Zero(3, d_count);
  grads.g_rgb_nd = MatX::Zero(3, nd_count);
  for (int k = 0; k < total; ++k) {
    int idx = out.src_index[static_cast<size_t>(k)];
    Vec3 gc = out.weights[k] * g_rgb;
    if (out.src_entity[static_cast<size_t>(k)] == Entity::Deformable) {
      grads.g_density_d[idx] = g_sigma[k];
      grads.g_rgb_d.col(idx) = gc;
    } else {
      grads.g_density_nd[idx] = g_sigma[k];
      grads.g_rgb_nd.col(idx) = gc;
    }
  }
  return grads;
}

}  // namespace tfs
